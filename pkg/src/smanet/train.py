"""Training and evaluation loops wired for strict reproducibility.

One master seed feeds separate derived streams (data, init, shuffling,
augmentation), so changing the epoch count never shifts the init draws,
and two runs with the same config produce byte-identical artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import SGD, Backbone, lr_schedule
from .checkpoint import save_checkpoint
from .config import (RunConfig, backbone_config, config_digest, effective_balance,
                     input_size, loss_config, np_dtype)
from .data import (DEFAULT_LABEL_PAIRS, DEFAULT_LABEL_RATES, ResampleConfig, Sample,
                   SyntheticSpec, augment, generate_synthetic, load_dataset,
                   selective_oversample)
from .errors import ConfigError, NumericError
from .losses import (compute_pos_weights, diversity_loss, multi_attention_loss,
                     task_loss, total_loss)
from .metrics import accuracy, binarize, count_binary, f1_scores
from .nn import Linear, Module, ModuleList
from .tensor import Tensor

STREAM_DATA_TRAIN = 11
STREAM_DATA_VAL = 12
STREAM_INIT = 21
STREAM_SHUFFLE = 31
STREAM_AUGMENT = 41


def derive_rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng((int(seed),) + tuple(int(s) for s in stream))


def synthetic_spec(cfg: RunConfig, subject_pool: tuple) -> SyntheticSpec:
    reps = -(-cfg.num_labels // len(DEFAULT_LABEL_RATES))
    rates = (DEFAULT_LABEL_RATES * reps)[: cfg.num_labels]
    pairs = tuple(p for p in DEFAULT_LABEL_PAIRS if p[0] < cfg.num_labels and p[1] < cfg.num_labels)
    return SyntheticSpec(
        mode="multi_label" if cfg.task == "au" else "multi_class",
        num_labels=cfg.num_labels,
        num_classes=cfg.num_classes,
        image_size=input_size(cfg),
        n_subjects=cfg.n_subjects,
        subject_pool=subject_pool,
        rates=rates,
        pairs=pairs,
    )


def subject_pools(cfg: RunConfig) -> tuple[tuple, tuple]:
    """Subject-disjoint train/val pools: every fifth subject validates."""
    all_subjects = range(cfg.n_subjects)
    val = tuple(s for s in all_subjects if s % 5 == 4)
    train = tuple(s for s in all_subjects if s % 5 != 4)
    return train, val


def build_splits(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    if cfg.data_dir:
        train, _ = load_dataset(Path(cfg.data_dir) / "train")
        val, _ = load_dataset(Path(cfg.data_dir) / "val")
        return train, val
    train_pool, val_pool = subject_pools(cfg)
    train = generate_synthetic(cfg.seed, cfg.n_train, synthetic_spec(cfg, train_pool))
    # distinct stream so val never replays train draws
    val = generate_synthetic(cfg.seed * 2 + STREAM_DATA_VAL, cfg.n_val, synthetic_spec(cfg, val_pool))
    return train, val


class TrainState(Module):
    """Backbone plus the per-channel bypass heads, checkpointed together."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        rng = derive_rng(cfg.seed, STREAM_INIT)
        bcfg = backbone_config(cfg)
        dtype = np_dtype(cfg)
        self.model = Backbone(bcfg, rng, dtype=dtype)
        self.heads = ModuleList()
        if bcfg.attention_kind == "sma" and bcfg.sma_placement != "none":
            num_out = bcfg.num_outputs
            for stage, block, cin, cout, stride in bcfg.block_positions():
                if bcfg.attention_at(stage, block):
                    per_block = ModuleList()
                    for _ in range(cfg.n_channels):
                        per_block.append(
                            Linear(cout, num_out, rng, init=("uniform", 1e-2),
                                   zero_bias=True, dtype=dtype)
                        )
                    self.heads.append(per_block)


def _batch_tensor(images: list[np.ndarray], dtype) -> Tensor:
    arr = np.stack(images).transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray(arr, dtype=dtype))


def _labels_array(samples: list[Sample], task: str):
    if task == "au":
        return np.stack([s.labels for s in samples])
    return np.array([s.labels for s in samples], dtype=np.int64)


def _split_metric(logits: np.ndarray, labels, task: str) -> float:
    if task == "au":
        _, _, _, macro = f1_scores(count_binary(binarize(logits), labels.astype(bool)))
        return macro["f1"]
    return accuracy(logits.argmax(axis=1), labels)


def evaluate_model(state: TrainState, samples: list[Sample], cfg: RunConfig) -> dict:
    """Deterministic eval pass; returns logits, metric, and label arrays."""
    dtype = np_dtype(cfg)
    state.model.eval()
    chunks = []
    with T.no_grad():
        for start in range(0, len(samples), cfg.batch_size):
            batch = samples[start : start + cfg.batch_size]
            x = _batch_tensor([s.image for s in batch], dtype)
            logits, _ = state.model(x)
            chunks.append(logits.data.astype(np.float64))
    state.model.train()
    logits = np.concatenate(chunks, axis=0)
    labels = _labels_array(samples, cfg.task)
    return {
        "logits": logits,
        "labels": labels,
        "metric": _split_metric(logits, labels, cfg.task),
    }


@dataclass
class TrainResult:
    rows: list[dict]
    best_epoch: int
    best_val: float
    digest: str
    log_path: Path | None
    checkpoint_path: Path | None


LOG_HEADER = "epoch,lr,l_cla,l_div,l_ma,l_all,train_metric,val_metric"


def format_log(rows: list[dict], digest: str) -> str:
    lines = [f"# config_digest={digest}", LOG_HEADER]
    for r in rows:
        lines.append(
            f"{r['epoch']},{r['lr']:.6f},{r['l_cla']:.6f},{r['l_div']:.6f},"
            f"{r['l_ma']:.6f},{r['l_all']:.6f},{r['train_metric']:.6f},{r['val_metric']:.6f}"
        )
    return "\n".join(lines) + "\n"


def run_training(cfg: RunConfig, out_dir: Path | None = None, log=None) -> TrainResult:
    """Full training run; writes train_log.csv and checkpoint.bin when
    out_dir is given, keeping the best-validation-metric checkpoint."""
    digest = config_digest(cfg)
    dtype = np_dtype(cfg)
    train_samples, val_samples = build_splits(cfg)

    pos_weights = None
    if cfg.task == "au":
        if cfg.resample_p > 0:
            train_samples = selective_oversample(
                train_samples,
                ResampleConfig(cfg.resample_p, cfg.resample_max_duplication),
            )
        pos_weights = compute_pos_weights(np.stack([s.labels for s in train_samples]))
    lcfg = loss_config(cfg, pos_weights)
    alpha_on, lam_on = lcfg.alpha > 0, lcfg.lam > 0

    state = TrainState(cfg)
    trainable = [p for _, p in state.model.named_parameters()]
    if lam_on:
        trainable += [p for _, p in state.heads.named_parameters()]
    opt = SGD(trainable, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    ckpt_path = log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.bin"
        log_path = out_dir / "train_log.csv"

    n = len(train_samples)
    rows: list[dict] = []
    best_val, best_epoch = -np.inf, -1
    heads_by_block = list(state.heads)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.task, base=cfg.lr)
        perm = derive_rng(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n)
        sums = {"l_cla": 0.0, "l_div": 0.0, "l_ma": 0.0, "l_all": 0.0}
        seen = 0
        train_logit_chunks, train_label_chunks = [], []
        for start in range(0, n, cfg.batch_size):
            idxs = perm[start : start + cfg.batch_size]
            batch = []
            for i in idxs:
                s = train_samples[i]
                if cfg.augment:
                    s = augment(s, (cfg.seed, STREAM_AUGMENT, epoch, int(i)), cfg.task)
                batch.append(s)
            labels = _labels_array(batch, cfg.task)
            x = _batch_tensor([s.image for s in batch], dtype)
            logits, inters = state.model(x)
            l_cla = task_loss(logits, labels, lcfg)

            l_div = l_ma = Tensor(np.zeros((), dtype=dtype))
            if inters:
                def div_term():
                    acc = None
                    for it in inters:
                        term = diversity_loss(it.stack.masks, cfg.delta)
                        acc = term if acc is None else acc + term
                    return acc * (1.0 / len(inters))

                def ma_term():
                    acc = None
                    for it, heads in zip(inters, heads_by_block):
                        term = multi_attention_loss(it.stack, it.feature, labels, heads, lcfg)
                        acc = term if acc is None else acc + term
                    return acc * (1.0 / len(inters))

                if alpha_on:
                    l_div = div_term()
                else:
                    with T.no_grad():
                        l_div = div_term()
                if heads_by_block:
                    if lam_on:
                        l_ma = ma_term()
                    else:
                        with T.no_grad():
                            l_ma = ma_term()
            l_all = total_loss(l_cla, l_div, l_ma, lcfg)
            if not np.isfinite(l_all.item()):
                raise NumericError(
                    f"non-finite loss {l_all.item()} at epoch {epoch} step {start // cfg.batch_size}"
                )
            l_all.backward()
            opt.step(lr)
            opt.zero_grad()

            bs = len(idxs)
            seen += bs
            for key, val in (("l_cla", l_cla), ("l_div", l_div), ("l_ma", l_ma), ("l_all", l_all)):
                sums[key] += val.item() * bs
            train_logit_chunks.append(logits.data.astype(np.float64))
            train_label_chunks.append(labels)

        train_metric = _split_metric(
            np.concatenate(train_logit_chunks), np.concatenate(train_label_chunks), cfg.task
        )
        val_metric = evaluate_model(state, val_samples, cfg)["metric"]
        row = {
            "epoch": epoch,
            "lr": lr,
            **{k: v / seen for k, v in sums.items()},
            "train_metric": train_metric,
            "val_metric": val_metric,
        }
        rows.append(row)
        if log:
            log(
                f"epoch {epoch:3d} lr {lr:.4f} l_all {row['l_all']:.4f} "
                f"train {train_metric:.4f} val {val_metric:.4f}"
            )
        if val_metric > best_val:
            best_val, best_epoch = val_metric, epoch
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, digest, state.state_arrays())

    if log_path is not None:
        log_path.write_text(format_log(rows, digest))
    return TrainResult(rows, best_epoch, best_val, digest, log_path, ckpt_path)
