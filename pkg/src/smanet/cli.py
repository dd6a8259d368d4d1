"""Command-line harness.

Verbs: synth, train, eval, sweep-n, gradcheck, params, export-attention.
Every verb consumes one flat config (file via --config, overridden by
flags); the SMANET_OUTPUT_DIR environment variable overrides output_dir
and nothing else.  Exit codes: 0 ok, 2 config/input error, 3 numeric
failure, 4 threshold violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import backbone_param_count
from .checkpoint import load_checkpoint
from .config import (RunConfig, backbone_config, config_digest, input_size,
                     load_config)
from .data import make_folds, write_dataset
from .errors import ConfigError, DataError, NumericError
from .gradcheck import SUITE_TOLERANCE, run_suite
from .metrics import (accuracy, binarize, confusion_matrix, confusion_report,
                      count_binary, metrics_report)
from .ppm import decode_image, encode_heatmap
from .train import TrainState, build_splits, evaluate_model, run_training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_THRESHOLD = 4

_BOOL_FIELDS = {"augment"}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(RunConfig):
        key = "lambda" if f.name == "lam" else f.name
        flag = "--" + key.replace("_", "-")
        if f.name in _BOOL_FIELDS:
            parser.add_argument(flag, dest=f.name, default=None,
                                choices=("true", "false"), help=f"override {key}")
        elif f.type in ("int", int):
            parser.add_argument(flag, dest=f.name, default=None, type=int)
        elif f.type in ("float", float):
            parser.add_argument(flag, dest=f.name, default=None, type=float)
        else:
            parser.add_argument(flag, dest=f.name, default=None)


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name in _BOOL_FIELDS:
            value = value == "true"
        overrides[f.name] = value
    env_out = os.environ.get("SMANET_OUTPUT_DIR")
    if env_out:
        overrides["output_dir"] = env_out
    return load_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_state(cfg: RunConfig, checkpoint: str) -> TrainState:
    digest, arrays = load_checkpoint(checkpoint)
    want = config_digest(cfg)
    if digest != want:
        raise ConfigError(
            f"checkpoint digest {digest[:12]}... does not match config {want[:12]}..."
        )
    state = TrainState(cfg)
    state.load_state_arrays(arrays)
    return state


def cmd_synth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    digest = config_digest(cfg)
    saved_dir = cfg.data_dir
    if saved_dir:
        raise ConfigError("synth generates data; do not pass data_dir")
    train, val = build_splits(cfg)
    mode = "multi_label" if cfg.task == "au" else "multi_class"
    write_dataset(out / "train", train, mode, digest)
    write_dataset(out / "val", val, mode, digest)
    print(f"wrote {len(train)} train / {len(val)} val samples under {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    result = run_training(cfg, out_dir=out, log=print)
    print(f"best val metric {result.best_val:.6f} at epoch {result.best_epoch}")
    print(f"log: {result.log_path}  checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str, folds: int) -> int:
    out = _out_dir(cfg)
    digest = config_digest(cfg)
    state = _load_state(cfg, checkpoint)
    _, val = build_splits(cfg)
    lines = [f"# config_digest={digest}"]
    if folds:
        fold_sets = make_folds(val, folds, by_subject=True, seed=cfg.seed)
        lines.append("fold,metric")
        metrics = []
        for i, idxs in enumerate(fold_sets):
            res = evaluate_model(state, [val[j] for j in idxs], cfg)
            metrics.append(res["metric"])
            lines.append(f"fold_{i},{res['metric']:.6f}")
        lines.append(f"mean,{float(np.mean(metrics)):.6f}")
        report = "\n".join(lines) + "\n"
    else:
        res = evaluate_model(state, val, cfg)
        if cfg.task == "au":
            counts = count_binary(binarize(res["logits"]), res["labels"].astype(bool))
            report = lines[0] + "\n" + metrics_report(counts)
        else:
            preds = res["logits"].argmax(axis=1)
            acc = accuracy(preds, res["labels"])
            report = lines[0] + "\n" + f"accuracy,{acc:.6f}\n"
            conf = confusion_matrix(preds, res["labels"], cfg.num_classes)
            (out / "confusion.txt").write_text(confusion_report(conf))
        print(f"metric {res['metric']:.6f}")
    (out / "eval_report.csv").write_text(report)
    print(report, end="")
    return EXIT_OK


def cmd_sweep_n(cfg: RunConfig, n_values: list[int]) -> int:
    if not n_values:
        raise ConfigError("sweep-n needs at least one channel count")
    out = _out_dir(cfg)
    rows = ["n_channels,best_val_metric"]
    for n in n_values:
        sub = dataclasses.replace(cfg, n_channels=n,
                                  output_dir=str(Path(cfg.output_dir) / f"n{n}"))
        result = run_training(sub, out_dir=_out_dir(sub))
        rows.append(f"{n},{result.best_val:.6f}")
        print(rows[-1])
    (out / "sweep.csv").write_text("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    results, failures = run_suite(seed=cfg.seed)
    lines = [f"# config_digest={config_digest(cfg)}", "check,max_rel_error,status"]
    for name, err in results:
        status = "ok" if err < SUITE_TOLERANCE else "FAIL"
        lines.append(f"{name},{err:.3e},{status}")
        print(lines[-1])
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    if failures:
        print(f"{len(failures)} checks above {SUITE_TOLERANCE:g}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_params(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    state = TrainState(cfg)
    twin = dataclasses.replace(cfg, ablation="baseline")
    twin_state = TrainState(twin)
    model_total = state.model.param_total()
    twin_total = twin_state.model.param_total()
    closed = backbone_param_count(backbone_config(cfg))
    closed_twin = backbone_param_count(backbone_config(twin))
    head_total = state.heads.param_total()
    overhead = model_total / twin_total - 1.0
    lines = [
        f"# config_digest={config_digest(cfg)}",
        f"model_params,{model_total}",
        f"closed_form_params,{closed}",
        f"plain_twin_params,{twin_total}",
        f"closed_form_twin,{closed_twin}",
        f"attention_overhead,{overhead:.6f}",
        f"bypass_head_params,{head_total}",
    ]
    report = "\n".join(lines) + "\n"
    (out / "params.txt").write_text(report)
    print(report, end="")
    if model_total != closed or twin_total != closed_twin:
        print("closed-form parameter count mismatch", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_export_attention(cfg: RunConfig, checkpoint: str, images: list[str]) -> int:
    out = _out_dir(cfg)
    digest = config_digest(cfg)
    state = _load_state(cfg, checkpoint)
    state.model.eval()
    size = input_size(cfg)
    for path in images:
        img = decode_image(Path(path).read_bytes())
        if img.ndim != 3 or img.shape != (size, size, 3):
            raise DataError(f"{path}: expected {size}x{size} color image, got {img.shape}")
        x = T.Tensor(img.transpose(2, 0, 1)[None].astype(np.float64))
        with T.no_grad():
            _, inters = state.model(x)
        stem = Path(path).stem
        for bi, inter in enumerate(inters):
            fused = inter.fused.data[0, 0]
            (out / f"{stem}_block{bi}_fused.pgm").write_bytes(
                encode_heatmap(fused, comment=f"config_digest={digest}")
            )
            masks = inter.stack.masks.data[0]
            for n in range(masks.shape[0]):
                (out / f"{stem}_block{bi}_mask{n}.pgm").write_bytes(
                    encode_heatmap(masks[n], comment=f"config_digest={digest}")
                )
            weights = inter.weights.data[0]
            row = " ".join(f"{w:.6f}" for w in weights)
            (out / f"{stem}_block{bi}_weights.txt").write_text(
                f"# config_digest={digest}\n{row}\n"
            )
        print(f"{stem}: exported {len(inters)} attention blocks")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smanet",
        description="Multi-channel spatial attention: synthetic data, training, "
                    "evaluation, and verification harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic dataset to disk"),
        ("train", "train a model, writing log + best checkpoint"),
        ("eval", "evaluate a checkpoint"),
        ("sweep-n", "train once per channel count and tabulate"),
        ("gradcheck", "verify every gradient rule by central differences"),
        ("params", "parameter audit against the attention-free twin"),
        ("export-attention", "dump fused maps, channel masks, and weights"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat key=value config file")
        _add_config_flags(p)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--folds", type=int, default=0)
        elif name == "sweep-n":
            p.add_argument("--n-values", required=True,
                           help="comma-separated channel counts, e.g. 1,3,5,7")
        elif name == "export-attention":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("images", nargs="+", help="P6 images sized to the model input")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.folds)
        if args.command == "sweep-n":
            values = [int(v) for v in args.n_values.split(",") if v.strip()]
            return cmd_sweep_n(cfg, values)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "params":
            return cmd_params(cfg)
        if args.command == "export-attention":
            return cmd_export_attention(cfg, args.checkpoint, args.images)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
