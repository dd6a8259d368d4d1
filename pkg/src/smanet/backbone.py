"""ResNet-18-style backbone with attention blocks inserted inside the
basic blocks, plus the SGD optimizer and the two learning-rate schedules.

Attention sits on the residual branch, after the second batch norm and
before the summation with the identity path.  A width-scaled compact
profile (stage widths divided by 8, 3x3 stride-1 stem) keeps desk-scale
runs fast; the full-width profile uses the standard 7x7 stride-2 stem
with max-pooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import ChannelGate, MultiChannelAttention, SmaConfig, SmaIntermediates, param_count
from .errors import ConfigError, ShapeError
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList
from .tensor import Tensor

PLACEMENTS = ("all_blocks", "first_two_blocks", "none")
ATTENTION_KINDS = ("sma", "channel_gate", "none")


@dataclass(frozen=True)
class BackboneConfig:
    num_outputs: int
    stage_widths: tuple = (64, 128, 256, 512)
    blocks_per_stage: int = 2
    sma_placement: str = "all_blocks"
    n_channels: int = 7
    stem: str = "compact"  # compact: 3x3 stride 1; imagenet: 7x7 stride 2 + maxpool
    in_channels: int = 3
    attention_kind: str = "sma"
    mapping_mode: str = "conv"
    use_aaa: bool = True
    mapping_kernel: int = 1
    attn_kernel: int = 7
    delta: float = 0.5
    combine_on: str = "logits"

    def __post_init__(self):
        if len(self.stage_widths) != 4 or any(w <= 0 for w in self.stage_widths):
            raise ConfigError(f"stage_widths must be 4 positive ints, got {self.stage_widths}")
        if any(a > b for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ConfigError("stage_widths must be nondecreasing")
        if self.sma_placement not in PLACEMENTS:
            raise ConfigError(f"sma_placement must be one of {PLACEMENTS}")
        if self.stem not in ("compact", "imagenet"):
            raise ConfigError(f"unknown stem {self.stem!r}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}")

    def block_positions(self):
        """(stage, block, cin, cout, stride) for every basic block in order."""
        out = []
        cin = self.stage_widths[0]
        for s, width in enumerate(self.stage_widths):
            for b in range(self.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                out.append((s, b, cin, width, stride))
                cin = width
        return out

    def attention_at(self, stage: int, block: int) -> bool:
        if self.sma_placement == "none" or self.attention_kind == "none":
            return False
        if self.sma_placement == "all_blocks":
            return True
        return stage == 0 and block < 2


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, cfg: BackboneConfig, with_attention: bool,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, stride=1, padding=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        if stride != 1 or cin != cout:
            self.down_conv = Conv2d(cin, cout, 1, rng, stride=stride, bias=False, dtype=dtype)
            self.down_bn = BatchNorm2d(cout, dtype=dtype)
        else:
            self.down_conv = None
        self.attention = None
        if with_attention:
            if cfg.attention_kind == "sma":
                sma_cfg = SmaConfig(
                    n_channels=cfg.n_channels, in_channels=cout,
                    mapping_kernel=cfg.mapping_kernel, attn_kernel=cfg.attn_kernel,
                    delta=cfg.delta, combine_on=cfg.combine_on,
                )
                self.attention = MultiChannelAttention(
                    sma_cfg, rng, mapping_mode=cfg.mapping_mode,
                    use_aaa=cfg.use_aaa, dtype=dtype,
                )
            else:
                self.attention = ChannelGate(cout, cfg.n_channels, rng, dtype=dtype)

    def forward(self, x: Tensor):
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        inter = None
        if self.attention is not None:
            h, inter = self.attention(h)
        identity = self.down_bn(self.down_conv(x)) if self.down_conv is not None else x
        return T.relu(h + identity), inter


class Backbone(Module):
    """Stem, four two-block stages, global average pool, affine head."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        w0 = cfg.stage_widths[0]
        if cfg.stem == "compact":
            self.stem_conv = Conv2d(cfg.in_channels, w0, 3, rng, stride=1, padding=1, bias=False, dtype=dtype)
        else:
            self.stem_conv = Conv2d(cfg.in_channels, w0, 7, rng, stride=2, padding=3, bias=False, dtype=dtype)
        self.stem_bn = BatchNorm2d(w0, dtype=dtype)
        self.blocks = ModuleList()
        for stage, block, cin, cout, stride in cfg.block_positions():
            self.blocks.append(
                BasicBlock(cin, cout, stride, cfg, cfg.attention_at(stage, block), rng, dtype=dtype)
            )
        self.head = Linear(cfg.stage_widths[-1], cfg.num_outputs, rng,
                           init=("uniform", 1e-2), zero_bias=True, dtype=dtype)

    def forward(self, x: Tensor):
        """Return (logits, attention intermediates of every carrying block)."""
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected [B,{self.cfg.in_channels},H,W] input, got {x.shape}")
        h = T.relu(self.stem_bn(self.stem_conv(x)))
        if self.cfg.stem == "imagenet":
            h = T.max_pool2d(h, 3, 2, 1)
        inters: list[SmaIntermediates] = []
        for block in self.blocks:
            h, inter = block(h)
            if inter is not None:
                inters.append(inter)
        pooled = T.reshape(T.avg_pool(h, axes=(2, 3)), (h.shape[0], h.shape[1]))
        return self.head(pooled), inters


def attention_param_count(cfg: BackboneConfig, width: int) -> int:
    """Closed-form trainable-parameter count of one attention insert."""
    n = cfg.n_channels
    if cfg.attention_kind == "channel_gate":
        return width * n + n + n * width + width
    full = param_count(SmaConfig(
        n_channels=n, in_channels=width, mapping_kernel=cfg.mapping_kernel,
        attn_kernel=cfg.attn_kernel, delta=cfg.delta, combine_on=cfg.combine_on,
    ))
    if cfg.mapping_mode == "channel_mean":
        full -= width * n * cfg.mapping_kernel ** 2 + n
    if not cfg.use_aaa:
        full -= (width * n + n) + (n * n + n)
    return full


def backbone_param_count(cfg: BackboneConfig) -> int:
    """Closed-form trainable-parameter count of the whole network."""
    w0 = cfg.stage_widths[0]
    stem_k = 3 if cfg.stem == "compact" else 7
    total = cfg.in_channels * w0 * stem_k ** 2 + 2 * w0
    for stage, block, cin, cout, stride in cfg.block_positions():
        total += cin * cout * 9 + 2 * cout          # conv1 + bn1
        total += cout * cout * 9 + 2 * cout         # conv2 + bn2
        if stride != 1 or cin != cout:
            total += cin * cout + 2 * cout          # 1x1 downsample + bn
        if cfg.attention_at(stage, block):
            total += attention_param_count(cfg, cout)
    total += cfg.stage_widths[-1] * cfg.num_outputs + cfg.num_outputs
    return total


class SGD:
    """Momentum SGD with decoupled-from-nothing L2: v <- m*v + g + wd*p; p -= lr*v."""

    def __init__(self, params: list[Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise ConfigError("sgd step with a parameter that has no gradient")
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data = p.data - lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_schedule(epoch: int, mode: str, base: float = 0.01) -> float:
    """AU runs: base for two epochs, then base/10.  Expression runs:
    multiplicative 0.99 decay every 10 epochs over a 100-epoch budget."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    if mode == "au":
        return base if epoch < 2 else base * 0.1
    if mode == "fer":
        return base * 0.99 ** (epoch // 10)
    raise ConfigError(f"unknown schedule mode {mode!r}")
