"""Multi-channel spatial attention with learned channel weighting.

A feature block is mapped down to N attention channels; each channel
runs a 7x7 conv + sigmoid to produce a spatial mask.  A squeeze-style
two-layer MLP (no hidden nonlinearity) scores the channels with a
softmax weight vector, the weighted channel combination is squashed to
a single fused map, and the fused map gates the input feature block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv2d, DepthwiseConv2d, Linear, Module
from .tensor import Tensor

ATTENTION_INIT_SCALE = 1e-2


@dataclass(frozen=True)
class SmaConfig:
    n_channels: int
    in_channels: int
    mapping_kernel: int = 1
    attn_kernel: int = 7
    delta: float = 0.5
    combine_on: str = "logits"

    def __post_init__(self):
        if self.n_channels < 1:
            raise ConfigError(f"n_channels must be >= 1, got {self.n_channels}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.attn_kernel % 2 == 0 or self.mapping_kernel % 2 == 0:
            raise ConfigError("attention kernels must be odd to preserve spatial dims")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigError(f"delta must be in [0,1), got {self.delta}")
        if self.combine_on not in ("logits", "masks"):
            raise ConfigError(f"combine_on must be 'logits' or 'masks', got {self.combine_on!r}")


@dataclass
class AttentionStack:
    """Per-channel state: mapped features, pre-sigmoid logits, masks in (0,1)."""

    mapped: Tensor  # [B,N,H,W]
    logits: Tensor  # [B,N,H,W]
    masks: Tensor   # [B,N,H,W]


@dataclass
class SmaIntermediates:
    feature: Tensor          # block input the attention was computed from
    stack: AttentionStack
    weights: Tensor          # [B,N] softmax channel weights
    fused: Tensor            # [B,1,H,W] fused attention map


def combine(stack: AttentionStack, weights: Tensor, cfg: SmaConfig) -> Tensor:
    """Fuse the N channel maps under the channel weights into one map.

    Default fuses pre-sigmoid logits so the final sigmoid spans (0,1);
    combine_on='masks' fuses the sigmoided masks instead (ablation).
    """
    maps = stack.logits if cfg.combine_on == "logits" else stack.masks
    b, n = weights.shape
    if maps.shape[:2] != (b, n):
        raise ShapeError(f"combine: weights {weights.shape} do not match maps {maps.shape}")
    w4 = T.reshape(weights, (b, n, 1, 1))
    return T.sigmoid(T.mul(maps, w4).sum(axis=1, keepdims=True))


def refine(fused: Tensor, feature: Tensor) -> Tensor:
    """Gate every channel of the feature block by the fused map."""
    if fused.shape[0] != feature.shape[0] or fused.shape[2:] != feature.shape[2:]:
        raise ShapeError(f"refine: fused {fused.shape} does not match feature {feature.shape}")
    return T.mul(fused, feature)


def attended_feature(stack: AttentionStack, feature: Tensor, channel: int) -> Tensor:
    """Per-channel attended feature: the input gated by mask `channel`."""
    mask_n = T.narrow(stack.masks, axis=1, start=channel, length=1)
    return T.mul(mask_n, feature)


def param_count(cfg: SmaConfig) -> int:
    """Trainable scalars in one full attention block (closed form)."""
    c, n = cfg.in_channels, cfg.n_channels
    mapping = c * n * cfg.mapping_kernel ** 2 + n
    per_channel = n * (cfg.attn_kernel ** 2 + 1)
    reduce_fc = c * n + n
    mix_fc = n * n + n
    return mapping + per_channel + reduce_fc + mix_fc


class MultiChannelAttention(Module):
    """The full attention block: channel mapping, per-channel masks,
    channel weighting, combination, and feature refinement.

    mapping_mode 'conv' learns the C->N reduction; 'channel_mean' replaces
    it with the channel average replicated N times (the non-diversified
    multi-branch baseline).  use_aaa=False fixes uniform channel weights.
    """

    def __init__(self, cfg: SmaConfig, rng: np.random.Generator,
                 mapping_mode: str = "conv", use_aaa: bool = True,
                 dtype=np.float64):
        super().__init__()
        if mapping_mode not in ("conv", "channel_mean"):
            raise ConfigError(f"unknown mapping_mode {mapping_mode!r}")
        self.cfg = cfg
        self.mapping_mode = mapping_mode
        self.use_aaa = use_aaa
        init = ("uniform", ATTENTION_INIT_SCALE)
        if mapping_mode == "conv":
            self.mapping = Conv2d(
                cfg.in_channels, cfg.n_channels, cfg.mapping_kernel, rng,
                padding=cfg.mapping_kernel // 2, init=init, dtype=dtype,
            )
        self.attn_convs = DepthwiseConv2d(
            cfg.n_channels, cfg.attn_kernel, rng,
            padding=cfg.attn_kernel // 2, init=init, dtype=dtype,
        )
        if use_aaa:
            self.reduce_fc = Linear(cfg.in_channels, cfg.n_channels, rng, init=init, dtype=dtype)
            self.mix_fc = Linear(cfg.n_channels, cfg.n_channels, rng, init=init, dtype=dtype)
        self._ones_n = Tensor(np.ones((1, cfg.n_channels, 1, 1), dtype=dtype))

    def f2a(self, feature: Tensor) -> AttentionStack:
        """Map the feature block to N channels and build the spatial masks."""
        if feature.ndim != 4 or feature.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"f2a: expected [B,{self.cfg.in_channels},H,W], got {feature.shape}"
            )
        if self.mapping_mode == "conv":
            mapped = self.mapping(feature)
        else:
            mapped = T.mul(feature.mean(axis=1, keepdims=True), self._ones_n)
        logits = self.attn_convs(mapped)
        return AttentionStack(mapped=mapped, logits=logits, masks=T.sigmoid(logits))

    def channel_weights(self, feature: Tensor) -> Tensor:
        """Softmax channel scores from spatially pooled features."""
        b = feature.shape[0]
        if not self.use_aaa:
            n = self.cfg.n_channels
            return Tensor(np.full((b, n), 1.0 / n, dtype=feature.dtype))
        pooled = T.reshape(
            T.avg_pool(feature, axes=(2, 3)), (b, self.cfg.in_channels)
        )
        # Two stacked affine maps, deliberately no nonlinearity in between.
        return T.softmax(self.mix_fc(self.reduce_fc(pooled)), axis=1)

    def forward(self, feature: Tensor) -> tuple[Tensor, SmaIntermediates]:
        stack = self.f2a(feature)
        weights = self.channel_weights(feature)
        fused = combine(stack, weights, self.cfg)
        refined = refine(fused, feature)
        return refined, SmaIntermediates(
            feature=feature, stack=stack, weights=weights, fused=fused
        )


class ChannelGate(Module):
    """Plain channel-wise gating (squeeze/excite style): pooled features
    through a bottleneck MLP to per-channel sigmoid gates.  Stands in for
    the channel-attention-only ablation; produces no spatial masks.
    """

    def __init__(self, in_channels: int, bottleneck: int, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        init = ("uniform", ATTENTION_INIT_SCALE)
        self.in_channels = in_channels
        self.reduce_fc = Linear(in_channels, bottleneck, rng, init=init, dtype=dtype)
        self.expand_fc = Linear(bottleneck, in_channels, rng, init=init, dtype=dtype)

    def forward(self, feature: Tensor) -> tuple[Tensor, None]:
        b, c = feature.shape[0], feature.shape[1]
        pooled = T.reshape(T.avg_pool(feature, axes=(2, 3)), (b, c))
        gates = T.sigmoid(self.expand_fc(self.reduce_fc(pooled)))
        return T.mul(T.reshape(gates, (b, c, 1, 1)), feature), None
