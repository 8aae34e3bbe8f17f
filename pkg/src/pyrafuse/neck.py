"""Selective dense fusion neck for feature pyramids.

Every pyramid level is refined by fusing *all* levels, not just its
neighbours: the other levels are resized to the target resolution, summed
into a base fusion, and then re-weighted by two selection branches before a
global-context refinement and a residual merge back into the original level.

  channel selection   per-channel softmax across levels of FC-projected
                      pooled statistics; picks which level feeds each channel
  spatial selection   per-pixel softmax across levels of conv maps computed
                      from channel-pooled avg/max statistics; picks which
                      level feeds each location
  dependency refine   attention-pooled global context pushed through a
                      normalized bottleneck and added to every position

All selection weights are softmax outputs, hence non-negative and summing to
one across the level axis, so each fused value is a convex combination of the
level values. Parameters are per target level (not shared).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .engine import (
    Tensor,
    add,
    bilinear_resize,
    channel_pool,
    concat,
    conv2d,
    global_avg_pool,
    matmul,
    mul,
    narrow,
    reciprocal,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    softmax,
    sqrt,
    sub,
)
from .errors import ConfigError, ShapeError
from .initializers import kaiming_uniform, ones, small_uniform, zeros

_NORM_EPS = 1e-5

#: (row name, use_sca, use_ssa, use_dr) in canonical ablation order.
ABLATION_ROWS = (
    ("none", False, False, False),
    ("sca", True, False, False),
    ("ssa", False, True, False),
    ("sca_ssa", True, True, False),
    ("sca_ssa_dr", True, True, True),
)


@dataclass
class NeckConfig:
    n_levels: int = 3
    channels: int = 64
    use_sca: bool = True
    use_ssa: bool = True
    use_dr: bool = True
    squeeze_ratio: int = 2
    ssa_kernel: int = 7
    dr_ratio: int = 4

    def validate(self) -> "NeckConfig":
        if self.n_levels < 1:
            raise ConfigError(f"n_levels must be >= 1, got {self.n_levels}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.channels % self.squeeze_ratio:
            raise ConfigError(
                f"squeeze_ratio {self.squeeze_ratio} must divide channels {self.channels}")
        if self.channels % self.dr_ratio:
            raise ConfigError(f"dr_ratio {self.dr_ratio} must divide channels {self.channels}")
        if self.ssa_kernel < 1 or self.ssa_kernel % 2 == 0:
            raise ConfigError(f"ssa_kernel must be odd and positive, got {self.ssa_kernel}")
        return self


class FeaturePyramid:
    """Ordered per-level feature maps [B,C,Hi,Wi] with their strides."""

    def __init__(self, levels: Sequence[Tensor], strides: Sequence[int]):
        if len(levels) != len(strides):
            raise ShapeError(f"{len(levels)} levels but {len(strides)} strides")
        if not levels:
            raise ShapeError("pyramid needs at least one level")
        b, c = levels[0].shape[0], levels[0].shape[1]
        for t in levels:
            if t.ndim != 4:
                raise ShapeError(f"pyramid level must be [B,C,H,W], got {t.shape}")
            if t.shape[0] != b or t.shape[1] != c:
                raise ShapeError("pyramid levels disagree on batch/channels: "
                                 f"{[tuple(t.shape) for t in levels]}")
        if list(strides) != sorted(strides) or len(set(strides)) != len(strides):
            raise ShapeError(f"strides must be strictly increasing, got {list(strides)}")
        self.levels = list(levels)
        self.strides = list(strides)

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]


def fuse_base(pyramid: FeaturePyramid, level: int) -> Tensor:
    """Sum of all levels, each resized to the target level's resolution."""
    if not 0 <= level < len(pyramid):
        raise ShapeError(f"level {level} out of range for {len(pyramid)}-level pyramid")
    _, _, h, w = pyramid.levels[level].shape
    total = None
    for x in pyramid.levels:
        r = bilinear_resize(x, h, w)
        total = r if total is None else add(total, r)
    return total


def _check_aligned(inputs: Sequence[Tensor], n_expected: int, who: str) -> tuple[int, ...]:
    if len(inputs) != n_expected:
        raise ConfigError(f"{who} built for {n_expected} levels, got {len(inputs)} inputs")
    shape = inputs[0].shape
    for t in inputs:
        if t.shape != shape:
            raise ShapeError(f"{who} inputs must share a shape, got "
                             f"{[tuple(t.shape) for t in inputs]}")
    return shape


class ScaParams:
    """Channel-selection parameters: shared squeeze FC plus one FC per level.

    The branch heads start near zero so the level softmax opens close to
    uniform; kaiming-scale logits would saturate it into an arbitrary hard
    routing with dead selection gradients."""

    def __init__(self, n_levels: int, channels: int, ratio: int,
                 rng: np.random.Generator, dtype=np.float32):
        mid = channels // ratio
        self.n_levels = n_levels
        self.channels = channels
        self.squeeze_w = kaiming_uniform(rng, (channels, mid), fan_in=channels, dtype=dtype)
        self.squeeze_b = zeros((mid,), dtype=dtype)
        self.branch_w = [small_uniform(rng, (mid, channels), dtype=dtype)
                         for _ in range(n_levels)]
        self.branch_b = [zeros((channels,), dtype=dtype) for _ in range(n_levels)]

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.squeeze.weight", self.squeeze_w
        yield f"{prefix}.squeeze.bias", self.squeeze_b
        for j, (w, b) in enumerate(zip(self.branch_w, self.branch_b)):
            yield f"{prefix}.branch{j}.weight", w
            yield f"{prefix}.branch{j}.bias", b


def sca_forward(inputs: Sequence[Tensor], params: ScaParams) -> tuple[Tensor, Tensor]:
    """Re-weight levels per channel.

    Returns (fused [B,C,H,W], weights [B,n,C]); weights are non-negative and
    sum to one over the level axis, so the fusion is a per-channel convex
    combination of the aligned inputs.
    """
    b, c, _, _ = _check_aligned(inputs, params.n_levels, "channel selection")
    if c != params.channels:
        raise ShapeError(f"channel selection built for {params.channels} channels, got {c}")
    base = inputs[0]
    for x in inputs[1:]:
        base = add(base, x)
    pooled = reshape(global_avg_pool(base), (b, c))
    squeezed = relu(add(matmul(pooled, params.squeeze_w), params.squeeze_b))
    logits = [reshape(add(matmul(squeezed, w), bias), (b, 1, c))
              for w, bias in zip(params.branch_w, params.branch_b)]
    weights = softmax(concat(logits, axis=1), axis=1)
    fused = None
    for i, x in enumerate(inputs):
        wi = reshape(narrow(weights, 1, i, 1), (b, c, 1, 1))
        term = mul(wi, x)
        fused = term if fused is None else add(fused, term)
    return fused, weights


class SsaParams:
    """Spatial-selection parameters: one conv per level over pooled statistics.

    Like the channel branches, the convs start near zero so per-pixel level
    selection opens near uniform instead of a saturated random routing."""

    def __init__(self, n_levels: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.n_levels = n_levels
        self.kernel = kernel
        self.conv_w = [small_uniform(rng, (1, 2, kernel, kernel), dtype=dtype)
                       for _ in range(n_levels)]
        self.conv_b = [zeros((1,), dtype=dtype) for _ in range(n_levels)]

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for j, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            yield f"{prefix}.branch{j}.weight", w
            yield f"{prefix}.branch{j}.bias", b


def ssa_forward(inputs: Sequence[Tensor], params: SsaParams) -> tuple[Tensor, Tensor]:
    """Re-weight levels per spatial location.

    Returns (fused [B,C,H,W], weights [B,n,H,W]); weights sum to one over the
    level axis at every pixel.
    """
    b, _, h, w = _check_aligned(inputs, params.n_levels, "spatial selection")
    base = inputs[0]
    for x in inputs[1:]:
        base = add(base, x)
    stats = concat([channel_pool(base, "avg"), channel_pool(base, "max")], axis=1)
    pad = params.kernel // 2
    maps = [conv2d(stats, cw, cb, stride=1, padding=pad)
            for cw, cb in zip(params.conv_w, params.conv_b)]
    weights = softmax(concat(maps, axis=1), axis=1)
    fused = None
    for i, x in enumerate(inputs):
        wi = narrow(weights, 1, i, 1)  # [B,1,H,W] broadcasts over channels
        term = mul(wi, x)
        fused = term if fused is None else add(fused, term)
    return fused, weights


class DrParams:
    """Global-context refinement parameters.

    transform_up starts at zero so the block is an exact identity at
    initialization; gradients reach the earlier transforms only after the
    first optimizer step moves it off zero.
    """

    def __init__(self, channels: int, ratio: int, rng: np.random.Generator,
                 dtype=np.float32):
        mid = channels // ratio
        self.channels = channels
        # No bias on the key conv: softmax is shift-invariant, so a bias there
        # is untrainable dead weight (its true gradient is identically zero).
        self.context_w = kaiming_uniform(rng, (1, channels, 1, 1), fan_in=channels, dtype=dtype)
        self.down_w = kaiming_uniform(rng, (mid, channels, 1, 1), fan_in=channels, dtype=dtype)
        self.down_b = zeros((mid,), dtype=dtype)
        self.norm_scale = ones((mid,), dtype=dtype)
        self.norm_shift = zeros((mid,), dtype=dtype)
        self.up_w = zeros((channels, mid, 1, 1), dtype=dtype)
        self.up_b = zeros((channels,), dtype=dtype)

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.context_key.weight", self.context_w
        yield f"{prefix}.transform_down.weight", self.down_w
        yield f"{prefix}.transform_down.bias", self.down_b
        yield f"{prefix}.norm.scale", self.norm_scale
        yield f"{prefix}.norm.shift", self.norm_shift
        yield f"{prefix}.transform_up.weight", self.up_w
        yield f"{prefix}.transform_up.bias", self.up_b


def dr_forward(v: Tensor, params: DrParams) -> Tensor:
    """Add attention-pooled global context back into every position.

    context = sum over positions of softmax(1x1 key conv) * features, then
    bottleneck transform (down, per-sample norm, relu, up) and a residual
    broadcast add.
    """
    b, c, h, w = v.shape
    if c != params.channels:
        raise ShapeError(f"refinement built for {params.channels} channels, got {c}")
    key = conv2d(v, params.context_w)
    alpha = softmax(reshape(key, (b, h * w)), axis=1)
    ctx = reduce_sum(mul(reshape(v, (b, c, h * w)), reshape(alpha, (b, 1, h * w))), axis=2)
    down = conv2d(reshape(ctx, (b, c, 1, 1)), params.down_w, params.down_b)
    mid = down.shape[1]
    flat = reshape(down, (b, mid))
    mu = reduce_mean(flat, axis=1, keepdims=True)
    centered = sub(flat, mu)
    var = reduce_mean(mul(centered, centered), axis=1, keepdims=True)
    normed = mul(centered, reciprocal(sqrt(add(var, _NORM_EPS))))
    styled = add(mul(normed, params.norm_scale), params.norm_shift)
    up = conv2d(reshape(relu(styled), (b, mid, 1, 1)), params.up_w, params.up_b)
    return add(v, up)


class LevelParams:
    """Per-level branch parameters; disabled branches hold no tensors."""

    def __init__(self, cfg: NeckConfig, rng: np.random.Generator, dtype=np.float32):
        self.sca = (ScaParams(cfg.n_levels, cfg.channels, cfg.squeeze_ratio, rng, dtype)
                    if cfg.use_sca else None)
        self.ssa = SsaParams(cfg.n_levels, cfg.ssa_kernel, rng, dtype) if cfg.use_ssa else None
        self.dr = (DrParams(cfg.channels, cfg.dr_ratio, rng, dtype)
                   if (cfg.use_sca or cfg.use_ssa) and cfg.use_dr else None)

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.sca is not None:
            yield from self.sca.named_tensors(f"{prefix}.sca")
        if self.ssa is not None:
            yield from self.ssa.named_tensors(f"{prefix}.ssa")
        if self.dr is not None:
            yield from self.dr.named_tensors(f"{prefix}.dr")


class NeckParams:
    def __init__(self, cfg: NeckConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.levels = [LevelParams(cfg, rng, dtype) for _ in range(cfg.n_levels)]

    def named_tensors(self, prefix: str = "neck") -> Iterator[tuple[str, Tensor]]:
        for i, level in enumerate(self.levels):
            yield from level.named_tensors(f"{prefix}.level{i}")


def neck_forward(pyramid: FeaturePyramid, params: NeckParams) -> FeaturePyramid:
    """Refine every pyramid level; identity when both selections are off."""
    cfg = params.cfg
    if len(pyramid) != cfg.n_levels:
        raise ShapeError(f"neck built for {cfg.n_levels} levels, got {len(pyramid)}")
    if pyramid.channels != cfg.channels:
        raise ShapeError(f"neck built for {cfg.channels} channels, got {pyramid.channels}")
    if not cfg.use_sca and not cfg.use_ssa:
        return pyramid
    out = []
    for i, target in enumerate(pyramid.levels):
        _, _, h, w = target.shape
        resized = [bilinear_resize(x, h, w) for x in pyramid.levels]
        level = params.levels[i]
        fused = None
        if cfg.use_sca:
            fused, _ = sca_forward(resized, level.sca)
        if cfg.use_ssa:
            spatial, _ = ssa_forward(resized, level.ssa)
            fused = spatial if fused is None else add(fused, spatial)
        refined = dr_forward(fused, level.dr) if cfg.use_dr else fused
        out.append(add(target, refined))
    return FeaturePyramid(out, pyramid.strides)
