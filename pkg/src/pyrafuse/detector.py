"""Anchor-free center detector over a three-level pyramid (strides 4/8/16).

Objects are assigned to a level by box area (< 32^2 -> stride 4, < 96^2 ->
stride 8, rest -> stride 16) and supervised with a Gaussian center heatmap
plus L1 size/offset regression at the center cell. Decoding picks 3x3 local
maxima of the heatmaps and reconstructs boxes in image coordinates; greedy
class-wise NMS removes duplicates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .engine import (
    Tensor,
    absolute,
    add,
    clip,
    conv2d,
    log,
    mul,
    no_grad,
    reduce_sum,
    relu,
    scale,
    sigmoid,
    sub,
)
from .errors import ConfigError, ShapeError
from .evaluation import box_iou
from .initializers import constant, kaiming_uniform, small_uniform, zeros
from .neck import FeaturePyramid, NeckConfig, NeckParams, neck_forward

STRIDES = (4, 8, 16)
AREA_THRESHOLDS = (32 * 32, 96 * 96)  # level 0 below first, level 1 below second

_HEAT_BIAS = float(np.log(0.1 / 0.9))  # start heatmaps near 0.1


def assign_level(area: float) -> int:
    if area < AREA_THRESHOLDS[0]:
        return 0
    if area < AREA_THRESHOLDS[1]:
        return 1
    return 2


class BackboneParams:
    """Strictly bottom-up conv stack; no cross-scale mixing (that is the
    neck's job). Downsampling convs are 4x4 stride 2 so output extents stay
    integral on even inputs."""

    def __init__(self, channels: int, width: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.channels = channels
        self.width = width
        w = width

        def conv_init(cout, cin, k):
            return (kaiming_uniform(rng, (cout, cin, k, k), fan_in=cin * k * k, dtype=dtype),
                    zeros((cout,), dtype=dtype))

        self.stem_w, self.stem_b = conv_init(w, 3, 4)
        self.stage1_w, self.stage1_b = conv_init(2 * w, w, 4)
        self.lat0_w, self.lat0_b = conv_init(channels, 2 * w, 1)
        self.stage2_w, self.stage2_b = conv_init(3 * w, 2 * w, 4)
        self.lat1_w, self.lat1_b = conv_init(channels, 3 * w, 1)
        self.stage3_w, self.stage3_b = conv_init(4 * w, 3 * w, 4)
        self.lat2_w, self.lat2_b = conv_init(channels, 4 * w, 1)

    def named_tensors(self, prefix: str = "backbone") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.stem.weight", self.stem_w
        yield f"{prefix}.stem.bias", self.stem_b
        yield f"{prefix}.stage1.weight", self.stage1_w
        yield f"{prefix}.stage1.bias", self.stage1_b
        yield f"{prefix}.lateral0.weight", self.lat0_w
        yield f"{prefix}.lateral0.bias", self.lat0_b
        yield f"{prefix}.stage2.weight", self.stage2_w
        yield f"{prefix}.stage2.bias", self.stage2_b
        yield f"{prefix}.lateral1.weight", self.lat1_w
        yield f"{prefix}.lateral1.bias", self.lat1_b
        yield f"{prefix}.stage3.weight", self.stage3_w
        yield f"{prefix}.stage3.bias", self.stage3_b
        yield f"{prefix}.lateral2.weight", self.lat2_w
        yield f"{prefix}.lateral2.bias", self.lat2_b


def backbone_forward(params: BackboneParams, images: Tensor) -> FeaturePyramid:
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"backbone expects [B,3,H,W], got {images.shape}")
    _, _, h, w = images.shape
    if h % 16 or w % 16:
        raise ShapeError(f"input extent must be divisible by 16, got {h}x{w}")
    x = relu(conv2d(images, params.stem_w, params.stem_b, stride=2, padding=1))
    x = relu(conv2d(x, params.stage1_w, params.stage1_b, stride=2, padding=1))
    p0 = conv2d(x, params.lat0_w, params.lat0_b)
    x = relu(conv2d(x, params.stage2_w, params.stage2_b, stride=2, padding=1))
    p1 = conv2d(x, params.lat1_w, params.lat1_b)
    x = relu(conv2d(x, params.stage3_w, params.stage3_b, stride=2, padding=1))
    p2 = conv2d(x, params.lat2_w, params.lat2_b)
    return FeaturePyramid([p0, p1, p2], list(STRIDES))


class HeadParams:
    """Shared across levels: a 3x3 tower then 1x1 heads for heatmap (sigmoid,
    bias set so initial scores sit near 0.1), size, and center offset."""

    def __init__(self, num_classes: int, channels: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.num_classes = num_classes
        self.tower_w = kaiming_uniform(rng, (channels, channels, 3, 3),
                                       fan_in=channels * 9, dtype=dtype)
        self.tower_b = zeros((channels,), dtype=dtype)
        # Final 1x1 layers start near zero so the first predictions sit at the
        # bias prior (0.1 heat) rather than at saturated sigmoid tails.
        self.heat_w = small_uniform(rng, (num_classes, channels, 1, 1), dtype=dtype)
        self.heat_b = constant((num_classes,), _HEAT_BIAS, dtype=dtype)
        self.size_w = small_uniform(rng, (2, channels, 1, 1), dtype=dtype)
        self.size_b = zeros((2,), dtype=dtype)
        self.off_w = small_uniform(rng, (2, channels, 1, 1), dtype=dtype)
        self.off_b = zeros((2,), dtype=dtype)

    def named_tensors(self, prefix: str = "head") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.tower.weight", self.tower_w
        yield f"{prefix}.tower.bias", self.tower_b
        yield f"{prefix}.heat.weight", self.heat_w
        yield f"{prefix}.heat.bias", self.heat_b
        yield f"{prefix}.size.weight", self.size_w
        yield f"{prefix}.size.bias", self.size_b
        yield f"{prefix}.offset.weight", self.off_w
        yield f"{prefix}.offset.bias", self.off_b


@dataclass
class LevelOutput:
    heat: Tensor  # [B,K,h,w] after sigmoid
    size: Tensor  # [B,2,h,w] (w, h) in stride units
    offset: Tensor  # [B,2,h,w] (dx, dy) within the cell


def head_forward(params: HeadParams, pyramid: FeaturePyramid) -> list[LevelOutput]:
    outputs = []
    for level in pyramid.levels:
        t = relu(conv2d(level, params.tower_w, params.tower_b, padding=1))
        outputs.append(LevelOutput(
            heat=sigmoid(conv2d(t, params.heat_w, params.heat_b)),
            size=conv2d(t, params.size_w, params.size_b),
            offset=conv2d(t, params.off_w, params.off_b),
        ))
    return outputs


def render_targets(batch_instances: Sequence[Sequence], image_size: int,
                   num_classes: int, strides: Sequence[int] = STRIDES) -> tuple[list[dict], int]:
    """Rasterize supervision: per level, Gaussian center heatmaps plus size,
    offset, and positive-cell masks. Returns (per-level target dicts, n_pos)."""
    bsz = len(batch_instances)
    targets = []
    for stride in strides:
        g = image_size // stride
        targets.append({
            "heat": np.zeros((bsz, num_classes, g, g), dtype=np.float32),
            "size": np.zeros((bsz, 2, g, g), dtype=np.float32),
            "offset": np.zeros((bsz, 2, g, g), dtype=np.float32),
            "pos": np.zeros((bsz, 1, g, g), dtype=np.float32),
        })
    n_pos = 0
    for b, instances in enumerate(batch_instances):
        for inst in instances:
            x, y, w, h = inst.bbox
            level = assign_level(w * h)
            stride = strides[level]
            g = image_size // stride
            cx, cy = (x + w / 2.0) / stride, (y + h / 2.0) / stride
            ci, cj = min(int(cy), g - 1), min(int(cx), g - 1)
            radius = max(1.0, min(w, h) / (2.0 * stride))
            sigma = (2.0 * radius + 1.0) / 6.0
            reach = int(np.ceil(radius))
            tgt = targets[level]
            for dy in range(-reach, reach + 1):
                yy = ci + dy
                if not 0 <= yy < g:
                    continue
                for dx in range(-reach, reach + 1):
                    xx = cj + dx
                    if not 0 <= xx < g:
                        continue
                    val = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
                    cell = tgt["heat"][b, inst.class_id, yy, xx]
                    tgt["heat"][b, inst.class_id, yy, xx] = max(cell, val)
            tgt["heat"][b, inst.class_id, ci, cj] = 1.0
            tgt["size"][b, :, ci, cj] = (w / stride, h / stride)
            tgt["offset"][b, :, ci, cj] = (cx - cj, cy - ci)
            tgt["pos"][b, 0, ci, cj] = 1.0
            n_pos += 1
    return targets, n_pos


_CLIP_LO = 1e-12
_CLIP_HI = 1.0 - 1e-7


def detection_loss(outputs: Sequence[LevelOutput], targets: Sequence[dict],
                   n_pos: int, size_weight: float = 0.5,
                   offset_weight: float = 1.0,
                   center_weight: float = 1.0) -> Tensor:
    """Penalty-weighted heatmap divergence plus L1 size/offset terms at
    positive cells, all normalized by max(1, n_pos).

    The heatmap term is (pred - target)^2 * KL(target || prediction) per
    cell, weighted center_weight at centers and (1 - target)^4 elsewhere. At
    binary targets this is exactly the usual focal heatmap loss, (1-h)^2 *
    (-log h) at centers and h^2 * (-log(1-h)) on background; at the Gaussian
    shoulders it interpolates so the minimum stays exactly at prediction ==
    target (both factors are non-negative and vanish only there). The squared
    factor mutes the flood of easy background cells, the log factor keeps
    center gradients alive when predictions saturate low. center_weight > 1
    tilts the early center-vs-background gradient balance toward forming
    peaks; without it the heatmap can settle into a uniform no-detection
    equilibrium on unlucky seeds. Predictions are clipped to (0, 1)
    open-interval bounds before the logs; the constant entropy side of the
    divergence is computed outside the tape.
    """
    if len(outputs) != len(targets):
        raise ShapeError(f"{len(outputs)} outputs but {len(targets)} target levels")
    total = None
    for out, tgt in zip(outputs, targets):
        t = tgt["heat"]
        weight = Tensor(np.where(t >= 1.0, center_weight,
                                 (1.0 - t) ** 4).astype(t.dtype))
        with np.errstate(divide="ignore", invalid="ignore"):
            entropy = np.where(t > 0.0, t * np.log(t), 0.0) + \
                np.where(t < 1.0, (1.0 - t) * np.log(1.0 - t), 0.0)
        h = clip(out.heat, _CLIP_LO, _CLIP_HI)
        cross = add(mul(Tensor(-t), log(h)),
                    mul(Tensor(-(1.0 - t)), log(sub(Tensor(np.ones_like(t)), h))))
        divergence = add(cross, Tensor(entropy.astype(t.dtype)))
        gap = sub(h, Tensor(t))
        term = reduce_sum(mul(weight, mul(mul(gap, gap), divergence)))
        pos = Tensor(tgt["pos"])
        size_term = reduce_sum(mul(absolute(sub(out.size, Tensor(tgt["size"]))), pos))
        off_term = reduce_sum(mul(absolute(sub(out.offset, Tensor(tgt["offset"]))), pos))
        level_total = add(term, add(scale(size_term, size_weight),
                                    scale(off_term, offset_weight)))
        total = level_total if total is None else add(total, level_total)
    return scale(total, 1.0 / max(1, n_pos))


@dataclass
class Detection:
    class_id: int
    score: float
    bbox: tuple[float, float, float, float]  # xywh, image pixels


def _window_max3(heat: np.ndarray) -> np.ndarray:
    padded = np.pad(heat, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    gh, gw = heat.shape[2], heat.shape[3]
    peak = heat.copy()
    for dy in range(3):
        for dx in range(3):
            if dy == 1 and dx == 1:
                continue
            np.maximum(peak, padded[:, :, dy:dy + gh, dx:dx + gw], out=peak)
    return peak


def decode_detections(outputs: Sequence[LevelOutput], strides: Sequence[int] = STRIDES,
                      score_thresh: float = 0.05, max_dets: int = 100) -> list[list[Detection]]:
    """Per image: local-maximum heatmap cells above threshold become boxes.

    Plateau ties keep every tied cell. Candidates are ordered by descending
    score with a deterministic total tie-break, then truncated to max_dets.
    """
    with no_grad():
        bsz = outputs[0].heat.shape[0]
        results: list[list] = [[] for _ in range(bsz)]
        for level, (out, stride) in enumerate(zip(outputs, strides)):
            heat = out.heat.data
            size = out.size.data
            offset = out.offset.data
            keep = (heat >= _window_max3(heat)) & (heat > score_thresh)
            for b, k, yy, xx in zip(*np.nonzero(keep)):
                score = float(heat[b, k, yy, xx])
                w = max(float(size[b, 0, yy, xx]) * stride, 1e-3)
                h = max(float(size[b, 1, yy, xx]) * stride, 1e-3)
                cx = (xx + float(offset[b, 0, yy, xx])) * stride
                cy = (yy + float(offset[b, 1, yy, xx])) * stride
                results[b].append((score, int(k), level, int(yy), int(xx),
                                   (cx - w / 2.0, cy - h / 2.0, w, h)))
        decoded = []
        for cands in results:
            cands.sort(key=lambda c: (-c[0], c[1], c[2], c[3], c[4]))
            decoded.append([Detection(class_id=k, score=s, bbox=bb)
                            for s, k, _, _, _, bb in cands[:max_dets]])
    return decoded


def nms(detections: Sequence[Detection], iou_thresh: float = 0.6) -> list[Detection]:
    """Greedy class-wise suppression: walk by descending score, drop any box
    with IoU >= iou_thresh against a kept box of the same class."""
    ordered = sorted(enumerate(detections), key=lambda p: (-p[1].score, p[1].class_id, p[0]))
    kept: list[Detection] = []
    for _, det in ordered:
        dominated = any(k.class_id == det.class_id and
                        box_iou(k.bbox, det.bbox) >= iou_thresh for k in kept)
        if not dominated:
            kept.append(det)
    return kept


@dataclass
class DetectorConfig:
    num_classes: int
    channels: int = 64
    width: int = 16
    neck: NeckConfig = field(default_factory=NeckConfig)

    def validate(self) -> "DetectorConfig":
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.neck.channels != self.channels:
            raise ConfigError(f"neck channels {self.neck.channels} != "
                              f"detector channels {self.channels}")
        if self.neck.n_levels != len(STRIDES):
            raise ConfigError(f"neck must cover {len(STRIDES)} levels, "
                              f"got {self.neck.n_levels}")
        return self


class Detector:
    """Backbone + selective fusion neck + shared detection head.

    Each stage draws from its own spawned child stream, so toggling neck
    branches cannot shift backbone or head initialization: ablation variants
    share those weights exactly, and a fully disabled neck (which holds no
    tensors at all) reproduces the plain baseline bit for bit.
    """

    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        bb_rng, neck_rng, head_rng = rng.spawn(3)
        self.backbone = BackboneParams(cfg.channels, cfg.width, bb_rng, dtype)
        self.neck = NeckParams(cfg.neck, neck_rng, dtype)
        self.head = HeadParams(cfg.num_classes, cfg.channels, head_rng, dtype)

    def forward(self, images: Tensor) -> list[LevelOutput]:
        pyramid = backbone_forward(self.backbone, images)
        refined = neck_forward(pyramid, self.neck)
        return head_forward(self.head, refined)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.backbone.named_tensors()
        yield from self.neck.named_tensors()
        yield from self.head.named_tensors()

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.named_tensors())

    def load_named(self, arrays: dict) -> None:
        names = dict(self.named_tensors())
        missing = set(names) - set(arrays)
        extra = set(arrays) - set(names)
        if missing or extra:
            raise ConfigError(f"checkpoint/model tensor mismatch; missing={sorted(missing)}, "
                              f"unexpected={sorted(extra)}")
        for name, tensor in names.items():
            arr = np.asarray(arrays[name])
            if tuple(arr.shape) != tensor.shape:
                raise ConfigError(f"tensor {name!r} has shape {arr.shape}, "
                                  f"expected {tensor.shape}")
            tensor.data = np.ascontiguousarray(arr.astype(tensor.dtype, copy=False))
