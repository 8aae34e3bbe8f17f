"""Synthetic transmission-imaging scenes for detection experiments.

Scenes mimic security-scan imagery: items are convex-ish polygons with
per-channel attenuation factors in (0, 1], composited multiplicatively onto a
bright background (each covered pixel keeps background * product of item
attenuations). Overlap therefore darkens rather than occludes, which is what
makes the "hidden" mode hard: a target covered by clutter keeps only a faint
contour.

Modes:
  easy    exactly one target instance
  hard    two or more target instances
  hidden  every target is covered by clutter on at least a configured
          fraction of its pixels (default 0.5)

Only target items are annotated; clutter is unlabeled distraction.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import read_tensor, write_tensor
from .errors import ConfigError, GenerationError, UsageError

MODES = ("easy", "hard", "hidden")

# Base polygons, max vertex radius normalized to 1 at registry build.
_RAW_TEMPLATES = {
    "blade": [(-1.0, -0.16), (0.62, -0.25), (1.0, 0.0), (0.62, 0.25), (-1.0, 0.16)],
    "wedge": [(-1.0, -0.85), (1.0, -0.1), (-0.25, 1.0)],
    "cross": [(-0.3, -1.0), (0.3, -1.0), (0.3, -0.3), (1.0, -0.3), (1.0, 0.3),
              (0.3, 0.3), (0.3, 1.0), (-0.3, 1.0), (-0.3, 0.3), (-1.0, 0.3),
              (-1.0, -0.3), (-0.3, -0.3)],
    "blob": [(-1.0, -0.5), (-0.45, -0.95), (0.3, -1.0), (0.9, -0.55), (1.0, 0.2),
             (0.5, 0.9), (-0.2, 1.0), (-0.85, 0.45)],
    "slab": [(-1.0, -0.7), (1.0, -0.7), (1.0, 0.7), (-1.0, 0.7)],
}


def _normalized(verts) -> np.ndarray:
    arr = np.asarray(verts, dtype=np.float64)
    return arr / np.linalg.norm(arr, axis=1).max()

TEMPLATES = {name: _normalized(v) for name, v in _RAW_TEMPLATES.items()}


@dataclass
class ItemSpec:
    name: str
    template: str
    attenuation: tuple[float, float, float]
    weight: float = 1.0

    def validate(self, who: str) -> "ItemSpec":
        if self.template not in TEMPLATES:
            raise ConfigError(f"{who} {self.name!r}: unknown template {self.template!r} "
                              f"(have {sorted(TEMPLATES)})")
        if len(self.attenuation) != 3 or not all(0.0 < a <= 1.0 for a in self.attenuation):
            raise ConfigError(f"{who} {self.name!r}: attenuation must be 3 values in (0, 1], "
                              f"got {self.attenuation}")
        if self.weight <= 0:
            raise ConfigError(f"{who} {self.name!r}: weight must be positive")
        return self


@dataclass
class GeneratorConfig:
    image_size: int = 128
    classes: list[ItemSpec] = field(default_factory=lambda: [
        ItemSpec("blade", "blade", (0.40, 0.50, 0.82), 0.5),
        ItemSpec("prong", "wedge", (0.55, 0.70, 0.45), 0.3),
        ItemSpec("star", "cross", (0.80, 0.45, 0.55), 0.2),
    ])
    clutter: list[ItemSpec] = field(default_factory=lambda: [
        ItemSpec("lump", "blob", (0.88, 0.82, 0.66), 0.6),
        ItemSpec("slab", "slab", (0.72, 0.86, 0.78), 0.4),
    ])
    counts: dict = field(default_factory=lambda: {
        "easy": 100, "hard": 100, "hidden": 100, "train": 500})
    hidden_overlap_min: float = 0.5
    target_size: tuple[float, float] = (9.0, 22.0)
    clutter_size: tuple[float, float] = (16.0, 30.0)
    train_mode_weights: dict = field(default_factory=lambda: {
        "easy": 0.4, "hard": 0.3, "hidden": 0.3})

    def validate(self) -> "GeneratorConfig":
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if not self.classes:
            raise ConfigError("need at least one target class")
        for spec in self.classes:
            spec.validate("class")
        for spec in self.clutter:
            spec.validate("clutter")
        if not 0.0 < self.hidden_overlap_min <= 1.0:
            raise ConfigError(f"hidden_overlap_min must be in (0, 1], "
                              f"got {self.hidden_overlap_min}")
        if self.target_size[0] > self.target_size[1] or self.target_size[0] <= 0:
            raise ConfigError(f"bad target_size range {self.target_size}")
        return self

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "classes": [{"name": s.name, "template": s.template,
                         "attenuation": list(s.attenuation), "weight": s.weight}
                        for s in self.classes],
            "clutter": [{"name": s.name, "template": s.template,
                         "attenuation": list(s.attenuation), "weight": s.weight}
                        for s in self.clutter],
            "counts": dict(self.counts),
            "hidden_overlap_min": self.hidden_overlap_min,
            "target_size": list(self.target_size),
            "clutter_size": list(self.clutter_size),
            "train_mode_weights": dict(self.train_mode_weights),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "GeneratorConfig":
        cfg = cls()
        allowed = set(cfg.to_dict())
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        if "image_size" in raw:
            cfg.image_size = int(raw["image_size"])
        for key in ("classes", "clutter"):
            if key in raw:
                specs = [ItemSpec(d["name"], d["template"], tuple(d["attenuation"]),
                                  d.get("weight", 1.0)) for d in raw[key]]
                setattr(cfg, key, specs)
        if "counts" in raw:
            cfg.counts = {k: int(v) for k, v in raw["counts"].items()}
        if "hidden_overlap_min" in raw:
            cfg.hidden_overlap_min = float(raw["hidden_overlap_min"])
        if "target_size" in raw:
            cfg.target_size = tuple(float(v) for v in raw["target_size"])
        if "clutter_size" in raw:
            cfg.clutter_size = tuple(float(v) for v in raw["clutter_size"])
        if "train_mode_weights" in raw:
            cfg.train_mode_weights = {k: float(v) for k, v in raw["train_mode_weights"].items()}
        return cfg.validate()


@dataclass
class SceneItem:
    """A placed polygon with its attenuation; class_id is None for clutter."""
    polygon: np.ndarray  # [N,2] float64, image coordinates
    attenuation: np.ndarray  # [3] float64 in (0,1]
    class_id: int | None = None
    mask: np.ndarray | None = None  # cached raster


@dataclass
class Instance:
    class_id: int  # 0-based target class index
    polygon: np.ndarray
    bbox: tuple[float, float, float, float]  # xywh, pixel units, from the mask
    area: int  # mask pixel count


@dataclass
class SceneRecord:
    image: np.ndarray  # [3,H,W] float32 in [0,1]
    instances: list[Instance]
    mode: str
    seed: int
    clutter_count: int


def polygon_area(polygon: np.ndarray) -> float:
    """Shoelace area (absolute value)."""
    p = np.asarray(polygon, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def rasterize_mask(polygon, height: int, width: int) -> np.ndarray:
    """Even-odd scanline fill; a pixel (r, c) is inside when its center
    (c + 0.5, r + 0.5) sees an odd number of edge crossings to its right."""
    poly = np.asarray(polygon, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
        raise UsageError(f"polygon must be [N>=3, 2], got shape {poly.shape}")
    mask = np.zeros((height, width), dtype=bool)
    if polygon_area(poly) < 1e-12:
        warnings.warn("degenerate polygon rasterizes to an empty mask", stacklevel=2)
        return mask
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    centers_x = np.arange(width, dtype=np.float64) + 0.5
    ymin = max(0, int(np.floor(poly[:, 1].min() - 0.5)))
    ymax = min(height - 1, int(np.ceil(poly[:, 1].max())))
    for row in range(ymin, ymax + 1):
        py = row + 0.5
        crossing = ((y1 <= py) & (py < y2)) | ((y2 <= py) & (py < y1))
        if not crossing.any():
            continue
        t = (py - y1[crossing]) / (y2[crossing] - y1[crossing])
        xint = np.sort(x1[crossing] + t * (x2[crossing] - x1[crossing]))
        right = len(xint) - np.searchsorted(xint, centers_x, side="right")
        mask[row] = (right % 2) == 1
    return mask


def mask_bbox(mask: np.ndarray) -> tuple[float, float, float, float] | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return (float(xs.min()), float(ys.min()),
            float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def _item_sort_key(item: SceneItem) -> tuple:
    cid = -1 if item.class_id is None else item.class_id
    return (cid, item.polygon.tobytes(), item.attenuation.tobytes())


def composite(background, items: list[SceneItem], height: int, width: int) -> np.ndarray:
    """Multiply per-channel attenuation over every covering item.

    Items are applied in a canonical order (multiplication is commutative but
    not associative in floats) so the committed image is order-invariant.
    """
    image = np.empty((3, height, width), dtype=np.float32)
    image[:] = np.asarray(background, dtype=np.float32).reshape(-1, 1, 1)
    for item in sorted(items, key=_item_sort_key):
        mask = item.mask if item.mask is not None else rasterize_mask(item.polygon, height, width)
        att = item.attenuation.astype(np.float32)
        for ch in range(3):
            image[ch, mask] *= att[ch]
    return image


def _place_polygon(template: np.ndarray, center: np.ndarray, scale: float,
                   angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return template * scale @ rot.T + center


def _pick_spec(rng: np.random.Generator, specs: list[ItemSpec]) -> tuple[int, ItemSpec]:
    weights = np.array([s.weight for s in specs], dtype=np.float64)
    idx = int(rng.choice(len(specs), p=weights / weights.sum()))
    return idx, specs[idx]


def _jitter_attenuation(rng: np.random.Generator, base) -> np.ndarray:
    att = np.asarray(base, dtype=np.float64) * rng.uniform(0.92, 1.08, size=3)
    return np.clip(att, 0.02, 1.0)


def _sample_target(rng: np.random.Generator, config: GeneratorConfig,
                   size: int) -> SceneItem:
    class_id, spec = _pick_spec(rng, config.classes)
    scale = rng.uniform(*config.target_size)
    margin = scale + 2.0
    center = rng.uniform(margin, size - margin, size=2)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    poly = _place_polygon(TEMPLATES[spec.template], center, scale, angle)
    item = SceneItem(poly, _jitter_attenuation(rng, spec.attenuation), class_id)
    item.mask = rasterize_mask(poly, size, size)
    return item


def _coverage(target_mask: np.ndarray, clutter_union: np.ndarray) -> float:
    denom = int(target_mask.sum())
    if denom == 0:
        return 0.0
    return float((target_mask & clutter_union).sum()) / denom


def _sample_free_clutter(rng: np.random.Generator, config: GeneratorConfig, size: int,
                         targets: list[SceneItem], union: np.ndarray,
                         cap: float) -> SceneItem | None:
    """Clutter placed anywhere, rejected if it would push any target's
    coverage to `cap` or beyond (keeps easy/hard scenes out of hidden
    territory). Returns None when no acceptable spot is found."""
    for _ in range(50):
        _, spec = _pick_spec(rng, config.clutter)
        scale = rng.uniform(*config.clutter_size)
        center = rng.uniform(0.0, size, size=2)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        poly = _place_polygon(TEMPLATES[spec.template], center, scale, angle)
        mask = rasterize_mask(poly, size, size)
        trial = union | mask
        if all(_coverage(t.mask, trial) < cap for t in targets):
            item = SceneItem(poly, _jitter_attenuation(rng, spec.attenuation))
            item.mask = mask
            return item
    return None


def place_items(mode: str, seed: int,
                config: GeneratorConfig) -> tuple[list[SceneItem], list[SceneItem]]:
    """Sample the placed (target, clutter) items for a scene without
    compositing. Deterministic per (mode, seed, config), so overlap ratios of
    an already-exported record can be recomputed from its stored seed."""
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
    config.validate()
    rng = np.random.default_rng(seed)
    size = config.image_size

    if mode == "easy":
        n_targets = 1
    elif mode == "hard":
        n_targets = 2 + int(rng.integers(0, 2))
    else:
        n_targets = 1 + int(rng.integers(0, 2))
    targets = [_sample_target(rng, config, size) for _ in range(n_targets)]

    clutter: list[SceneItem] = []
    union = np.zeros((size, size), dtype=bool)
    if mode == "hidden":
        attempts = 0
        for target in targets:
            while _coverage(target.mask, union) < config.hidden_overlap_min:
                attempts += 1
                if attempts > 100:
                    raise GenerationError(
                        f"could not satisfy hidden overlap >= {config.hidden_overlap_min} "
                        f"within 100 placement attempts (seed {seed})")
                _, spec = _pick_spec(rng, config.clutter)
                scale = rng.uniform(*config.target_size) * rng.uniform(1.15, 1.8)
                tc = target.polygon.mean(axis=0)
                center = tc + rng.uniform(-0.4, 0.4, size=2) * scale
                angle = rng.uniform(0.0, 2.0 * np.pi)
                poly = _place_polygon(TEMPLATES[spec.template], center, scale, angle)
                mask = rasterize_mask(poly, size, size)
                # camouflage: attenuation near the target's blurs its contour
                att = np.clip(target.attenuation * rng.uniform(0.85, 1.15, size=3), 0.02, 1.0)
                piece = SceneItem(poly, att)
                piece.mask = mask
                clutter.append(piece)
                union |= mask
        n_free = int(rng.integers(0, 3))
    else:
        n_free = 1 + int(rng.integers(0, 3))
    for _ in range(n_free):
        piece = _sample_free_clutter(rng, config, size, targets, union, cap=0.45)
        if piece is not None:
            clutter.append(piece)
            union |= piece.mask
    return targets, clutter


def generate_scene(mode: str, seed: int, config: GeneratorConfig) -> SceneRecord:
    """Deterministically build one scene; same (mode, seed, config) gives a
    bitwise-identical record."""
    targets, clutter = place_items(mode, seed, config)
    size = config.image_size
    image = composite((1.0, 1.0, 1.0), targets + clutter, size, size)
    instances = []
    for target in targets:
        bbox = mask_bbox(target.mask)
        if bbox is None:  # unreachable given placement margins; belt and braces
            raise GenerationError(f"target rasterized to an empty mask (seed {seed})")
        instances.append(Instance(class_id=target.class_id, polygon=target.polygon,
                                  bbox=bbox, area=int(target.mask.sum())))
    return SceneRecord(image=image, instances=instances, mode=mode, seed=seed,
                       clutter_count=len(clutter))


_SPLIT_OFFSETS = {"easy": 0, "hard": 1_000_000, "hidden": 2_000_000, "train": 3_000_000}


def generate_split(split: str, count: int, base_seed: int,
                   config: GeneratorConfig) -> list[SceneRecord]:
    """Generate `count` records for a split. The train split mixes modes with
    the configured weights; records keep their per-scene mode tag."""
    if split not in _SPLIT_OFFSETS:
        raise UsageError(f"split must be one of {sorted(_SPLIT_OFFSETS)}, got {split!r}")
    offset = base_seed + _SPLIT_OFFSETS[split]
    if split == "train":
        mode_rng = np.random.default_rng(offset + 999_983)
        names = list(config.train_mode_weights)
        weights = np.array([config.train_mode_weights[m] for m in names], dtype=np.float64)
        modes = [names[int(i)] for i in
                 mode_rng.choice(len(names), size=count, p=weights / weights.sum())]
    else:
        modes = [split] * count
    return [generate_scene(modes[i], offset + i, config) for i in range(count)]


def export_dataset(records: list[SceneRecord], out_dir: str | os.PathLike,
                   config: GeneratorConfig | None = None) -> dict:
    """Write images/*.sdat plus annotations.json; returns the manifest dict.

    With `config` given, the category table lists every configured class even
    if absent from `records` (keeps class count stable across small splits).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    categories_seen: set[int] = set()
    ann_id = 1
    for idx, rec in enumerate(records):
        image_id = idx + 1
        file_name = f"images/img_{image_id:05d}.sdat"
        write_tensor(out / file_name, rec.image.astype(np.float32))
        _, h, w = rec.image.shape
        images.append({"id": image_id, "file_name": file_name, "width": int(w),
                       "height": int(h), "mode": rec.mode, "seed": int(rec.seed),
                       "clutter_count": int(rec.clutter_count)})
        for inst in rec.instances:
            categories_seen.add(inst.class_id)
            annotations.append({
                "id": ann_id,
                "image_id": image_id,
                "category_id": inst.class_id + 1,
                "bbox": [float(v) for v in inst.bbox],
                "area": int(inst.area),
                "segmentation": [[float(v) for v in inst.polygon.reshape(-1)]],
            })
            ann_id += 1
    if config is not None:
        categories = [{"id": i + 1, "name": spec.name}
                      for i, spec in enumerate(config.classes)]
    else:
        categories = [{"id": cid + 1, "name": f"class{cid}"} for cid in sorted(categories_seen)]
    manifest = {"images": images, "annotations": annotations, "categories": categories}
    with open(out / "annotations.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_dataset(data_dir: str | os.PathLike) -> tuple[list[SceneRecord], dict]:
    """Inverse of export_dataset; reconstructs records from disk."""
    root = Path(data_dir)
    manifest_path = root / "annotations.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no annotations.json under {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    by_image: dict[int, list[dict]] = {}
    for ann in manifest["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)
    records = []
    for info in manifest["images"]:
        image = read_tensor(root / info["file_name"])
        instances = []
        for ann in sorted(by_image.get(info["id"], []), key=lambda a: a["id"]):
            poly = np.asarray(ann["segmentation"][0], dtype=np.float64).reshape(-1, 2)
            instances.append(Instance(class_id=ann["category_id"] - 1, polygon=poly,
                                      bbox=tuple(ann["bbox"]), area=int(ann["area"])))
        records.append(SceneRecord(image=image, instances=instances, mode=info["mode"],
                                   seed=info["seed"], clutter_count=info["clutter_count"]))
    return records, manifest
