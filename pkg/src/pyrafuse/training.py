"""SGD training loop, checkpoints, and the metrics log.

The update rule folds weight decay into the momentum buffer:
    m <- momentum * m + (g + weight_decay * theta)
    theta <- theta - lr * m
Runs are bit-deterministic for a fixed (config, dataset): one seeded
generator drives parameter init then batch shuffling, sorts are stable, and
checkpoints are written with pinned zip metadata.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .detector import (
    Detector,
    DetectorConfig,
    decode_detections,
    detection_loss,
    nms,
    render_targets,
)
from .engine import Tensor, backward, decode_tensor, encode_tensor, no_grad, reset_tape
from .errors import ConfigError, InvalidValueError, NumericError
from .evaluation import EvalResult, evaluate
from .neck import NeckConfig
from .scenes import SceneRecord, load_dataset

#: reference setting from the full-scale protocol; desk-scale default is lower
REFERENCE_LR = 0.02


@dataclass
class OptimizerConfig:
    algo: str = "sgd"
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8


@dataclass
class ScheduleConfig:
    epochs: int = 8
    lr_decay_steps: list[int] = field(default_factory=list)  # 1-based epochs
    lr_decay_factor: float = 0.1


@dataclass
class ModelConfig:
    channels: int = 64
    width: int = 16
    squeeze_ratio: int = 2
    ssa_kernel: int = 7
    dr_ratio: int = 4


@dataclass
class NeckToggles:
    use_sca: bool = True
    use_ssa: bool = True
    use_dr: bool = True


@dataclass
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    neck: NeckToggles = field(default_factory=NeckToggles)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    data: str = ""
    image_size: int = 128
    eval_every: int = 0  # 0: no split evals during training
    score_thresh: float = 0.05
    nms_iou: float = 0.6

    def validate(self) -> "TrainConfig":
        if self.optimizer.algo != "sgd":
            raise ConfigError(f"unsupported optimizer {self.optimizer.algo!r}")
        if self.optimizer.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.optimizer.lr}")
        if not 0 <= self.optimizer.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.optimizer.momentum}")
        if self.optimizer.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.optimizer.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.image_size % 16:
            raise ConfigError(f"image_size must be divisible by 16, got {self.image_size}")
        return self

    def to_dict(self) -> dict:
        return {
            "optimizer": vars(self.optimizer).copy(),
            "schedule": {"epochs": self.schedule.epochs,
                         "lr_decay_steps": list(self.schedule.lr_decay_steps),
                         "lr_decay_factor": self.schedule.lr_decay_factor},
            "neck": vars(self.neck).copy(),
            "model": vars(self.model).copy(),
            "seed": self.seed,
            "data": self.data,
            "image_size": self.image_size,
            "eval_every": self.eval_every,
            "score_thresh": self.score_thresh,
            "nms_iou": self.nms_iou,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        cfg = cls()
        known = set(cfg.to_dict())
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")

        def fill(obj, section):
            for key, val in raw.get(section, {}).items():
                if not hasattr(obj, key):
                    raise ConfigError(f"unknown {section} key {key!r}")
                setattr(obj, key, type(getattr(obj, key))(val)
                        if not isinstance(val, list) else list(val))

        fill(cfg.optimizer, "optimizer")
        fill(cfg.schedule, "schedule")
        fill(cfg.neck, "neck")
        fill(cfg.model, "model")
        for key in ("seed", "data", "image_size", "eval_every", "score_thresh", "nms_iou"):
            if key in raw:
                setattr(cfg, key, type(getattr(cfg, key))(raw[key]))
        return cfg.validate()

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def detector_config(self, num_classes: int) -> DetectorConfig:
        neck = NeckConfig(n_levels=3, channels=self.model.channels,
                          use_sca=self.neck.use_sca, use_ssa=self.neck.use_ssa,
                          use_dr=self.neck.use_dr,
                          squeeze_ratio=self.model.squeeze_ratio,
                          ssa_kernel=self.model.ssa_kernel,
                          dr_ratio=self.model.dr_ratio)
        return DetectorConfig(num_classes=num_classes, channels=self.model.channels,
                              width=self.model.width, neck=neck).validate()


class SGD:
    """Momentum SGD with weight decay folded into the momentum buffer."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(t.data) for name, t in params}

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self) -> None:
        for name, t in self.params:
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            v = self.velocity[name]
            v[:] = self.momentum * v + (grad + self.weight_decay * t.data)
            t.data -= self.lr * v


_ZIP_STAMP = (1980, 1, 1, 0, 0, 0)  # pinned so checkpoint bytes are stable


def save_checkpoint(path, model: Detector, config: TrainConfig, epoch: int,
                    rng: np.random.Generator, categories: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": 1,
        "epoch": int(epoch),
        "config": config.to_dict(),
        "num_classes": model.cfg.num_classes,
        "categories": categories,
        "rng_state": rng.bit_generator.state,
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, tensor in model.named_tensors():
            info = zipfile.ZipInfo(f"tensors/{name}.sdat", date_time=_ZIP_STAMP)
            zf.writestr(info, encode_tensor(tensor.data))
        info = zipfile.ZipInfo("meta.json", date_time=_ZIP_STAMP)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))


def load_checkpoint(path) -> tuple[Detector, dict, np.random.Generator]:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        names = zf.namelist()
        if "meta.json" not in names:
            raise ConfigError(f"{path}: checkpoint has no meta.json")
        meta = json.loads(zf.read("meta.json"))
        arrays = {}
        for entry in names:
            if entry.startswith("tensors/") and entry.endswith(".sdat"):
                tensor_name = entry[len("tensors/"):-len(".sdat")]
                arrays[tensor_name] = decode_tensor(zf.read(entry), source=entry)
    config = TrainConfig.from_dict(meta["config"])
    model = Detector(config.detector_config(meta["num_classes"]),
                     np.random.default_rng(0))
    model.load_named(arrays)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    return model, meta, rng


class MetricsLog:
    """Per-epoch CSV: epoch,train_loss,easy_ap,hard_ap,hidden_ap."""

    HEADER = ("epoch", "train_loss", "easy_ap", "hard_ap", "hidden_ap")

    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, epoch: int, train_loss: float, easy_ap=None, hard_ap=None,
            hidden_ap=None) -> None:
        self.rows.append((epoch, train_loss, easy_ap, hard_ap, hidden_ap))

    def write(self, path) -> None:
        lines = [",".join(self.HEADER)]
        for row in self.rows:
            cells = [str(row[0])] + ["" if v is None else repr(float(v)) for v in row[1:]]
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n")


def _stack_images(records: list[SceneRecord], idx) -> np.ndarray:
    return np.stack([records[i].image for i in idx]).astype(np.float32)


def run_inference(model: Detector, records: list[SceneRecord], image_ids: list[int],
                  batch_size: int = 8, score_thresh: float = 0.05,
                  nms_iou: float = 0.6) -> list[dict]:
    """Detections in manifest form; masks are reported as box-shaped polygons."""
    detections: list[dict] = []
    with no_grad():
        for start in range(0, len(records), batch_size):
            idx = list(range(start, min(start + batch_size, len(records))))
            outputs = model.forward(Tensor(_stack_images(records, idx)))
            decoded = decode_detections(outputs, score_thresh=score_thresh)
            for local, per_image in enumerate(decoded):
                image_id = image_ids[idx[local]]
                for det in nms(per_image, iou_thresh=nms_iou):
                    x, y, w, h = det.bbox
                    detections.append({
                        "image_id": image_id,
                        "category_id": det.class_id + 1,
                        "bbox": [float(x), float(y), float(w), float(h)],
                        "score": float(det.score),
                        "segmentation": [[float(x), float(y), float(x + w), float(y),
                                          float(x + w), float(y + h), float(x),
                                          float(y + h)]],
                    })
    return detections


def evaluate_checkpoint_records(model: Detector, records: list[SceneRecord],
                                manifest: dict, config: TrainConfig,
                                tasks: tuple[str, ...] = ("box", "mask")) -> dict[str, EvalResult]:
    image_ids = [img["id"] for img in manifest["images"]]
    dets = run_inference(model, records, image_ids,
                         batch_size=config.optimizer.batch_size,
                         score_thresh=config.score_thresh, nms_iou=config.nms_iou)
    results = {}
    for task in tasks:
        results[task] = evaluate(manifest["annotations"], dets, manifest["images"],
                                 manifest["categories"], task=task)
    return results


@dataclass
class TrainOutcome:
    checkpoint: Path
    metrics_csv: Path
    final_loss: float
    log: MetricsLog


def train(config: TrainConfig, data_dir, out_dir, progress=None) -> TrainOutcome:
    """Train on `<data_dir>/train`, writing per-epoch checkpoints and
    metrics.csv under `out_dir`. Raises NumericError on a non-finite loss."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, manifest = load_dataset(Path(data_dir) / "train")
    if not records:
        raise ConfigError(f"no training records under {data_dir}")
    categories = manifest["categories"]
    num_classes = len(categories)
    rng = np.random.default_rng(config.seed)
    model = Detector(config.detector_config(num_classes), rng)
    opt = SGD(model.parameters(), lr=config.optimizer.lr,
              momentum=config.optimizer.momentum,
              weight_decay=config.optimizer.weight_decay)

    eval_splits: dict[str, tuple] = {}
    if config.eval_every > 0:
        for split in ("easy", "hard", "hidden"):
            split_dir = Path(data_dir) / split
            if (split_dir / "annotations.json").is_file():
                eval_splits[split] = load_dataset(split_dir)

    log = MetricsLog()
    image_ids = list(range(len(records)))
    loss_value = float("nan")
    for epoch in range(1, config.schedule.epochs + 1):
        if epoch in config.schedule.lr_decay_steps:
            opt.lr *= config.schedule.lr_decay_factor
        perm = rng.permutation(len(records))
        epoch_losses = []
        for start in range(0, len(records), config.optimizer.batch_size):
            batch = [int(i) for i in perm[start:start + config.optimizer.batch_size]]
            reset_tape()
            try:
                outputs = model.forward(Tensor(_stack_images(records, batch)))
                targets, n_pos = render_targets([records[i].instances for i in batch],
                                                config.image_size, num_classes)
                loss = detection_loss(outputs, targets, n_pos)
                loss_value = float(loss.data.reshape(()))
                finite = np.isfinite(loss_value)
            except InvalidValueError as exc:
                # divergence usually trips a softmax guard before the loss
                # itself overflows; keep the epoch/step context either way
                finite, exc_note = False, f": {exc}"
            else:
                exc_note = ""
            if not finite:
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {start // config.optimizer.batch_size}"
                    f" (records {[image_ids[i] for i in batch]}){exc_note}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            epoch_losses.append(loss_value)
        reset_tape()
        mean_loss = float(np.mean(epoch_losses))
        split_ap = {}
        if config.eval_every > 0 and (epoch % config.eval_every == 0
                                      or epoch == config.schedule.epochs):
            for split, (srecs, smani) in eval_splits.items():
                res = evaluate_checkpoint_records(model, srecs, smani, config,
                                                  tasks=("box",))
                split_ap[split] = res["box"].summary.ap
        log.add(epoch, mean_loss, split_ap.get("easy"), split_ap.get("hard"),
                split_ap.get("hidden"))
        log.write(out / "metrics.csv")
        save_checkpoint(out / f"ckpt_epoch{epoch:03d}.zip", model, config, epoch,
                        rng, categories)
        if progress is not None:
            progress(epoch, mean_loss, split_ap)
    final = out / "checkpoint.zip"
    save_checkpoint(final, model, config, config.schedule.epochs, rng, categories)
    return TrainOutcome(checkpoint=final, metrics_csv=out / "metrics.csv",
                        final_loss=loss_value, log=log)


def ablation_config(base: TrainConfig, use_sca: bool, use_ssa: bool,
                    use_dr: bool) -> TrainConfig:
    return replace(base, neck=NeckToggles(use_sca=use_sca, use_ssa=use_ssa,
                                          use_dr=use_dr))
