"""Toy training loop: Adam over the set-matching loss on synthetic scenes.

Deterministic end to end: scene generation, initialization, batching order,
and the optimizer all run off explicit seeds, so the same configuration
reproduces the same loss log bit for bit. Divergence (non-finite loss)
aborts with the offending step rather than logging garbage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mogref.data import (
    AnnotationRecord,
    SyntheticSceneSpec,
    ValidationError,
    Vocab,
    generate_scene,
    load_annotations,
    read_ppm,
    tokenize,
)
from mogref.matching import BBox, LossWeights, grounding_loss, iou
from mogref.metrics import DEFAULT_THRESHOLDS, EvalResult, mean_precision
from mogref.model import Prediction, SCSModel
from mogref.rng import RngState
from mogref.tensor import Parameter, backward, zero_grads


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class GroundingDataset:
    """Batched rasters, padded token ids, and normalized target boxes."""

    images: np.ndarray  # (B, S, S, 3)
    token_ids: np.ndarray  # (B, L)
    targets: list[list[BBox]]
    records: list[AnnotationRecord]

    def __len__(self) -> int:
        return self.images.shape[0]


def _pad_ids(token_lists: Sequence[Sequence[int]], pad_id: int) -> np.ndarray:
    width = max((len(t) for t in token_lists), default=0)
    return np.array([list(t) + [pad_id] * (width - len(t)) for t in token_lists],
                    dtype=np.intp)


def _targets_of(record: AnnotationRecord) -> list[BBox]:
    return [BBox.from_pixel(*b, record.image_w, record.image_h)
            for b in record.target_boxes]


def build_synthetic_dataset(num_scenes: int, spec: SyntheticSceneSpec, vocab: Vocab,
                            seed: int) -> GroundingDataset:
    """Generate ``num_scenes`` referring scenes from per-index substreams."""
    root = RngState(seed)
    images, ids, targets, records = [], [], [], []
    for i in range(num_scenes):
        image, record = generate_scene(spec, root.derive(i), image_id=f"scene-{i:05d}")
        images.append(image)
        ids.append(tokenize(record.expression, vocab))
        targets.append(_targets_of(record))
        records.append(record)
    return GroundingDataset(np.stack(images), _pad_ids(ids, vocab.pad_id), targets, records)


def load_dataset_dir(path, vocab: Vocab) -> GroundingDataset:
    """Load ``annotations.json`` plus ``images/<image_id>.ppm`` from a directory."""
    root = Path(path)
    ann = root / "annotations.json" if root.is_dir() else root
    records = load_annotations(ann)
    if not records:
        raise ValidationError(f"{ann}: no records")
    images_dir = ann.parent / "images"
    images, ids, targets = [], [], []
    size = None
    for rec in records:
        if size is None:
            size = (rec.image_w, rec.image_h)
        elif (rec.image_w, rec.image_h) != size:
            raise ValidationError("all images in a dataset must share one resolution")
        img_path = images_dir / f"{rec.image_id}.ppm"
        if not img_path.exists():
            raise FileNotFoundError(f"missing raster {img_path}")
        image = read_ppm(img_path)
        if image.shape[:2] != (rec.image_h, rec.image_w):
            raise ValidationError(
                f"{img_path}: raster is {image.shape[1]}x{image.shape[0]}, "
                f"record says {rec.image_w}x{rec.image_h}"
            )
        images.append(image)
        ids.append(tokenize(rec.expression, vocab))
        targets.append(_targets_of(rec))
    return GroundingDataset(np.stack(images), _pad_ids(ids, vocab.pad_id), targets, records)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class ParamGroup:
    params: list[Parameter]
    lr: float


class Adam:
    """Standard Adam; groups with non-positive lr are skipped entirely."""

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for g in groups for p in g.params}
        self._v = {id(p): np.zeros_like(p.data) for g in groups for p in g.params}

    def all_params(self) -> list[Parameter]:
        return [p for g in self.groups for p in g.params]

    def zero_grad(self) -> None:
        zero_grads(self.all_params())

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for group in self.groups:
            if group.lr <= 0.0:
                continue
            for p in group.params:
                g = p.grad
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.data -= group.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_best_boxes(model: SCSModel, dataset: GroundingDataset,
                       chunk: int = 16) -> list[tuple[BBox, float]]:
    """Highest-confidence box (and its confidence) for every sample."""
    out = []
    for lo in range(0, len(dataset), chunk):
        pred = model.forward(dataset.images[lo:lo + chunk], dataset.token_ids[lo:lo + chunk])
        for b in range(pred.boxes.shape[0]):
            box, conf = pred.best_box(b)
            out.append((BBox(*np.clip(box, 0.0, 1.0)), conf))
    return out


def eval_pairs(predictions: Sequence[BBox], targets: Sequence[Sequence[BBox]]
               ) -> list[tuple[BBox, BBox]]:
    """Pair each prediction with its best-IoU ground-truth box.

    Records may carry several target boxes; the prediction is scored
    against whichever it overlaps most.
    """
    pairs = []
    for pred, tgts in zip(predictions, targets):
        best = max(tgts, key=lambda t: iou(pred, t))
        pairs.append((pred, best))
    return pairs


def evaluate_model(model: SCSModel, dataset: GroundingDataset,
                   thetas: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalResult:
    preds = [box for box, _ in predict_best_boxes(model, dataset)]
    return mean_precision(eval_pairs(preds, dataset.targets), thetas)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 8  # 0 means full batch
    eval_every: int = 20
    target_train_p50: float | None = 1.0  # early stop once reached; None disables
    weights: LossWeights = field(default_factory=LossWeights)
    projector_lr: float | None = None  # lower fine-tune rate for the projector; None = lr
    freeze_projector_steps: int = 0  # skip projector updates for the first N steps


@dataclass
class TrainResult:
    steps_run: int
    log: list[dict]  # {"step", "loss", "train_p50" (may be None)}
    fit_step: int | None
    final_train_p50: float | None


def train_toy(model: SCSModel, dataset: GroundingDataset, cfg: TrainConfig) -> TrainResult:
    if len(dataset) == 0:
        raise ValidationError("training needs a non-empty dataset")
    projector_params = set(id(p) for p in model.projector.parameters())
    proj_group = ParamGroup(model.projector.parameters(),
                            cfg.lr if cfg.projector_lr is None else cfg.projector_lr)
    rest_group = ParamGroup([p for p in model.parameters() if id(p) not in projector_params],
                            cfg.lr)
    opt = Adam([proj_group, rest_group])
    proj_lr = proj_group.lr

    batch = len(dataset) if cfg.batch_size <= 0 else min(cfg.batch_size, len(dataset))
    log: list[dict] = []
    fit_step = None
    final_p50 = None
    cursor = 0
    for step in range(1, cfg.steps + 1):
        idx = [(cursor + i) % len(dataset) for i in range(batch)]
        cursor = (cursor + batch) % len(dataset)
        pred = model.forward(dataset.images[idx], dataset.token_ids[idx])
        loss, _ = grounding_loss(pred.boxes, pred.confidence,
                                 [dataset.targets[i] for i in idx], cfg.weights)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise DivergenceError(f"non-finite loss at step {step}")
        opt.zero_grad()
        backward(loss)
        proj_group.lr = 0.0 if step <= cfg.freeze_projector_steps else proj_lr
        opt.step()

        entry = {"step": step, "loss": loss_value, "train_p50": None}
        if cfg.eval_every > 0 and step % cfg.eval_every == 0:
            p50 = evaluate_model(model, dataset, thetas=(0.5,)).precisions[0.5]
            entry["train_p50"] = p50
            final_p50 = p50
            if cfg.target_train_p50 is not None and p50 >= cfg.target_train_p50:
                log.append(entry)
                fit_step = step
                break
        log.append(entry)
    return TrainResult(len(log), log, fit_step, final_p50)


def train_log_csv(log: Sequence[dict], run_config: dict) -> str:
    """Render the loss log as CSV with the run configuration in the header."""
    import json as _json

    lines = ["# schema_version: 1",
             f"# run_config: {_json.dumps(run_config, sort_keys=True)}",
             "step,loss,train_p50"]
    for row in log:
        p50 = "" if row["train_p50"] is None else repr(row["train_p50"])
        lines.append(f"{row['step']},{row['loss']!r},{p50}")
    return "\n".join(lines) + "\n"
