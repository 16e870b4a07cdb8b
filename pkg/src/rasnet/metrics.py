"""Hard Dice / IOU evaluation pooled over a dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch

from .errors import ShapeError, UndefinedMetricError, ValidationError

CLASS_NAMES = (
    "background",
    "Bipolar Forceps",
    "Prograsp Forceps",
    "Needle Driver",
    "Vessel Sealer",
    "Grasping Retractor",
    "Curved Scissors",
    "Other",
)


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _as_array(mask):
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask)


def confusion_counts(pred, truth, class_id) -> ConfusionCounts:
    pred, truth = _as_array(pred), _as_array(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    p, t = pred == class_id, truth == class_id
    return ConfusionCounts(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)))


def confusion_table(pred, truth, num_classes):
    """Counts for every class at once, as an int64 array of shape [num_classes, 3]."""
    pred, truth = _as_array(pred).ravel(), _as_array(truth).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction and truth sizes differ: {pred.size} vs {truth.size}")
    if pred.size and max(pred.max(), truth.max()) >= num_classes:
        raise ValidationError(f"class id >= {num_classes} in masks")
    cm = np.bincount(truth.astype(np.int64) * num_classes + pred.astype(np.int64),
                     minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(cm)
    return np.stack([tp, cm.sum(0) - tp, cm.sum(1) - tp], axis=1)


def iou(counts: ConfusionCounts) -> float:
    tp, fp, fn = counts
    if tp + fp + fn == 0:
        raise UndefinedMetricError("class absent from prediction and truth")
    return tp / (tp + fp + fn)


def dice(counts: ConfusionCounts) -> float:
    tp, fp, fn = counts
    if tp + fp + fn == 0:
        raise UndefinedMetricError("class absent from prediction and truth")
    return 2 * tp / (2 * tp + fp + fn)


@dataclass
class MetricsReport:
    """Per-instrument dice/iou (fractions in [0,1]) plus their unweighted means.

    Classes that never occur in either prediction or truth have ``None``
    scores and are left out of the means.
    """

    per_class: dict
    mean_dice: Optional[float]
    mean_iou: Optional[float]
    counts: dict = field(default_factory=dict)
    per_frame: Optional[list] = None

    @classmethod
    def from_counts(cls, table, class_names=CLASS_NAMES, per_frame=None):
        per_class, counts = {}, {}
        for cid in range(1, len(class_names)):
            c = ConfusionCounts(*(int(v) for v in table[cid]))
            counts[class_names[cid]] = c
            try:
                per_class[class_names[cid]] = (dice(c), iou(c))
            except UndefinedMetricError:
                per_class[class_names[cid]] = (None, None)
        defined = [v for v in per_class.values() if v[0] is not None]
        mean_dice = sum(d for d, _ in defined) / len(defined) if defined else None
        mean_iou = sum(i for _, i in defined) / len(defined) if defined else None
        return cls(per_class, mean_dice, mean_iou, counts, per_frame)

    def to_dict(self):
        d = {
            "per_class": [
                {"class": name, "dice": d, "iou": i, **self.counts.get(name, ConfusionCounts(0, 0, 0))._asdict()}
                for name, (d, i) in self.per_class.items()
            ],
            "mean_dice": self.mean_dice,
            "mean_iou": self.mean_iou,
        }
        if self.per_frame is not None:
            d["per_frame"] = self.per_frame
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def to_table(self):
        rows = [(name, d, i) for name, (d, i) in self.per_class.items()]
        rows.append(("Mean", self.mean_dice, self.mean_iou))
        return format_table(("Instrument", "Mean Dice(%)", "Mean IOU(%)"), rows)


def _pct(v):
    return "-" if v is None else f"{100 * v:.2f}"


def format_table(header, rows):
    """Aligned text table; numeric cells are fractions rendered as percentages."""
    cells = [list(header)] + [[r[0]] + [_pct(v) for v in r[1:]] for r in rows]
    widths = [max(len(row[k]) for row in cells) for k in range(len(header))]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    out = [rule]
    for n, row in enumerate(cells):
        out.append("  ".join(c.ljust(widths[0]) if k == 0 else c.rjust(widths[k]) for k, c in enumerate(row)))
        if n == 0:
            out.append(rule)
    out.append(rule)
    return "\n".join(out)


def parse_table(text):
    """Inverse of :func:`format_table` for the data rows: name -> tuple of floats/None."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not set(ln.strip()) <= {"-"}]
    out = {}
    for ln in lines[1:]:
        parts = ln.rsplit(None, 2)
        out[parts[0].strip()] = tuple(None if p == "-" else float(p) for p in parts[1:])
    return out


@torch.no_grad()
def predict_labels(model, images):
    return model(images).argmax(dim=1)


def evaluate_dataset(model, batches, class_names=CLASS_NAMES, per_frame=False) -> MetricsReport:
    """Pool TP/FP/FN per class over every frame, then score each class once.

    ``batches`` yields ``(images, masks)`` tensor pairs; ``model`` maps images
    to logits. If ``model`` is an ``nn.Module`` it is put in eval mode for the
    duration and restored afterwards.
    """
    num_classes = len(class_names)
    total = np.zeros((num_classes, 3), dtype=np.int64)
    frames = [] if per_frame else None
    n = 0
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        for item in batches:
            images, masks = item[0], item[1]
            pred = predict_labels(model, images)
            for p, t in zip(pred, masks):
                table = confusion_table(p, t, num_classes)
                total += table
                if frames is not None:
                    frames.append({class_names[c]: list(map(int, table[c])) for c in range(1, num_classes)})
                n += 1
    finally:
        if was_training:
            model.train()
    if n == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    return MetricsReport.from_counts(total, class_names, frames)
