"""Dice score coefficient, dataset-aggregated per class, and the eval loop.

Dice is aggregated over all evaluated slices (intersection and set sizes are
summed first, the ratio is taken once), which is robust to slices with tiny
support.  A class with no ground-truth and no predicted pixels has undefined
Dice, reported as ``None`` and excluded from means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DimensionError

CLASS_NAMES = ("background", "ICH", "SDH", "SAH", "EDH", "CSDH", "Pneumocranium", "IVH")
LESION_NAMES = CLASS_NAMES[1:]
NUM_CLASSES = len(CLASS_NAMES)


def dice_score(pred, truth, class_id):
    """2 |P n G| / (|P| + |G|) for one class; None when both sets are empty."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"dice_score: shape mismatch {pred.shape} vs {truth.shape}")
    p = pred == class_id
    g = truth == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return None
    return 2.0 * int((p & g).sum()) / denom


class DiceAccumulator:
    """Per-class intersection / size counts; partial counts merge associatively."""

    def __init__(self, num_classes=NUM_CLASSES):
        self.num_classes = num_classes
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.pred_count = np.zeros(num_classes, dtype=np.int64)
        self.truth_count = np.zeros(num_classes, dtype=np.int64)

    def update(self, pred, truth):
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise DimensionError(f"DiceAccumulator: shape mismatch {pred.shape} vs {truth.shape}")
        self.pred_count += np.bincount(pred.ravel(), minlength=self.num_classes)[: self.num_classes]
        self.truth_count += np.bincount(truth.ravel(), minlength=self.num_classes)[: self.num_classes]
        both = pred.ravel()[pred.ravel() == truth.ravel()]
        self.intersection += np.bincount(both, minlength=self.num_classes)[: self.num_classes]

    def merge(self, other):
        self.intersection += other.intersection
        self.pred_count += other.pred_count
        self.truth_count += other.truth_count
        return self

    def dice(self, class_id):
        denom = self.pred_count[class_id] + self.truth_count[class_id]
        if denom == 0:
            return None
        return 2.0 * self.intersection[class_id] / denom


@dataclass
class DiceReport:
    per_class: dict
    support: dict
    config_echo: dict = field(default_factory=dict)

    def mean_dice(self):
        """Mean over lesion classes with defined Dice; None if none are defined."""
        vals = [v for v in self.per_class.values() if v is not None]
        return sum(vals) / len(vals) if vals else None

    def to_dict(self):
        return {"per_class": self.per_class, "support": self.support, "config_echo": self.config_echo}

    def to_json(self, indent=None):
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_accumulator(cls, acc: DiceAccumulator, config_echo=None):
        per_class = {name: acc.dice(i) for i, name in enumerate(CLASS_NAMES) if i > 0}
        support = {name: int(acc.truth_count[i]) for i, name in enumerate(CLASS_NAMES) if i > 0}
        return cls(per_class=per_class, support=support, config_echo=config_echo or {})


def evaluate(model, slices, batch_size=8, config_echo=None):
    """Run the model over (stack, mask) pairs and build a per-class DiceReport.

    ``slices`` is a sequence of (3 x H x W float image stack, H x W int mask).
    """
    from .model import predict_mask

    slices = list(slices)
    if not slices:
        raise ConfigError("evaluate: empty split")
    acc = DiceAccumulator()
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        for start in range(0, len(slices), batch_size):
            chunk = slices[start:start + batch_size]
            x = torch.from_numpy(np.stack([s[0] for s in chunk]).astype(np.float32))
            logits = model(x)
            pred = predict_mask(logits)
            for p, (_, mask) in zip(pred, chunk):
                acc.update(p, np.asarray(mask))
    if was_training and hasattr(model, "train"):
        model.train()
    return DiceReport.from_accumulator(acc, config_echo=config_echo)
