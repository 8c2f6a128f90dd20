"""Hard (count-based) Dice / IoU / Precision / Recall with dataset aggregation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import ConfigError, ContractError

METRIC_NAMES = ("dice", "iou", "precision", "recall")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob >= threshold`` (inclusive), else 0."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def image_metrics(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """(dice, iou, precision, recall).

    Prediction and ground truth both empty scores 1 on every metric; any
    other zero denominator scores 0.
    """
    if c.tp + c.fp + c.fn == 0:
        return 1.0, 1.0, 1.0, 1.0
    return (
        _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        _ratio(c.tp, c.tp + c.fp + c.fn),
        _ratio(c.tp, c.tp + c.fp),
        _ratio(c.tp, c.tp + c.fn),
    )


@dataclass
class MetricsReport:
    split: str
    per_image: list[tuple[str, float, float, float, float]]
    mean_dice: float
    mean_iou: float
    mean_precision: float
    mean_recall: float
    average: str = "macro"

    @classmethod
    def from_counts(cls, split: str, ids: list[str], counts: list[ConfusionCounts], average: str = "macro"):
        if not counts:
            raise ConfigError(f"cannot evaluate empty split {split!r}")
        per_image = [(i, *image_metrics(c)) for i, c in zip(ids, counts)]
        if average == "macro":
            means = np.array([row[1:] for row in per_image], dtype=np.float64).mean(axis=0)
        elif average == "micro":
            pooled = counts[0]
            for c in counts[1:]:
                pooled = pooled + c
            means = np.array(image_metrics(pooled))
        else:
            raise ConfigError(f"average must be 'macro' or 'micro', got {average!r}")
        return cls(split, per_image, *(float(m) for m in means), average=average)

    @property
    def means(self) -> dict[str, float]:
        return {m: getattr(self, f"mean_{m}") for m in METRIC_NAMES}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_image"] = [dict(zip(("id",) + METRIC_NAMES, row)) for row in self.per_image]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        rows = [tuple(r[k] for k in ("id",) + METRIC_NAMES) for r in d["per_image"]]
        return cls(d["split"], rows, d["mean_dice"], d["mean_iou"], d["mean_precision"], d["mean_recall"], d.get("average", "macro"))

    def to_table(self) -> str:
        head = f"{'split':<12}{'n':>6}" + "".join(f"{m:>11}" for m in METRIC_NAMES)
        row = f"{self.split:<12}{len(self.per_image):>6}" + "".join(f"{v:>11.4f}" for v in self.means.values())
        return f"{head}\n{row}\n"

    def per_image_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id",) + METRIC_NAMES)
        for row in self.per_image:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
        return buf.getvalue()

    def save(self, out_dir, per_image_csv: bool = False) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"metrics_{self.split}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        (out_dir / f"metrics_{self.split}.txt").write_text(self.to_table())
        if per_image_csv:
            (out_dir / f"metrics_{self.split}_per_image.csv").write_text(self.per_image_csv())
        return path


@torch.no_grad()
def predict_probs(model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i : i + batch_size], dtype=dtype)
        out.append(torch.sigmoid(model(x)).numpy())
    model.train()
    return np.concatenate(out) if out else np.zeros((0, 1) + images.shape[2:])


def evaluate_dataset(model, dataset, threshold: float = 0.5, split: str = "eval", average: str = "macro", batch_size: int = 16) -> MetricsReport:
    """Binarize ``sigmoid(model(x))`` per image and score against the masks."""
    if len(dataset) == 0:
        raise ConfigError(f"cannot evaluate empty split {split!r}")
    probs = predict_probs(model, dataset.images, batch_size)
    return evaluate_predictions(probs, dataset.masks, dataset.ids, threshold, split, average)


def evaluate_predictions(probs, masks, ids, threshold=0.5, split="eval", average="macro") -> MetricsReport:
    counts = [confusion_counts(binarize(p, threshold), m) for p, m in zip(probs, masks)]
    return MetricsReport.from_counts(split, list(ids), counts, average)
