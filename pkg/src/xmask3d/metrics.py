"""Segmentation metrics and the serializable run report.

Per-class IoU = TP / (TP + FP + FN) in percent; classes whose union is
empty are undefined (None) and excluded from every mean.  The headline
number is the harmonic mean of base and novel mIoU.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np


def compute_confusion(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """Counts matrix indexed [ground truth, prediction]."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.size != gt.size:
        raise ValueError("prediction / ground-truth size mismatch")
    idx = gt * n_classes + pred
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes
    )


def compute_iou(confusion: np.ndarray) -> List[Optional[float]]:
    """Per-class IoU in [0, 100]; None where the union is empty."""
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    out: List[Optional[float]] = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        union = int(cm[c, :].sum() + cm[:, c].sum() - tp)
        out.append(100.0 * tp / union if union > 0 else None)
    return out


def mean_iou(per_class: Sequence[Optional[float]], ids: Sequence[int]) -> float:
    vals = [per_class[i] for i in ids if per_class[i] is not None]
    return float(np.mean(vals)) if vals else 0.0


def compute_hiou(base_miou: float, novel_miou: float) -> float:
    """Harmonic mean of the base and novel mIoU scores; 0 when both are 0."""
    if base_miou + novel_miou <= 0:
        return 0.0
    return 2.0 * base_miou * novel_miou / (base_miou + novel_miou)


@dataclass
class BranchMetrics:
    base_miou: float
    novel_miou: float
    hiou: float
    per_class_iou: List[Optional[float]]


@dataclass
class MetricReport:
    """Evaluation result of one run: fused-output metrics plus the
    intermediate branch metrics, with enough metadata to reproduce it."""

    confusion: np.ndarray
    per_class_iou: List[Optional[float]]
    base_miou: float
    novel_miou: float
    hiou: float
    class_names: List[str]
    base_ids: List[int]
    novel_ids: List[int]
    seed: int
    config_hash: str
    version: str
    branches: Dict[str, BranchMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "confusion": np.asarray(self.confusion, dtype=np.int64).tolist(),
            "per_class_iou": self.per_class_iou,
            "base_miou": self.base_miou,
            "novel_miou": self.novel_miou,
            "hiou": self.hiou,
            "class_names": list(self.class_names),
            "base_ids": list(self.base_ids),
            "novel_ids": list(self.novel_ids),
            "seed": self.seed,
            "config_hash": self.config_hash,
            "version": self.version,
            "branches": {
                k: {
                    "base_miou": b.base_miou,
                    "novel_miou": b.novel_miou,
                    "hiou": b.hiou,
                    "per_class_iou": b.per_class_iou,
                }
                for k, b in self.branches.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            per_class_iou=list(d["per_class_iou"]),
            base_miou=d["base_miou"],
            novel_miou=d["novel_miou"],
            hiou=d["hiou"],
            class_names=list(d["class_names"]),
            base_ids=list(d["base_ids"]),
            novel_ids=list(d["novel_ids"]),
            seed=d["seed"],
            config_hash=d["config_hash"],
            version=d["version"],
            branches={
                k: BranchMetrics(
                    base_miou=b["base_miou"],
                    novel_miou=b["novel_miou"],
                    hiou=b["hiou"],
                    per_class_iou=list(b["per_class_iou"]),
                )
                for k, b in d.get("branches", {}).items()
            },
        )

    @classmethod
    def from_json(cls, s: str) -> "MetricReport":
        return cls.from_dict(json.loads(s))


def report_from_confusion(
    confusion: np.ndarray,
    class_names: Sequence[str],
    base_ids: Sequence[int],
    novel_ids: Sequence[int],
    seed: int,
    config_hash: str,
    version: str,
) -> MetricReport:
    per_class = compute_iou(confusion)
    base = mean_iou(per_class, base_ids)
    novel = mean_iou(per_class, novel_ids)
    return MetricReport(
        confusion=np.asarray(confusion, dtype=np.int64),
        per_class_iou=per_class,
        base_miou=base,
        novel_miou=novel,
        hiou=compute_hiou(base, novel),
        class_names=list(class_names),
        base_ids=list(base_ids),
        novel_ids=list(novel_ids),
        seed=seed,
        config_hash=config_hash,
        version=version,
    )


def branch_metrics(
    confusion: np.ndarray, base_ids: Sequence[int], novel_ids: Sequence[int]
) -> BranchMetrics:
    per_class = compute_iou(confusion)
    base = mean_iou(per_class, base_ids)
    novel = mean_iou(per_class, novel_ids)
    return BranchMetrics(base, novel, compute_hiou(base, novel), per_class)


def format_table(rows: Sequence[dict], title: str = "") -> str:
    """Aligned text table with hIoU / Base / Novel columns per row."""
    header = f"{'run':<28}{'hIoU':>8}{'Base':>8}{'Novel':>8}"
    lines = []
    if title:
        lines.append(title)
    lines.append(header)
    lines.append("-" * len(header))
    for r in rows:
        lines.append(
            f"{r['name']:<28}{r['hiou']:>8.1f}{r['base']:>8.1f}{r['novel']:>8.1f}"
        )
    return "\n".join(lines) + "\n"
