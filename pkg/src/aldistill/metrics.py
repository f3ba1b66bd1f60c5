"""Segmentation metrics and active-learning efficiency measures."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np


def confusion_matrix(pred, gt, mask=None, n_classes=None):
    """Rows are ground truth, columns predictions.

    Pixels outside ``mask`` or with a negative (ignore) ground truth are skipped.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    keep = gt >= 0
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.shape != gt.shape:
            raise ValueError(f"shape mismatch: mask {mask.shape} vs gt {gt.shape}")
        keep &= mask
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if n_classes is None:
        n_classes = int(max(g.max(initial=-1), p.max(initial=-1))) + 1
    if g.size and (g.max() >= n_classes or p.max() >= n_classes or p.min() < 0):
        bad = int(max(g.max(), p.max())) if p.min() >= 0 else int(p.min())
        raise ValueError(f"label {bad} outside [0, {n_classes})")
    return np.bincount(g * n_classes + p, minlength=n_classes**2).reshape(n_classes, n_classes)


class IoUResult(NamedTuple):
    iou: np.ndarray
    miou: float
    present: np.ndarray


def iou(cm) -> IoUResult:
    """Per-class IoU. Classes with an empty union are absent (NaN) and left out of the mean."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    present = union > 0
    per_class = np.full(len(tp), np.nan)
    per_class[present] = tp[present] / union[present]
    miou = float(per_class[present].mean()) if present.any() else float("nan")
    return IoUResult(per_class, miou, present)


@dataclass
class LearningCurve:
    method: str
    n_labeled: list[int] = field(default_factory=list)
    pct_labeled: list[float] = field(default_factory=list)
    miou: list[float] = field(default_factory=list)
    ciou: list[np.ndarray] = field(default_factory=list)

    def append(self, n_labeled, pct_labeled, miou, ciou):
        if self.n_labeled and n_labeled <= self.n_labeled[-1]:
            raise ValueError("n_labeled must be strictly increasing along a curve")
        self.n_labeled.append(int(n_labeled))
        self.pct_labeled.append(float(pct_labeled))
        self.miou.append(float(miou))
        self.ciou.append(np.asarray(ciou, dtype=float))

    def __len__(self):
        return len(self.n_labeled)

    @property
    def ciou_matrix(self):
        return np.array(self.ciou)


class NotReachedError(ValueError):
    pass


def samples_to_reach(n_labeled, miou, target):
    """Smallest labeled count whose running-max mIoU reaches ``target`` (linear interpolation)."""
    n = np.asarray(n_labeled, dtype=float)
    env = np.maximum.accumulate(np.asarray(miou, dtype=float))
    hit = np.flatnonzero(env >= target)
    if not len(hit):
        raise NotReachedError(f"target mIoU {target} is above the curve maximum {env.max():.6g}")
    i = int(hit[0])
    if i == 0 or env[i] == target:
        return float(n[i])
    frac = (target - env[i - 1]) / (env[i] - env[i - 1])
    return float(n[i - 1] + frac * (n[i] - n[i - 1]))


def labeling_efficiency(curve_other, curve_baseline, target, convention="as-written"):
    """``n_other(a) / n_baseline(a)``; ``convention="inverted"`` returns the reciprocal."""
    try:
        n_other = samples_to_reach(curve_other.n_labeled, curve_other.miou, target)
    except NotReachedError as exc:
        raise NotReachedError(f"curve {curve_other.method!r}: {exc}") from None
    try:
        n_base = samples_to_reach(curve_baseline.n_labeled, curve_baseline.miou, target)
    except NotReachedError as exc:
        raise NotReachedError(f"curve {curve_baseline.method!r}: {exc}") from None
    if convention == "as-written":
        return n_other / n_base
    if convention == "inverted":
        return n_base / n_other
    raise ValueError(f"unknown LE convention {convention!r}")


def le_table(curve_other, curve_baseline, targets, convention="as-written"):
    """Rows ``(target, n_baseline, n_other, LE)``."""
    rows = []
    for a in targets:
        le = labeling_efficiency(curve_other, curve_baseline, a, convention)
        n_o = samples_to_reach(curve_other.n_labeled, curve_other.miou, a)
        n_b = samples_to_reach(curve_baseline.n_labeled, curve_baseline.miou, a)
        rows.append((float(a), n_b, n_o, le))
    return rows


def write_le_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_miou", "n_baseline", "n_other", "le"])
        for a, nb, no, le in rows:
            w.writerow([f"{a:.6f}", f"{nb:.6f}", f"{no:.6f}", f"{le:.8f}"])


def delta_ciou(curve: LearningCurve, miou_fs: float) -> np.ndarray:
    """Per-step, per-class deviation of class IoU from the fully supervised mIoU."""
    if not 0.0 <= miou_fs <= 1.0:
        raise ValueError("miou_fs must lie in [0, 1]")
    return curve.ciou_matrix - miou_fs


def _fmt(x):
    return "nan" if np.isnan(x) else f"{x:.8f}"


def export_curves(curves, out_dir, filename="curves.csv") -> Path:
    """Write all curves into one CSV with a fixed, deterministic number format."""
    if isinstance(curves, LearningCurve):
        curves = [curves]
    curves = list(curves)
    if not curves or not any(len(c) for c in curves):
        raise ValueError("nothing to export: empty curve")
    n_cls = max(len(c.ciou[0]) for c in curves if len(c))
    path = Path(out_dir) / filename
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "step", "n_labeled", "pct_labeled", "miou"]
                   + [f"ciou_{i}" for i in range(n_cls)])
        for c in curves:
            for s in range(len(c)):
                w.writerow([c.method, s, c.n_labeled[s], f"{c.pct_labeled[s]:.6f}", _fmt(c.miou[s])]
                           + [_fmt(v) for v in c.ciou[s]])
    return path


def read_curves(path) -> list[LearningCurve]:
    curves: dict[str, LearningCurve] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            c = curves.setdefault(row["method"], LearningCurve(row["method"]))
            ciou = [float(row[k]) for k in row if k.startswith("ciou_")]
            c.append(int(row["n_labeled"]), float(row["pct_labeled"]), float(row["miou"]), ciou)
    return list(curves.values())
