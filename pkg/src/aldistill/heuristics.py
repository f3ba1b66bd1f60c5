"""Uncertainty heuristics over MC-dropout stacks and per-sample aggregation."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import entr

HEURISTICS = ("bald", "entropy", "random")
AGGREGATIONS = ("sum", "mean", "max", "weighted_mean")


@dataclass
class ScoreImage:
    scores: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.scores = np.where(self.valid, self.scores, 0.0)


def _check_stack(stack, tol=1e-6):
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim < 2:
        raise ValueError("stack must have class and MC axes (..., C, T)")
    if stack.shape[-1] < 1:
        raise ValueError("need at least one MC slice")
    if (stack < -tol).any() or (stack > 1 + tol).any():
        raise ValueError("probabilities outside [0, 1]")
    err = np.abs(stack.sum(axis=-2) - 1.0)
    if (err > tol).any():
        raise ValueError(f"MC slice not normalized (max |sum - 1| = {err.max():.3g})")
    return stack


def _entropy(p, axis):
    return entr(p).sum(axis=axis)


def _wrap(scores, valid):
    if valid is None:
        valid = np.ones(scores.shape, bool)
    return ScoreImage(scores, np.asarray(valid, bool))


def bald(stack, valid=None) -> ScoreImage:
    """Mutual information H(mean_t p_t) - mean_t H(p_t) per pixel, in nats.

    ``stack`` has shape ``(..., C, T)``.
    """
    stack = _check_stack(stack)
    mean_p = stack.mean(axis=-1)
    score = _entropy(mean_p, -1) - _entropy(stack, -2).mean(axis=-1)
    # no disagreement at all: exactly zero rather than a rounding residue
    agree = (stack == stack[..., :1]).all(axis=(-2, -1))
    return _wrap(np.where(agree, 0.0, np.maximum(score, 0.0)), valid)


def predictive_entropy(stack, valid=None) -> ScoreImage:
    stack = _check_stack(stack)
    return _wrap(_entropy(stack.mean(axis=-1), -1), valid)


def random_scores(n_samples: int, seed) -> np.ndarray:
    """Per-sample uniform(0, 1) scores; bypasses pixel scoring entirely."""
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    return np.random.default_rng(seed).random(n_samples)


@dataclass(frozen=True)
class AggregationSpec:
    method: str = "sum"
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.method not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.method!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if (w < 0).any() or not (w > 0).any():
                raise ValueError("class weights must be non-negative and not all zero")
        elif self.method == "weighted_mean":
            raise ValueError("weighted_mean needs per-class weights")


def aggregate(score_img: ScoreImage, spec: AggregationSpec = AggregationSpec(), class_map=None) -> float:
    """Reduce a score image to one scalar; invalid pixels never count."""
    s = score_img.scores[score_img.valid]
    if s.size == 0:
        return 0.0
    if spec.method == "sum":
        return float(s.sum())
    if spec.method == "mean":
        return float(s.sum() / s.size)
    if spec.method == "max":
        return float(s.max())
    if class_map is None:
        raise ValueError("weighted_mean aggregation needs a per-pixel class map")
    w = np.asarray(spec.weights, dtype=float)[np.asarray(class_map)[score_img.valid]]
    total = w.sum()
    return float((w * s).sum() / total) if total > 0 else 0.0


def rank_pool(scores) -> list[int]:
    """Sample ids by descending score, ties by ascending id.

    ``scores`` is a mapping ``id -> score`` or a sequence indexed by id.
    """
    if isinstance(scores, Mapping):
        ids = np.array(list(scores.keys()), dtype=np.int64)
        vals = np.array(list(scores.values()), dtype=float)
    else:
        vals = np.asarray(scores, dtype=float)
        ids = np.arange(len(vals))
    nan = np.isnan(vals)
    if nan.any():
        raise ValueError(f"NaN score for sample {int(ids[np.flatnonzero(nan)[0]])}")
    if not np.isfinite(vals).all():
        raise ValueError(f"infinite score for sample {int(ids[~np.isfinite(vals)][0])}")
    order = np.lexsort((ids, -vals))
    return [int(i) for i in ids[order]]


def score_image(stack, heuristic, valid=None) -> ScoreImage:
    if heuristic == "bald":
        return bald(stack, valid)
    if heuristic == "entropy":
        return predictive_entropy(stack, valid)
    raise ValueError(f"no pixel scores for heuristic {heuristic!r}")


def score_pool(params, images: Sequence, hashes: Sequence[int], heuristic="bald",
               agg: AggregationSpec = AggregationSpec(), T=8, global_seed=0, threads=1):
    """Aggregated uncertainty for each image, in input order.

    Each image gets its own seed stream from its content hash, so the result
    does not depend on ``threads`` or on scheduling.
    """
    from .model import mc_predict

    if heuristic not in ("bald", "entropy"):
        raise ValueError(f"score_pool handles pixel heuristics only, got {heuristic!r}")

    def one(i):
        img = images[i]
        stack = mc_predict(params, img, T, hashes[i], global_seed)
        s = score_image(stack, heuristic, img.valid)
        class_map = stack.mean(-1).argmax(-1) if agg.method == "weighted_mean" else None
        return aggregate(s, agg, class_map)

    if threads <= 1:
        return np.array([one(i) for i in range(len(images))])
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return np.array(list(ex.map(one, range(len(images)))))


def write_scores(path, ids, scores):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "score"])
        for i, s in zip(ids, scores):
            w.writerow([int(i), repr(float(s))])
