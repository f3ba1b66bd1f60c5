"""Miniature range-image segmentation CNN with MC-dropout sampling.

The network is ``[conv3x3 -> ReLU] * len(hidden) -> channel dropout ->
conv1x1 -> softmax`` with 'same' zero padding. Weights and all arithmetic are
float64. Everything here is plain numpy with hand-written backprop.
"""

from __future__ import annotations

import copy
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .exceptions import FormatError, NumericError
from .metrics import confusion_matrix, iou
from .projection import RangeImage, stack_images
from .seeding import mix_seed

MODES = ("train", "eval", "mc")


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 4
    n_classes: int = 6
    hidden: tuple[int, ...] = (16, 32, 32)
    kernel: int = 3
    dropout: float = 0.2

    def __post_init__(self):
        if self.in_channels < 1 or self.n_classes < 2:
            raise ValueError("need in_channels >= 1 and n_classes >= 2")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def layer_shapes(self):
        shapes, cin = [], self.in_channels
        for h in self.hidden:
            shapes.append((self.kernel, self.kernel, cin, h))
            cin = h
        shapes.append((1, 1, cin, self.n_classes))
        return shapes

    @property
    def n_params(self):
        return sum(int(np.prod(s)) + s[-1] for s in self.layer_shapes)

    def describe(self):
        hidden = ",".join(map(str, self.hidden))
        return (f"in={self.in_channels};classes={self.n_classes};hidden={hidden};"
                f"kernel={self.kernel};dropout={self.dropout!r}")

    @classmethod
    def parse(cls, text):
        kv = dict(part.split("=", 1) for part in text.split(";"))
        try:
            hidden = tuple(int(h) for h in kv["hidden"].split(",") if h)
            return cls(int(kv["in"]), int(kv["classes"]), hidden, int(kv["kernel"]), float(kv["dropout"]))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad architecture descriptor {text!r}: {exc}") from None


@dataclass
class ModelParams:
    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int = 0
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None
    iteration: int = 0

    def __post_init__(self):
        if self.input_mean is None:
            self.input_mean = np.zeros(self.arch.in_channels)
        if self.input_std is None:
            self.input_std = np.ones(self.arch.in_channels)

    def tensors(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy(self):
        return copy.deepcopy(self)

    def checksum(self):
        from .scan_io import content_hash

        return content_hash(b"".join(np.ascontiguousarray(t).tobytes() for t in self.tensors()))

    def equals(self, other):
        return self.arch == other.arch and all(
            np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors())
        )


def init_model(arch: Architecture, seed: int) -> ModelParams:
    """He-uniform conv weights (fan-in scaled), zero biases."""
    if not isinstance(arch, Architecture):
        raise TypeError("arch must be an Architecture")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    shapes = arch.layer_shapes
    for i, s in enumerate(shapes):
        fan_in = s[0] * s[1] * s[2]
        gain = 6.0 if i < len(shapes) - 1 else 3.0
        bound = np.sqrt(gain / fan_in)
        weights.append(rng.uniform(-bound, bound, size=s))
        biases.append(np.zeros(s[-1]))
    return ModelParams(arch, weights, biases, seed=int(seed))


# --------------------------------------------------------------------------- #
# forward / backward
# --------------------------------------------------------------------------- #
def _as_batch(x, params):
    if isinstance(x, RangeImage):
        chans, valid = x.channels[None], x.valid[None]
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], RangeImage):
        chans = np.stack([im.channels for im in x])
        valid = np.stack([im.valid for im in x])
    else:
        chans = np.asarray(x, dtype=np.float64)
        if chans.ndim == 3:
            chans = chans[None]
        valid = np.ones(chans.shape[:3], bool)
    if chans.shape[-1] != params.arch.in_channels:
        raise ValueError(
            f"input has {chans.shape[-1]} channels, architecture expects {params.arch.in_channels}"
        )
    return chans, valid


def preprocess(params: ModelParams, chans, valid):
    z = (chans - params.input_mean) / params.input_std
    return np.where(valid[..., None], z, 0.0)


def _trunk(params, x, keep_cache=False):
    cache = []
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z, cols = nn.conv_forward(h, w, b)
        if keep_cache:
            cache.append((h.shape, cols, z))
        h = np.maximum(z, 0.0)
    return h, cache


def _head(params, feat, mask):
    w = params.weights[-1][0, 0]
    if mask is None:
        return feat @ w + params.biases[-1]
    return (feat * mask[:, None, None, :]) @ w + params.biases[-1]


def _dropout_mask(params, mode, n, dropout_seed, rng=None):
    p = params.arch.dropout
    width = params.weights[-1].shape[2]
    if mode == "eval" or p == 0:
        return None
    if rng is None:
        rng = np.random.default_rng(dropout_seed)
    return nn.channel_dropout_mask(rng, n, width, p)


def forward_logits(params: ModelParams, x, mode="eval", dropout_seed=None, valid=None):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    chans, v = _as_batch(x, params)
    if valid is not None:
        v = np.asarray(valid, bool).reshape(chans.shape[:3])
    feat, _ = _trunk(params, preprocess(params, chans, v))
    return _head(params, feat, _dropout_mask(params, mode, len(chans), dropout_seed))


def forward(params: ModelParams, x, mode="eval", dropout_seed=None) -> np.ndarray:
    """Per-pixel class probabilities ``(H, W, C)`` (or ``(B, H, W, C)`` for batches)."""
    single = isinstance(x, RangeImage) or np.ndim(x) == 3
    probs = nn.softmax(forward_logits(params, x, mode, dropout_seed))
    return probs[0] if single else probs


def mc_seed(global_seed, sample_hash, t):
    return mix_seed(global_seed, sample_hash, t)


def mc_predict(params: ModelParams, img, T: int, sample_hash: int, global_seed: int = 0):
    """MC-dropout stack ``(H, W, C, T)``. Slice ``t`` equals ``forward(mc, mc_seed(global_seed, hash, t))``.

    The convolutional trunk runs once; only the dropout head is resampled.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    chans, valid = _as_batch(img, params)
    feat, _ = _trunk(params, preprocess(params, chans, valid))
    slices = []
    for t in range(T):
        mask = _dropout_mask(params, "mc", 1, mc_seed(global_seed, sample_hash, t))
        slices.append(nn.softmax(_head(params, feat, mask))[0])
    return np.stack(slices, axis=-1)


def loss_and_grads(params: ModelParams, chans, labels, valid, mask=None, weight_decay=0.0):
    """Masked mean cross-entropy (+ L2 on weights) and its gradient.

    ``mask`` is the per-sample channel dropout mask (``None`` disables dropout).
    """
    x = preprocess(params, chans, valid)
    feat, cache = _trunk(params, x, keep_cache=True)
    w_last = params.weights[-1][0, 0]
    dropped = feat if mask is None else feat * mask[:, None, None, :]
    logits = dropped @ w_last + params.biases[-1]
    y = np.where(valid, labels, -1)
    loss, dlogits = nn.masked_cross_entropy(logits, y)
    if weight_decay:
        loss += 0.5 * weight_decay * sum(float((w * w).sum()) for w in params.weights)

    gw, gb = [None] * len(params.weights), [None] * len(params.biases)
    d2 = dlogits.reshape(-1, dlogits.shape[-1])
    gw[-1] = (dropped.reshape(-1, dropped.shape[-1]).T @ d2).reshape(params.weights[-1].shape)
    gb[-1] = d2.sum(0)
    dh = dlogits @ w_last.T
    if mask is not None:
        dh = dh * mask[:, None, None, :]
    for i in range(len(cache) - 1, -1, -1):
        x_shape, cols, z = cache[i]
        dz = dh * (z > 0)
        dh, gw[i], gb[i] = nn.conv_backward(dz, cols, x_shape, params.weights[i], need_dx=i > 0)
    if weight_decay:
        gw = [g + weight_decay * w for g, w in zip(gw, params.weights)]
    return loss, gw, gb


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #
@dataclass
class TrainConfig:
    max_iterations: int = 100000
    lr: float = 0.01
    lr_decay: float = 0.99
    weight_decay: float = 0.0001
    batch_size: int = 16
    eval_period: int = 500
    patience: int = 15
    min_delta: float = 1e-3
    momentum: float = 0.9
    seed: int = 0

    def validate(self):
        for name in ("max_iterations", "lr", "lr_decay", "batch_size", "eval_period", "patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.min_delta < 0:
            raise ValueError("weight_decay and min_delta must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class TrainLog:
    records: list[tuple[int, float, float]] = field(default_factory=list)
    best_iteration: int = 0
    best_miou: float = float("nan")
    stopped_early: bool = False
    wall_time: float = 0.0

    def __eq__(self, other):
        return (
            self.records == other.records
            and self.best_iteration == other.best_iteration
            and self.stopped_early == other.stopped_early
        )


def fit_input_scaling(chans, valid):
    vals = chans[valid]
    if len(vals) == 0:
        return np.zeros(chans.shape[-1]), np.ones(chans.shape[-1])
    mean = vals.mean(axis=0)
    std = vals.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


def predict_labels(params, chans, valid, batch=64):
    out = []
    for s in range(0, len(chans), batch):
        logits = forward_logits(params, chans[s:s + batch], "eval", valid=valid[s:s + batch])
        out.append(logits.argmax(-1))
    return np.concatenate(out)


def evaluate_miou(params, chans, labels, valid):
    pred = predict_labels(params, chans, valid)
    cm = confusion_matrix(pred, labels, valid, params.arch.n_classes)
    return iou(cm), cm


def train(params: ModelParams, samples, cfg: TrainConfig, aug_policy=None, sample_hashes=None,
          callback=None):
    """Minibatch SGD (momentum) with early stopping on train mIoU.

    ``samples`` is a list of labeled :class:`RangeImage`. Every ``eval_period``
    iterations the learning rate decays and train mIoU is measured; the
    snapshot with the best mIoU is returned with the :class:`TrainLog`.
    """
    from .augment import apply_policy

    cfg.validate()
    if len(samples) == 0:
        raise ValueError("cannot train on an empty labeled set")
    t0 = time.perf_counter()
    params = params.copy()
    chans, labels, valid = stack_images(samples)
    params.input_mean, params.input_std = fit_input_scaling(chans, valid)
    if sample_hashes is None:
        sample_hashes = list(range(len(samples)))

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1]))
    n = len(samples)
    velocity = [np.zeros_like(t) for t in params.tensors()]
    lr = cfg.lr
    log = TrainLog()
    best = params.copy()
    best_miou, bad = -np.inf, 0
    order, pos = rng.permutation(n), 0
    period_loss = []

    for it in range(1, cfg.max_iterations + 1):
        if pos + cfg.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + cfg.batch_size] if n >= cfg.batch_size else rng.integers(0, n, cfg.batch_size)
        pos += cfg.batch_size
        if aug_policy is not None and aug_policy.steps:
            donors = rng.integers(0, n, len(idx))
            batch = [apply_policy(aug_policy, samples[i], sample_hashes[i], it, samples[d])
                     for i, d in zip(idx, donors)]
            bx, by, bv = stack_images(batch)
        else:
            bx, by, bv = chans[idx], labels[idx], valid[idx]
        mask = _dropout_mask(params, "train", len(idx), None, rng)
        loss, gw, gb = loss_and_grads(params, bx, by, bv, mask, cfg.weight_decay)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at iteration {it}")
        period_loss.append(loss)
        grads = []
        for g_w, g_b in zip(gw, gb):
            grads.extend([g_w, g_b])
        for t, v, g in zip(params.tensors(), velocity, grads):
            v *= cfg.momentum
            v -= lr * g
            t += v
        params.iteration = it

        last = it == cfg.max_iterations
        if it % cfg.eval_period == 0 or last:
            lr *= cfg.lr_decay
            res, _ = evaluate_miou(params, chans, labels, valid)
            miou = res.miou if np.isfinite(res.miou) else 0.0
            log.records.append((it, float(np.mean(period_loss)), float(miou)))
            period_loss = []
            if callback is not None:
                callback(it, log.records[-1])
            if miou > best_miou + cfg.min_delta:
                best_miou, bad = miou, 0
                best = params.copy()
                log.best_iteration = it
            else:
                bad += 1
                if bad >= cfg.patience:
                    log.stopped_early = True
                    break
    log.best_miou = float(best_miou)
    log.wall_time = time.perf_counter() - t0
    return best, log


def _loss_and_pattern(params, x, labels, valid, mask, weight_decay):
    h, pattern = x, []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z, _ = nn.conv_forward(h, w, b)
        pattern.append(z > 0)
        h = np.maximum(z, 0.0)
    logits = _head(params, h, mask)
    loss, _ = nn.masked_cross_entropy(logits, np.where(valid, labels, -1))
    if weight_decay:
        loss += 0.5 * weight_decay * sum(float((w * w).sum()) for w in params.weights)
    return loss, pattern


def grad_check(params: ModelParams, sample: RangeImage, epsilon=1e-5, n_coords=200,
               seed=0, weight_decay=0.0, return_details=False):
    """Max relative error of analytic vs central-difference gradients.

    Dropout is active with a fixed mask so its backward path is covered too.
    A coordinate whose +/-epsilon probes flip any ReLU on/off state straddles a
    kink, where the finite difference is not a derivative estimate; such
    coordinates are replaced by fresh draws and counted in the details.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    rng = np.random.default_rng(seed)
    chans, labels, valid = stack_images([sample])
    mask = _dropout_mask(params, "train", 1, None, np.random.default_rng(seed + 1))
    work = params.copy()
    _, gw, gb = loss_and_grads(work, chans, labels, valid, mask, weight_decay)
    analytic = []
    for g_w, g_b in zip(gw, gb):
        analytic.extend([g_w, g_b])
    if not all(np.isfinite(g).all() for g in analytic):
        raise NumericError("non-finite analytic gradient")
    x = preprocess(work, chans, valid)
    _, base_pattern = _loss_and_pattern(work, x, labels, valid, mask, weight_decay)
    tensors = work.tensors()
    sizes = np.array([t.size for t in tensors])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(sizes.sum())
    n_coords = min(n_coords, total)
    # one coordinate from every tensor first, then uniform over the rest
    queue = [int(offsets[i] + rng.integers(s)) for i, s in enumerate(sizes)]
    queue += [int(f) for f in rng.permutation(total) if int(f) not in set(queue)]

    worst, checked, skipped = 0.0, 0, 0
    for f in queue:
        if checked >= n_coords:
            break
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        j = f - int(offsets[i])
        t = tensors[i].reshape(-1)
        orig = t[j]
        t[j] = orig + epsilon
        lp, pat_p = _loss_and_pattern(work, x, labels, valid, mask, weight_decay)
        t[j] = orig - epsilon
        lm, pat_m = _loss_and_pattern(work, x, labels, valid, mask, weight_decay)
        t[j] = orig
        if any(not np.array_equal(a, b) or not np.array_equal(a, c)
               for a, b, c in zip(base_pattern, pat_p, pat_m)):
            skipped += 1
            continue
        num = (lp - lm) / (2 * epsilon)
        a = analytic[i].reshape(-1)[j]
        denom = max(abs(a), abs(num))
        err = abs(a - num) / denom if denom > 1e-10 else abs(a - num)
        if not np.isfinite(err):
            raise NumericError(f"non-finite gradient comparison at tensor {i}, index {j}")
        worst = max(worst, err)
        checked += 1
    if return_details:
        return worst, {"checked": checked, "kink_skipped": skipped}
    return worst


# --------------------------------------------------------------------------- #
# checkpoints
# --------------------------------------------------------------------------- #
_MAGIC = b"ALDCKPT1"


def save_checkpoint(params: ModelParams, path):
    """Header (magic, arch text, seed, iteration) then raw LE float64 tensors in layer order."""
    desc = params.arch.describe().encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<qq", params.seed, params.iteration))
        for t in params.tensors() + [params.input_mean, params.input_std]:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise FormatError(f"{path}: not a checkpoint file", offset=0)
    pos = len(_MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arch = Architecture.parse(data[pos:pos + n].decode())
    pos += n
    seed, iteration = struct.unpack_from("<qq", data, pos)
    pos += 16
    shapes = []
    for s in arch.layer_shapes:
        shapes.extend([s, (s[-1],)])
    shapes += [(arch.in_channels,), (arch.in_channels,)]
    arrays = []
    for s in shapes:
        size = int(np.prod(s)) * 8
        if pos + size > len(data):
            raise FormatError(f"{path}: truncated tensor data", offset=pos)
        arrays.append(np.frombuffer(data, "<f8", count=size // 8, offset=pos).reshape(s).copy())
        pos += size
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes", offset=pos)
    tensors, (mean, std) = arrays[:-2], arrays[-2:]
    return ModelParams(arch, tensors[0::2], tensors[1::2], seed, mean, std, iteration)


# --------------------------------------------------------------------------- #
# estimator
# --------------------------------------------------------------------------- #
class RangeSegmenter(ClassifierMixin, BaseEstimator):
    """Scikit-learn style wrapper around the segmentation network.

    ``X`` is a list of :class:`RangeImage` (or an ``(n, H, W, K)`` array with
    ``y`` given separately); ``predict`` returns per-pixel class ids.
    """

    def __init__(self, n_classes=6, hidden=(16, 32, 32), dropout=0.2, max_iterations=2000,
                 lr=0.01, lr_decay=0.99, weight_decay=1e-4, batch_size=16, eval_period=100,
                 patience=15, min_delta=1e-3, momentum=0.9, aug_policy=None, random_state=0):
        self.n_classes = n_classes
        self.hidden = hidden
        self.dropout = dropout
        self.max_iterations = max_iterations
        self.lr = lr
        self.lr_decay = lr_decay
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.eval_period = eval_period
        self.patience = patience
        self.min_delta = min_delta
        self.momentum = momentum
        self.aug_policy = aug_policy
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(self.max_iterations, self.lr, self.lr_decay, self.weight_decay,
                           self.batch_size, self.eval_period, self.patience, self.min_delta,
                           self.momentum, int(self.random_state))

    @staticmethod
    def _to_images(X, y=None):
        if isinstance(X, (list, tuple)) and X and isinstance(X[0], RangeImage):
            return list(X)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError(f"expected (n, H, W, K) input, got shape {X.shape}")
        labels = np.full(X.shape[:3], -1, np.int32) if y is None else np.asarray(y, np.int32)
        if labels.shape != X.shape[:3]:
            raise ValueError(f"y has shape {labels.shape}, expected {X.shape[:3]}")
        return [
            RangeImage(X[i], labels[i], np.zeros(X.shape[1:3], np.int32), np.ones(X.shape[1:3], bool),
                       tuple(f"c{k}" for k in range(X.shape[-1])))
            for i in range(len(X))
        ]

    def fit(self, X, y=None, sample_hashes=None):
        images = self._to_images(X, y)
        arch = Architecture(images[0].channels.shape[-1], self.n_classes, tuple(self.hidden),
                            3, self.dropout)
        self.init_params_ = init_model(arch, int(self.random_state))
        self.params_, self.train_log_ = train(self.init_params_, images, self._train_config(),
                                              self.aug_policy, sample_hashes)
        self.classes_ = np.arange(self.n_classes)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        images = self._to_images(X)
        return forward(self.params_, images, "eval")

    def predict(self, X):
        return self.predict_proba(X).argmax(-1)

    def mc_predict_proba(self, X, T=8, sample_hashes=None, global_seed=0):
        """Stacks of shape ``(n, H, W, C, T)``."""
        check_is_fitted(self, "params_")
        images = self._to_images(X)
        if sample_hashes is None:
            sample_hashes = range(len(images))
        return np.stack([mc_predict(self.params_, im, T, h, global_seed)
                         for im, h in zip(images, sample_hashes)])

    def score(self, X, y=None, sample_weight=None):
        """Mean IoU over present classes."""
        images = self._to_images(X, y)
        chans, labels, valid = stack_images(images)
        res, _ = evaluate_miou(self.params_, chans, labels, valid)
        return res.miou
