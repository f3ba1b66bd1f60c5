"""Pool-based active learning loop with per-step weight reset and resumable state."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugPolicy
from .exceptions import ConfigError, FormatError, IntegrityError
from .heuristics import (
    AggregationSpec,
    HEURISTICS,
    random_scores,
    rank_pool,
    score_pool,
    write_scores,
)
from .metrics import LearningCurve, confusion_matrix, export_curves, iou
from .model import Architecture, TrainConfig, init_model, predict_labels, save_checkpoint, train
from .projection import DEFAULT_CHANNELS, SensorConfig, project, stack_images
from .scan_io import DatasetManifest
from .seeding import mix_seed

log = logging.getLogger(__name__)

STATE_VERSION = 1
STATE_FILE = "state.json"
_RANDOM_TAG = 0x52414E44
_MODEL_TAG = 0x4D4F444C


@dataclass
class ExperimentConfig:
    manifest: str | None = None
    test_manifest: str | None = None
    name: str = "experiment"
    sensor: SensorConfig = field(default_factory=SensorConfig)
    channels: tuple[str, ...] = DEFAULT_CHANNELS
    pool_size: int | None = None
    test_size: int | None = None
    init_size: int = 1041
    budget: int = 800
    heuristic: str = "bald"
    aggregation: AggregationSpec = field(default_factory=AggregationSpec)
    mc_iterations: int = 8
    hidden: tuple[int, ...] = (16, 32, 32)
    dropout: float = 0.2
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugPolicy | None = None
    seed: int = 0
    model_seed: int | None = None
    max_steps: int | None = None
    threads: int = 1
    out_dir: str = "out"

    def validate(self, n_pool=None):
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.init_size < 1:
            raise ConfigError(f"init_size must be >= 1, got {self.init_size}")
        if self.heuristic not in HEURISTICS:
            raise ConfigError(f"heuristic must be one of {HEURISTICS}, got {self.heuristic!r}")
        if self.mc_iterations < 1:
            raise ConfigError("mc_iterations must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        for key in ("pool_size", "test_size"):
            v = getattr(self, key)
            if v is not None and v < 1:
                raise ConfigError(f"{key} must be >= 1, got {v}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if n_pool is not None and self.init_size + self.budget > n_pool:
            raise ConfigError(
                f"init_size + budget = {self.init_size + self.budget} exceeds pool size {n_pool}"
            )

    @property
    def effective_model_seed(self):
        return self.seed if self.model_seed is None else self.model_seed

    def snapshot(self) -> str:
        from .config import dump_config

        return dump_config(self)

    def config_hash(self) -> str:
        return hashlib.sha256(self.snapshot().encode()).hexdigest()


# --------------------------------------------------------------------------- #
# pool state
# --------------------------------------------------------------------------- #
@dataclass
class PoolState:
    step: int
    labeled: list[int]
    unlabeled: list[int]
    history: list[list[int]] = field(default_factory=list)
    seed: int = 0
    rng_state: dict | None = None

    @property
    def n_total(self):
        return len(self.labeled) + len(self.unlabeled)

    def check(self, n_total=None, init_size=None, budget=None):
        """Assert the partition invariants; raises ``AssertionError`` on violation."""
        L, U = set(self.labeled), set(self.unlabeled)
        n = self.n_total if n_total is None else n_total
        assert len(L) == len(self.labeled) and len(U) == len(self.unlabeled), "duplicate ids"
        assert not (L & U), "labeled and unlabeled pools overlap"
        assert L | U == set(range(n)), "pools do not cover the dataset"
        seen = set()
        for sel in self.history:
            assert not (seen & set(sel)), "a sample was selected twice"
            seen |= set(sel)
        if init_size is not None and budget is not None:
            expected = min(n, init_size + sum(len(s) for s in self.history))
            assert len(L) == expected, f"|L|={len(L)} expected {expected}"

    def to_json(self):
        return {
            "step": self.step,
            "labeled": self.labeled,
            "unlabeled": self.unlabeled,
            "history": self.history,
            "seed": self.seed,
            "rng_state": self.rng_state,
        }

    @classmethod
    def from_json(cls, d):
        return cls(d["step"], list(d["labeled"]), list(d["unlabeled"]),
                   [list(h) for h in d["history"]], d["seed"], d.get("rng_state"))

    def __eq__(self, other):
        return self.to_json() == other.to_json()


def init_pool(n_total, init_size, seed) -> PoolState:
    """Uniformly draw ``init_size`` labeled ids; the rest start unlabeled."""
    n_total = len(n_total) if hasattr(n_total, "__len__") else int(n_total)
    if init_size > n_total:
        raise ConfigError(f"init_size={init_size} exceeds dataset size {n_total}")
    if init_size < 0:
        raise ConfigError("init_size must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
    chosen = rng.choice(n_total, size=init_size, replace=False)
    mask = np.zeros(n_total, bool)
    mask[chosen] = True
    return PoolState(0, np.flatnonzero(mask).tolist(), np.flatnonzero(~mask).tolist(),
                     [], int(seed), rng.bit_generator.state)


def n_al_steps(n_total, init_size, budget):
    """One initial training step plus ceil(|U0| / B) query steps."""
    return 1 + math.ceil((n_total - init_size) / budget)


def apply_selection(pool: PoolState, selected) -> PoolState:
    sel = [int(i) for i in selected]
    U = set(pool.unlabeled)
    if not set(sel) <= U:
        raise ValueError("selection contains ids that are not in the unlabeled pool")
    rest = U - set(sel)
    return PoolState(pool.step + 1, sorted(set(pool.labeled) | set(sel)), sorted(rest),
                     pool.history + [sel], pool.seed, pool.rng_state)


def random_query_scores(pool: PoolState):
    seed = mix_seed(pool.seed, pool.step, _RANDOM_TAG)
    return random_scores(len(pool.unlabeled), seed)


def select_query(pool: PoolState, scores, budget):
    """Top ``min(budget, |U|)`` ids of ``pool.unlabeled`` under ``scores`` (aligned with U)."""
    if not pool.unlabeled:
        raise ValueError("unlabeled pool is empty")
    ranked = rank_pool(dict(zip(pool.unlabeled, scores)))
    return ranked[:min(budget, len(ranked))]


def dry_run(n_total, init_size, budget, seed=0, max_steps=None):
    """Pool arithmetic only (random selection, no training). Returns ``|L|`` per recorded step."""
    pool = init_pool(n_total, init_size, seed)
    sizes = []
    while True:
        pool.check(n_total, init_size, budget)
        sizes.append(len(pool.labeled))
        if not pool.unlabeled or (max_steps is not None and len(sizes) >= max_steps):
            break
        pool = apply_selection(pool, select_query(pool, random_query_scores(pool), budget))
    return sizes


# --------------------------------------------------------------------------- #
# persistence
# --------------------------------------------------------------------------- #
def _canonical(payload):
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def save_state(pool: PoolState, directory, extra=None):
    directory = Path(directory)
    payload = {"version": STATE_VERSION, "pool": pool.to_json(), "extra": extra or {}}
    body = _canonical(payload)
    doc = {"checksum": hashlib.sha256(body.encode()).hexdigest(), "payload": payload}
    tmp = directory / (STATE_FILE + ".tmp")
    tmp.write_text(_canonical(doc))
    tmp.replace(directory / STATE_FILE)


def load_state(directory, with_extra=False):
    path = Path(directory) / STATE_FILE
    if not path.exists():
        raise FileNotFoundError(f"no {STATE_FILE} in {directory}")
    try:
        doc = json.loads(path.read_text())
        payload, checksum = doc["payload"], doc["checksum"]
    except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt state file ({exc})") from None
    if hashlib.sha256(_canonical(payload).encode()).hexdigest() != checksum:
        raise IntegrityError(f"{path}: checksum mismatch")
    if payload.get("version") != STATE_VERSION:
        raise IntegrityError(f"{path}: state version {payload.get('version')} != {STATE_VERSION}")
    pool = PoolState.from_json(payload["pool"])
    return (pool, payload["extra"]) if with_extra else pool


# --------------------------------------------------------------------------- #
# experiment
# --------------------------------------------------------------------------- #
@dataclass
class Dataset:
    images: list
    hashes: list[int]
    n_classes: int


def load_dataset(manifest_path, cfg: ExperimentConfig, subset_size=None, subset_seed=0) -> Dataset:
    manifest = DatasetManifest.read(manifest_path)
    idx = np.arange(len(manifest))
    if subset_size is not None and subset_size < len(manifest):
        rng = np.random.default_rng(np.random.SeedSequence([subset_seed, 0x5B5E7]))
        idx = np.sort(rng.choice(len(manifest), subset_size, replace=False))
    images = [project(manifest.load(int(i)), cfg.sensor, cfg.channels) for i in idx]
    hashes = [manifest[int(i)].content_hash for i in idx]
    return Dataset(images, hashes, manifest.class_count)


def load_test_dataset(cfg: ExperimentConfig, pool: Dataset) -> Dataset:
    """Evaluation set: ``test_manifest`` (optionally subsampled), else the pool itself."""
    if not cfg.test_manifest:
        return pool
    return load_dataset(cfg.test_manifest, cfg, cfg.test_size, cfg.seed + 1)


@dataclass
class StepRecord:
    step: int
    n_labeled: int
    pct_labeled: float
    miou: float
    ciou: np.ndarray
    init_checksum: int
    wall_time: float
    selected: list[int] = field(default_factory=list)


def step_model_seed(cfg: ExperimentConfig, step):
    return mix_seed(cfg.effective_model_seed, step, _MODEL_TAG)


def train_on_labeled(pool: PoolState, data: Dataset, cfg: ExperimentConfig):
    """Fresh weights (weight reset) trained on the current labeled set."""
    arch = Architecture(len(cfg.channels), data.n_classes, tuple(cfg.hidden), 3, cfg.dropout)
    seed = step_model_seed(cfg, pool.step)
    params0 = init_model(arch, seed)
    tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
    samples = [data.images[i] for i in pool.labeled]
    hashes = [data.hashes[i] for i in pool.labeled]
    params, tlog = train(params0, samples, tcfg, cfg.aug, hashes)
    return params, tlog, params0.checksum()


def evaluate(params, data: Dataset):
    chans, labels, valid = stack_images(data.images)
    pred = predict_labels(params, chans, valid)
    return iou(confusion_matrix(pred, labels, valid, data.n_classes))


def pool_scores(pool: PoolState, params, data: Dataset, cfg: ExperimentConfig):
    if cfg.heuristic == "random":
        return random_query_scores(pool)
    images = [data.images[i] for i in pool.unlabeled]
    hashes = [data.hashes[i] for i in pool.unlabeled]
    return score_pool(params, images, hashes, cfg.heuristic, cfg.aggregation,
                      cfg.mc_iterations, cfg.seed, cfg.threads)


def query_step(pool: PoolState, data: Dataset, test: Dataset, cfg: ExperimentConfig):
    """Train from scratch on L, evaluate, then move the top-B of U into L.

    Returns ``(selected, new_pool, record, params, scores)``; with an empty
    unlabeled pool only the train/evaluate half runs.
    """
    t0 = time.perf_counter()
    params, tlog, init_sum = train_on_labeled(pool, data, cfg)
    res = evaluate(params, test)
    selected, scores, new_pool = [], None, pool
    if pool.unlabeled:
        scores = pool_scores(pool, params, data, cfg)
        selected = select_query(pool, scores, cfg.budget)
        new_pool = apply_selection(pool, selected)
    n = pool.n_total
    record = StepRecord(pool.step, len(pool.labeled), 100.0 * len(pool.labeled) / n,
                        res.miou, res.iou, init_sum, time.perf_counter() - t0, selected)
    return selected, new_pool, record, params, scores


def _write_step(step_dir: Path, record: StepRecord, params, pool, scores):
    step_dir.mkdir(parents=True, exist_ok=True)
    (step_dir / "selected.txt").write_text("".join(f"{i}\n" for i in record.selected))
    with open(step_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "n_labeled", "pct_labeled", "miou", "init_checksum", "wall_time"]
                   + [f"ciou_{i}" for i in range(len(record.ciou))])
        w.writerow([record.step, record.n_labeled, f"{record.pct_labeled:.6f}", f"{record.miou:.8f}",
                    f"{record.init_checksum:016x}", f"{record.wall_time:.3f}"]
                   + [f"{v:.8f}" for v in record.ciou])
    save_checkpoint(params, step_dir / "model.ckpt")
    if scores is not None:
        write_scores(step_dir / "scores.csv", pool.unlabeled, scores)


def _record_to_json(r: StepRecord):
    return {"step": r.step, "n_labeled": r.n_labeled, "pct_labeled": r.pct_labeled,
            "miou": r.miou, "ciou": [None if np.isnan(v) else v for v in r.ciou.tolist()],
            "init_checksum": r.init_checksum, "wall_time": r.wall_time, "selected": r.selected}


def _record_from_json(d):
    ciou = np.array([np.nan if v is None else v for v in d["ciou"]])
    return StepRecord(d["step"], d["n_labeled"], d["pct_labeled"], d["miou"], ciou,
                      d["init_checksum"], d["wall_time"], d["selected"])


def curve_from_records(records, method):
    curve = LearningCurve(method)
    for r in records:
        curve.append(r.n_labeled, r.pct_labeled, r.miou, r.ciou)
    return curve


def method_name(cfg: ExperimentConfig):
    return cfg.heuristic + ("+da" if cfg.aug is not None and cfg.aug.steps else "")


@dataclass
class ExperimentResult:
    curve: LearningCurve
    records: list[StepRecord]
    pool: PoolState
    out_dir: Path
    completed: bool


def run_experiment(cfg: ExperimentConfig, data: Dataset | None = None, test: Dataset | None = None,
                   stop_after: int | None = None, resume=True) -> ExperimentResult:
    """Loop query steps until U is exhausted or ``max_steps`` records exist.

    State is checkpointed after every step; a rerun with the same config
    resumes where it stopped. ``stop_after`` interrupts after that many steps
    in this call (used to exercise resume).
    """
    if data is None:
        if cfg.manifest is None:
            raise ConfigError("no manifest configured")
        data = load_dataset(cfg.manifest, cfg, cfg.pool_size, cfg.seed)
    if test is None:
        test = load_test_dataset(cfg, data)
    n = len(data.images)
    cfg.validate(n)
    total_steps = n_al_steps(n, cfg.init_size, cfg.budget)
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    out = Path(cfg.out_dir) / cfg.name
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    snapshot = cfg.snapshot()
    chash = cfg.config_hash()

    records: list[StepRecord] = []
    if resume and (out / STATE_FILE).exists():
        pool, extra = load_state(out, with_extra=True)
        if extra.get("config_hash") != chash:
            raise ConfigError(f"resume state in {out} was produced by a different configuration")
        records = [_record_from_json(d) for d in extra.get("records", [])]
        log.info("resuming %s at step %d", out, pool.step)
    else:
        pool = init_pool(n, cfg.init_size, cfg.seed)
    (out / "config.snapshot").write_text(snapshot)

    method = method_name(cfg)
    done_now = 0
    while len(records) < total_steps:
        if stop_after is not None and done_now >= stop_after:
            return ExperimentResult(curve_from_records(records, method), records, pool, out, False)
        last = len(records) == total_steps - 1
        if last and pool.unlabeled:
            # step cap reached: final record trains and evaluates without selecting
            capped = PoolState(pool.step, pool.labeled, [], pool.history, pool.seed, pool.rng_state)
            _, _, record, params, scores = query_step(capped, data, test, cfg)
            record.pct_labeled = 100.0 * record.n_labeled / n
            new_pool = pool
        else:
            _, new_pool, record, params, scores = query_step(pool, data, test, cfg)
        new_pool.check(n)
        _write_step(out / f"step_{record.step}", record, params, pool, scores)
        records.append(record)
        log.info("step %d: |L|=%d mIoU=%.4f (%.1fs)", record.step, record.n_labeled,
                 record.miou, record.wall_time)
        pool = new_pool if new_pool is not pool else PoolState(
            pool.step + 1, pool.labeled, pool.unlabeled, pool.history, pool.seed, pool.rng_state)
        save_state(pool, out, {"config_hash": chash,
                               "records": [_record_to_json(r) for r in records]})
        done_now += 1

    curve = curve_from_records(records, method)
    export_curves(curve, out)
    return ExperimentResult(curve, records, pool, out, True)
