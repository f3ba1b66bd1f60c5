"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run under pytest (lines appear in the terminal summary) or directly:
``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from aldistill.alloop import (  # noqa: E402
    ExperimentConfig,
    dry_run,
    init_pool,
    load_dataset,
    load_state,
    n_al_steps,
    pool_scores,
    run_experiment,
    select_query,
    train_on_labeled,
)
from aldistill.cli import main as cli_main  # noqa: E402
from aldistill.heuristics import AggregationSpec, ScoreImage, aggregate, bald, predictive_entropy, rank_pool  # noqa: E402
from aldistill.metrics import LearningCurve, confusion_matrix, iou, labeling_efficiency  # noqa: E402
from aldistill.model import Architecture, TrainConfig, grad_check, init_model  # noqa: E402
from aldistill.projection import SensorConfig, pixel_coords, project, unproject  # noqa: E402
from aldistill.scan_io import (  # noqa: E402
    LabeledPointCloud,
    SyntheticSpec,
    content_hash,
    decode_labels,
    decode_scan,
    encode_labels,
    encode_scan,
    gen_synthetic_dataset,
    load_labels,
    load_scan,
    synthetic_scene,
)
from aldistill.exceptions import FormatError  # noqa: E402

from oracles import random_stack  # noqa: E402

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def _bald_direct(stack):
    """Per-pixel BALD by explicit loops over pixels, classes and draws."""
    h, w, c, t = stack.shape
    out = np.empty((h, w))
    log = math.log
    for i in range(h):
        for j in range(w):
            tab = stack[i, j].tolist()
            mean = [math.fsum(tab[k]) / t for k in range(c)]
            h_mean = -math.fsum(p * log(p) for p in mean if p > 0)
            h_cond = math.fsum(-math.fsum(tab[k][s] * log(tab[k][s]) for k in range(c) if tab[k][s] > 0)
                               for s in range(t)) / t
            out[i, j] = h_mean - h_cond
    return out


def _random_stacks(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        h, w = rng.integers(1, 9, 2)
        c, t = int(rng.integers(2, 6)), int(rng.integers(1, 11))
        conc = float(rng.choice([0.05, 0.5, 1.0, 5.0]))
        yield random_stack(rng, int(h), int(w), c, t, conc)


# --------------------------------------------------------------------------- #
# 1. BALD oracle equivalence
# --------------------------------------------------------------------------- #
def check_1():
    t0 = time.perf_counter()
    worst = 0.0
    for stack in _random_stacks(1000, 1):
        worst = max(worst, float(np.abs(bald(stack).scores - _bald_direct(stack)).max()))
    rng = np.random.default_rng(2)
    det_max = 0.0
    for _ in range(200):
        h, w, c, t = (int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(2, 6)),
                      int(rng.integers(1, 11)))
        base = random_stack(rng, h, w, c, 1)
        onehot = np.eye(c)[rng.integers(0, c, (h, w))][..., None]
        for s in (base, onehot):
            det_max = max(det_max, float(np.abs(bald(np.repeat(s, t, -1)).scores).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and det_max == 0.0 and elapsed < 10
    return record(1, ok, f"max |module - oracle| = {worst:.2e} (<= 1e-12), deterministic max = {det_max} "
                         f"(== 0), {elapsed:.1f}s (< 10s)")


# --------------------------------------------------------------------------- #
# 2. information-theoretic bounds
# --------------------------------------------------------------------------- #
def _bounds_violation(stack):
    c = stack.shape[-2]
    b, e = bald(stack).scores, predictive_entropy(stack).scores
    return max(float((-b).max()), float((b - e).max()), float((e - math.log(c)).max()))


def check_2():
    worst = max(_bounds_violation(s) for s in _random_stacks(1000, 3))
    failures = []

    @settings(max_examples=300, deadline=None, database=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(2, 5), st.integers(1, 10),
           st.integers(0, 2**32 - 1), st.sampled_from([0.01, 0.3, 1.0, 20.0]))
    def prop(h, w, c, t, seed, conc):
        v = _bounds_violation(random_stack(np.random.default_rng(seed), h, w, c, t, conc))
        if v > 1e-9:
            failures.append(v)
        assert v <= 1e-9

    try:
        prop()
        prop_ok = True
    except AssertionError:
        prop_ok = False
    ok = worst <= 1e-9 and prop_ok
    return record(2, ok, f"max violation of 0 <= BALD <= H <= ln C on 1000 stacks = {worst:.2e} (slack 1e-9); "
                         f"hypothesis 300 examples {'held' if prop_ok else 'FAILED'}")


# --------------------------------------------------------------------------- #
# 3. projection round trip
# --------------------------------------------------------------------------- #
def check_3():
    cfg = SensorConfig.from_degrees(64, 16, 3.0, 25.0)
    spec = SyntheticSpec()
    mask_ok, worst_rel, max_pts = True, 0.0, 0
    for i in range(100):
        rng = np.random.default_rng(np.random.SeedSequence([77, i]))
        cloud = synthetic_scene(spec, rng)
        if len(cloud) > 4096:
            keep = np.sort(rng.choice(len(cloud), 4096, replace=False))
            cloud = LabeledPointCloud(cloud.points[keep], cloud.sem_label[keep], cloud.inst_label[keep])
        max_pts = max(max_pts, len(cloud))
        a = project(cloud, cfg)
        b = project(unproject(a, cfg), cfg)
        mask_ok &= bool(np.array_equal(a.valid, b.valid))
        if a.valid.any():
            ra, rb = a.channel("r")[a.valid], b.channel("r")[b.valid]
            worst_rel = max(worst_rel, float((np.abs(rb - ra) / ra).max()))
    sym = SensorConfig(8, 8, math.pi / 8, math.pi / 8)
    hand = pixel_coords((1, 0, 0), sym) == (4, 4) and pixel_coords((0, 1, 0), sym) == (2, 4)
    ok = mask_ok and worst_rel <= 1e-5 and hand
    return record(3, ok, f"100 clouds (<= {max_pts} pts): masks identical = {mask_ok}, max rel r error = "
                         f"{worst_rel:.2e} (<= 1e-5), hand cases (4,4)/(2,4) = {hand}")


# --------------------------------------------------------------------------- #
# 4. gradient check
# --------------------------------------------------------------------------- #
def check_4():
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as d:
        m = gen_synthetic_dataset(SyntheticSpec(n_scans=1, seed=4), d)
        img = project(m.load(0), SensorConfig.from_degrees(64, 16, 3.0, 25.0))
    params = init_model(Architecture(4, 6, (16, 32, 32), 3, 0.2), 0)
    err, info = grad_check(params, img, epsilon=1e-5, n_coords=200, return_details=True)
    elapsed = time.perf_counter() - t0
    ok = err < 1e-4 and info["checked"] >= 200 and elapsed < 60
    return record(4, ok, f"max rel error {err:.2e} (< 1e-4) over {info['checked']} coords "
                         f"({info['kink_skipped']} ReLU-kink draws replaced), eps=1e-5 float64, {elapsed:.1f}s (< 60s)")


# --------------------------------------------------------------------------- #
# 5. sum vs mean ranking
# --------------------------------------------------------------------------- #
def check_5():
    rng = np.random.default_rng(5)
    worlds, same = 0, 0
    for trial in range(10):
        m = int(rng.integers(1, 1024))
        imgs = []
        for _ in range(500):
            valid = np.zeros((16, 64), bool)
            valid.flat[rng.choice(1024, m, replace=False)] = True
            imgs.append(ScoreImage(rng.random((16, 64)) * rng.uniform(0, 3), valid))
        s = rank_pool([aggregate(im, AggregationSpec("sum")) for im in imgs])
        mu = rank_pool([aggregate(im, AggregationSpec("mean")) for im in imgs])
        worlds += 1
        same += s == mu
    return record(5, same == worlds, f"{same}/{worlds} pools of 500 score images (constant valid count): "
                                     "sum and mean permutations identical")


# --------------------------------------------------------------------------- #
# 6. pool invariants and resume
# --------------------------------------------------------------------------- #
def _tiny_cfg(manifest, out, **kw):
    base = dict(manifest=str(manifest), name="c6", sensor=SensorConfig.from_degrees(64, 16, 3.0, 25.0),
                init_size=4, budget=4, heuristic="bald", mc_iterations=3, hidden=(8, 8),
                train=TrainConfig(max_iterations=20, batch_size=4, eval_period=10, patience=2),
                seed=6, out_dir=str(out))
    base.update(kw)
    return ExperimentConfig(**base)


def check_6():
    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        gen_synthetic_dataset(SyntheticSpec(n_scans=40, duplication_k=2, seed=6), d / "data")
        man = d / "data" / "manifest.tsv"
        cfg_a = _tiny_cfg(man, d / "a")
        data = load_dataset(man, cfg_a)
        steps = n_al_steps(40, 4, 4)
        full = run_experiment(cfg_a, data, data)
        # step-by-step: interrupt after every single step and resume
        cfg_b = _tiny_cfg(man, d / "b")
        inv_ok = True
        for i in range(steps):
            res = run_experiment(cfg_b, data, data, stop_after=1)
            pool = load_state(d / "b" / "c6")
            L, U = set(pool.labeled), set(pool.unlabeled)
            inv_ok &= L | U == set(range(40)) and not (L & U)
            inv_ok &= len(pool.labeled) == min(40, 4 + (i + 1) * 4)
            inv_ok &= res.records[-1].n_labeled == 4 + i * 4
        final = run_experiment(cfg_b, data, data)
        same = (d / "a/c6/curves.csv").read_bytes() == (d / "b/c6/curves.csv").read_bytes()
        ok = steps == 10 and len(full.records) == 10 and inv_ok and same and final.completed
    return record(6, ok, f"{len(full.records)} steps; L u U = D, L n U = 0, |L| = init + i*B after every step: "
                         f"{inv_ok}; resume after each step -> byte-identical curves.csv: {same}")


# --------------------------------------------------------------------------- #
# 7. Table 1 step count
# --------------------------------------------------------------------------- #
def check_7():
    sizes = dry_run(16241, 1041, 800, seed=0)
    ok = len(sizes) == 20 == n_al_steps(16241, 1041, 800) and sizes[-1] == 16241
    return record(7, ok, f"pool 16241, init 1041, B 800 -> {len(sizes)} recorded steps (expected 20), "
                         f"final |L| = {sizes[-1]}")


# --------------------------------------------------------------------------- #
# 8. desk-scale qualitative reproduction
# --------------------------------------------------------------------------- #
DESK_SEEDS = (0, 1, 2, 3, 4)


def _desk_cfg(root, heuristic, seed):
    return ExperimentConfig(
        manifest=str(root / "pool" / "manifest.tsv"), test_manifest=str(root / "test" / "manifest.tsv"),
        name=f"{heuristic}_s{seed}", sensor=SensorConfig.from_degrees(64, 16, 3.0, 25.0),
        init_size=60, budget=60, heuristic=heuristic, mc_iterations=8,
        train=TrainConfig(max_iterations=300, batch_size=8, eval_period=50, patience=3),
        seed=seed, max_steps=6, out_dir=str(root / "runs"))


def _dup_scores_equal(unlabeled, scores, hashes):
    by_hash = {}
    for i, s in zip(unlabeled, scores):
        by_hash.setdefault(hashes[i], set()).add(float(s))
    groups = [v for h, v in by_hash.items() if sum(1 for i in unlabeled if hashes[i] == h) > 1]
    return all(len(v) == 1 for v in groups), len(groups)


def check_8():
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as d:
        root = Path(d)
        m = gen_synthetic_dataset(SyntheticSpec(n_scans=600, duplication_k=10, n_dup_bases=20, seed=1),
                                  root / "pool")
        gen_synthetic_dataset(SyntheticSpec(n_scans=120, seed=1001), root / "test")
        hashes = m.hashes.tolist()
        _, inv, cnt = np.unique(m.hashes, return_inverse=True, return_counts=True)
        dup = cnt[inv] > 1
        assert dup.sum() == 200
        cfg0 = _desk_cfg(root, "bald", 0)
        data = load_dataset(cfg0.manifest, cfg0)
        test = load_dataset(cfg0.test_manifest, cfg0)

        # (c) full 6-step runs, seed 0
        bald_run = run_experiment(cfg0, data, test)
        rand_run = run_experiment(_desk_cfg(root, "random", 0), data, test)
        gap = bald_run.records[-1].miou - rand_run.records[-1].miou

        # (a) every BALD scoring pass of the full run, via the stored per-step scores
        a_ok, n_groups = True, 0
        run_dir = root / "runs" / "bald_s0"
        for r in bald_run.records[:-1]:
            rows = np.loadtxt(run_dir / f"step_{r.step}" / "scores.csv", delimiter=",", skiprows=1)
            ids, sc = rows[:, 0].astype(int).tolist(), rows[:, 1]
            eq, g = _dup_scores_equal(ids, sc, hashes)
            a_ok &= eq
            n_groups += g

        # (b) first query of BALD for each seed vs the random heuristic's expected fraction
        bald_frac, rand_exp, bald_red, rand_red_exp = [], [], [], []
        for seed in DESK_SEEDS:
            cfg = _desk_cfg(root, "bald", seed)
            pool = init_pool(len(data.images), cfg.init_size, seed)
            if seed == 0:
                sel = bald_run.records[0].selected
            else:
                params, _, _ = train_on_labeled(pool, data, cfg)
                scores = pool_scores(pool, params, data, cfg)
                eq, g = _dup_scores_equal(pool.unlabeled, scores, hashes)
                a_ok &= eq
                n_groups += g
                sel = select_query(pool, scores, cfg.budget)
            U = np.array(pool.unlabeled)
            bald_frac.append(float(dup[sel].mean()))
            rand_exp.append(float(dup[U].mean()))
            # supplementary: share of picks whose exact duplicate was picked too
            hs = np.asarray(hashes)[sel]
            u, c = np.unique(hs, return_counts=True)
            bald_red.append(float(np.isin(hs, u[c > 1]).mean()))
            rand_red_exp.append(_expected_random_redundancy(U, np.asarray(hashes), cfg.budget))
    elapsed = time.perf_counter() - t0

    b_ok = np.mean(bald_frac) > np.mean(rand_exp)
    c_ok = abs(gap) <= 0.05
    ok = a_ok and b_ok and c_ok and elapsed < 1800
    detail = (f"(a) duplicate scores identical: {a_ok} ({n_groups} duplicate groups audited); "
              f"(b) BALD first-query duplicate-member fraction {np.mean(bald_frac):.3f} "
              f"{'>' if b_ok else '<='} random expected {np.mean(rand_exp):.3f} "
              f"[per seed {', '.join(f'{x:.3f}' for x in bald_frac)}]; "
              f"(c) final mIoU BALD {bald_run.records[-1].miou:.3f} vs random {rand_run.records[-1].miou:.3f} "
              f"(gap {gap:+.3f}, |gap| <= 0.05: {c_ok}); {elapsed / 60:.1f} min (< 30)")
    print(f"  8 supplementary: share of BALD picks whose exact duplicate was also picked = "
          f"{np.mean(bald_red):.3f} vs random expectation {np.mean(rand_red_exp):.3f} "
          f"[per seed {', '.join(f'{x:.3f}' for x in bald_red)}]")
    return record(8, ok, detail)


def _expected_random_redundancy(U, hashes, budget):
    """E[share of a uniform B-subset of U whose item has a same-hash mate in the subset]."""
    n, b = len(U), min(budget, len(U))
    _, counts = np.unique(hashes[U], return_counts=True)
    # an item of a size-m cluster is counted when chosen and at least one of its
    # m-1 mates is among the other b-1 picks
    total = 0.0
    for m in counts[counts > 1]:
        p_none = math.comb(n - m, b - 1) / math.comb(n - 1, b - 1)
        total += m * (b / n) * (1 - p_none)
    return total / b


# --------------------------------------------------------------------------- #
# 9. metrics
# --------------------------------------------------------------------------- #
def check_9():
    m = iou([[3, 1], [1, 3]]).miou
    gt = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    pred = np.array([0, 0, 0, 1, 1, 1, 1, 0])
    m2 = iou(confusion_matrix(pred, gt, n_classes=2)).miou

    def curve(name, pts):
        c = LearningCurve(name)
        for n, v in pts:
            c.append(n, n / 10, v, [v])
        return c

    base = curve("random", [(100, 0.5), (200, 0.7)])
    other = curve("bald", [(100, 0.6), (200, 0.7)])
    le = labeling_efficiency(other, base, 0.6)
    wiggly = curve("x", [(50, 0.2), (100, 0.45), (150, 0.4), (200, 0.61), (400, 0.8)])
    self_ok = all(labeling_efficiency(c, c, a) == 1.0
                  for c in (base, other, wiggly) for a in np.linspace(min(c.miou), max(c.miou), 41))
    ok = m == 0.6 and m2 == 0.6 and le == 2 / 3 and self_ok
    return record(9, ok, f"mIoU[[3,1],[1,3]] = {m!r} (also {m2!r} from label images), LE = {le!r} "
                         f"(2/3 = {2 / 3!r}), self-LE == 1.0 for all reachable targets: {self_ok}")


# --------------------------------------------------------------------------- #
# 10. format fidelity
# --------------------------------------------------------------------------- #
def check_10():
    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        m = gen_synthetic_dataset(SyntheticSpec(n_scans=5, duplication_k=1, redundancy_rho=0.4, seed=10), d)
        bitwise = True
        for i in range(len(m)):
            sb, lb = m.scan_path(i).read_bytes(), m.label_path(i).read_bytes()
            cloud = load_labels(m.label_path(i), load_scan(m.scan_path(i)))
            bitwise &= encode_scan(cloud) == sb and encode_labels(cloud) == lb
            bitwise &= content_hash(encode_scan(cloud), encode_labels(cloud)) == m.entries[i].content_hash
            again = decode_labels(lb, decode_scan(sb))
            bitwise &= np.array_equal(again.points.view(np.uint32), cloud.points.view(np.uint32))
        raw = m.scan_path(0).read_bytes()
        bad = d / "truncated.bin"
        bad.write_bytes(raw[: len(raw) - 5])
        try:
            load_scan(bad)
            err_msg = None
        except FormatError as exc:
            err_msg = str(exc)
        expected_offset = (len(raw) - 5) // 16 * 16
        msg_ok = err_msg is not None and f"byte offset {expected_offset}" in err_msg
        rc = cli_main(["project", str(bad), "--out", str(d / "p")])
    ok = bitwise and msg_ok and rc == 3
    return record(10, ok, f"5 generated pairs re-parse bitwise: {bitwise}; truncated file -> "
                          f"{err_msg!r}; CLI exit code {rc} (expected 3)")


def test_expected_redundancy_formula():
    rng = np.random.default_rng(0)
    hashes = np.array([0] * 5 + [1] * 3 + list(range(2, 32)))
    U = np.arange(len(hashes))
    sims = []
    for _ in range(20000):
        sel = rng.choice(U, 10, replace=False)
        u, c = np.unique(hashes[sel], return_counts=True)
        sims.append(np.isin(hashes[sel], u[c > 1]).mean())
    assert abs(np.mean(sims) - _expected_random_redundancy(U, hashes, 10)) < 4 * np.std(sims) / math.sqrt(len(sims))


CHECKS = {i: globals()[f"check_{i}"] for i in range(1, 11)}


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6, 7, 9, 10])
def test_criterion(n):
    assert CHECKS[n]()


@pytest.mark.slow
def test_criterion_8_desk_scale():
    assert check_8()


if __name__ == "__main__":
    only = [int(a) for a in sys.argv[1:]] or list(CHECKS)
    for n in only:
        CHECKS[n]()
    print()
    for n in sorted(RESULTS):
        print(f"{n:2d}: {'PASS' if RESULTS[n][0] else 'FAIL'}")
    sys.exit(0 if all(ok for ok, _ in RESULTS.values()) else 1)
