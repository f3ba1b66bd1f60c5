import numpy as np
import pytest

from aldistill.alloop import ExperimentConfig, load_dataset
from aldistill.model import TrainConfig
from aldistill.projection import SensorConfig
from aldistill.scan_io import LabeledPointCloud, SyntheticSpec, gen_synthetic_dataset


def random_cloud(rng, n, labels=True):
    """Points spread over a spherical shell so most fall inside a 3/25 degree FoV."""
    az = rng.uniform(-np.pi, np.pi, n)
    el = rng.uniform(np.radians(-24), np.radians(2.5), n)
    r = rng.uniform(2.0, 50.0, n)
    pts = np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el),
                    rng.uniform(0, 1, n)], 1)
    if not labels:
        return LabeledPointCloud(pts)
    return LabeledPointCloud(pts, rng.integers(0, 6, n), rng.integers(0, 4, n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """40 scans, every base stored twice."""
    out = tmp_path_factory.mktemp("synth_small")
    gen_synthetic_dataset(SyntheticSpec(n_scans=40, duplication_k=2, seed=5), out)
    return out / "manifest.tsv"


def tiny_config(manifest, out_dir, **overrides):
    train = TrainConfig(max_iterations=30, batch_size=4, eval_period=10, patience=2)
    kw = dict(manifest=str(manifest), name="tiny", sensor=SensorConfig.from_degrees(64, 16, 3.0, 25.0),
              init_size=10, budget=10, mc_iterations=3, hidden=(8, 8), train=train, out_dir=str(out_dir))
    kw.update(overrides)
    return ExperimentConfig(**kw)


@pytest.fixture(scope="session")
def small_dataset(synth_small, tmp_path_factory):
    cfg = tiny_config(synth_small, tmp_path_factory.mktemp("unused"))
    return load_dataset(synth_small, cfg)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
