import logging

import numpy as np
import pytest

from rpmforecast.domain import AdverseEvent, Observation, PatientRecord, StaticProfile, catalog_default
import time

from rpmforecast.evaluation import auroc
from rpmforecast.model import ModelConfig, predict_batch, train
from rpmforecast.sampling import WindowSpec, build_dataset
from rpmforecast.synth import SynthConfig, generate_cohort, oracle_auroc

# learnability experiments use every 4th day: neighbouring windows are near-duplicates
LEARN_SPEC = WindowSpec(stride_days=4)
LEARN_EPOCHS = 20


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end experiment")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def make_record(pid="A", obs=(), events=(), start=0.0, end=70.0, static=None):
    """Record from (t, name, value) triples and (t, kind) events."""
    cat = catalog_default()
    observations = tuple(
        sorted((Observation(pid, float(t), cat.by_name(n).var, float(v)) for t, n, v in obs),
               key=lambda o: (o.t_days, o.variable.id))
    )
    adverse = tuple(AdverseEvent(float(t), k) for t, k in sorted(events))
    return PatientRecord(pid, static or StaticProfile(60.0, 1.0, 25.0), observations, adverse, start, end)


@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture(scope="session")
def small_cohort():
    logging.disable(logging.WARNING)
    recs, gt = generate_cohort(SynthConfig(n_patients=12, seed=3))
    logging.disable(logging.NOTSET)
    return recs, gt


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=8, n_blocks=1, n_heads=2, dropout=0.0, dtype="float64", init_scale=0.5, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def learn_experiment(cfg: SynthConfig, epochs: int = LEARN_EPOCHS) -> dict:
    """Generate, split (seed 7), train (seed 7) and score on the held-out windows."""
    t0 = time.perf_counter()
    recs, gt = generate_cohort(cfg)
    ds = build_dataset(recs, LEARN_SPEC, seed=7)
    params = train(ds.train, ModelConfig(epochs=epochs, seed=7), ds.stats).params
    preds = [p.risk for p in predict_batch(params, ds.test)]
    labels = [s.label for s in ds.test]
    return {
        "auroc": auroc(preds, labels),
        "oracle": oracle_auroc(gt, ds.test),
        "params": params,
        "dataset": ds,
        "seconds": time.perf_counter() - t0,
    }


@pytest.fixture(scope="session")
def high_signal_model():
    """The 200-patient high-signal model shared by the learnability checks."""
    return learn_experiment(SynthConfig.high_signal(n_patients=200, seed=7))
