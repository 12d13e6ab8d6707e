"""Shared fixtures: seeded desk runs reused across test modules, plus a dual audit.

Every TrainedState built during a test is registered; after the test, each
registered state must show dual antisymmetry within 1e-10 in every round.
Acceptance tests call ``record`` and the verdicts are echoed in the terminal
summary, one line per criterion.
"""

from pathlib import Path

import pytest

from dmcr2 import training
from dmcr2.config import load_config, validate
from dmcr2.runner import run_experiment

DATA = Path(__file__).parent / "data"
MNIST = DATA / "mnist"
ANTISYMMETRY_TOL = 1e-10

_created = []
_original_init = training.TrainedState.__init__


def _tracking_init(self, *args, **kwargs):
    _original_init(self, *args, **kwargs)
    _created.append(self)


training.TrainedState.__init__ = _tracking_init


@pytest.fixture(autouse=True)
def dual_antisymmetry_audit():
    start = len(_created)
    yield
    for state in _created[start:]:
        for t, worst in state.antisymmetry:
            assert worst <= ANTISYMMETRY_TOL, f"dual antisymmetry {worst} at round {t}"


def all_trainer_states():
    return list(_created)


ACCEPTANCE = {}


def record(number, ok, detail):
    """Log one acceptance verdict; the caller still asserts ``ok``."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_collection_modifyitems(items):
    # acceptance runs last so the antisymmetry audit sees every trainer run
    items.sort(key=lambda item: item.module.__name__ == "test_acceptance")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])


@pytest.fixture(scope="session")
def desk_iid(tmp_path_factory):
    """The i.i.d. desk preset at its full T=300."""
    cfg = load_config("synthetic-desk-iid")
    return run_experiment(cfg, out=tmp_path_factory.mktemp("desk_iid"))


@pytest.fixture(scope="session")
def desk_iid_half(tmp_path_factory):
    """Same preset and seed, half the rounds."""
    cfg = load_config("synthetic-desk-iid").with_overrides()
    cfg.sections["train"]["rounds"] = 150
    return run_experiment(cfg, out=tmp_path_factory.mktemp("desk_iid_half"))


@pytest.fixture(scope="session")
def desk_dsgd(tmp_path_factory):
    cfg = load_config("synthetic-desk-iid").with_overrides()
    cfg.sections["run"]["algorithm"] = "dsgd"
    return run_experiment(cfg, out=tmp_path_factory.mktemp("desk_dsgd"))


@pytest.fixture(scope="session")
def desk_noniid(tmp_path_factory):
    cfg = load_config("synthetic-desk-noniid")
    return run_experiment(cfg, out=tmp_path_factory.mktemp("desk_noniid"))


def mnist_desk_config(out):
    """2,000-sample MNIST subset, two nodes, d=32, T=200."""
    raw = {
        "run": {"algorithm": "iid", "seed": 3, "out": str(out)},
        "data": {
            "source": "mnist",
            "train_images": str(MNIST / "train-images-idx3-ubyte.gz"),
            "train_labels": str(MNIST / "train-labels-idx1-ubyte.gz"),
            "test_images": str(MNIST / "t10k-images-idx3-ubyte.gz"),
            "test_labels": str(MNIST / "t10k-labels-idx1-ubyte.gz"),
            "limit": 0,
            "test_limit": 0,
        },
        "partition": {"mode": "iid", "n_nodes": 2},
        "topology": {"complete": True},
        "train": {
            "out_dim": 32,
            "hidden": [128],
            "gamma": 1.0,
            "rho": 0.1,
            "lr": 0.01,
            "batch_size": 1000,
            "local_epochs": 5,
            "rounds": 200,
        },
        "eval": {"heatmap_samples": 200},
    }
    return validate(raw)


@pytest.fixture(scope="session")
def mnist_desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("mnist_desk")
    return run_experiment(mnist_desk_config(out), out=out)


def random_spd(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T) / d
