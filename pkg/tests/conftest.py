import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from multimodn.data import SynthModality, SynthSpec, SynthTask, generate_synthetic, minmax_normalize  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def make_small_spec():
    return SynthSpec(
        n_samples=120,
        modalities=(SynthModality("m1", 5), SynthModality("m2", 3), SynthModality("m3", 4)),
        tasks=(SynthTask("a", "binary"), SynthTask("r", "regression")),
        seed=3,
    )


def make_small_ds():
    ds, _ = minmax_normalize(generate_synthetic(make_small_spec()))
    return ds


def make_holey_ds():
    """Small dataset with a random pattern of missing modalities."""
    ds = make_small_ds()
    rng = np.random.default_rng(11)
    for name in ds.manifest.modality_names:
        drop = rng.random(len(ds)) < 0.3
        ds.features[name][drop] = np.nan
    return ds


@pytest.fixture
def small_spec():
    return make_small_spec()


@pytest.fixture
def small_ds():
    return make_small_ds()


@pytest.fixture
def holey_ds():
    return make_holey_ds()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
