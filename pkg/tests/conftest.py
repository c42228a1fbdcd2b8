import numpy as np
import pytest

from microseg.pipeline import RunConfig, run_pipeline
from microseg.rnn import TrainConfig, train
from microseg.synth import SynthConfig, generate_coefficients, generate_population


@pytest.fixture(scope="session")
def small_dataset():
    cfg = SynthConfig(n_customers=120, k_classes=12, n_nonzero_rows=8, seed=3)
    coeffs = generate_coefficients(cfg.k_classes, cfg.n_nonzero_rows, 4)
    return generate_population(cfg, coeffs)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    return train(small_dataset, TrainConfig(epochs=15, seed=5))


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """Full default pipeline at master seed 42, shared by acceptance and artifact tests."""
    out = tmp_path_factory.mktemp("run42")
    report, timing = run_pipeline(RunConfig(seed=42), out)
    return out, report, timing


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def record_criterion():
    def record(cid, name, value, threshold, passed):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {cid:>2} {name}: {value} (threshold {threshold})"
        ACCEPTANCE_LINES[cid] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[cid])
