"""Shared fixtures: a benchmark-shaped synthetic dataset with its trained
pipeline context (reused by the expensive end-to-end tests) and a small
dataset/model pair for cheap unit tests."""

import pytest

from cdunlearn import synth
from cdunlearn.experiment import ExperimentConfig, build_context
from cdunlearn.model import CDModel

# Benchmark-shaped fixture: 536 students x 20 items (complete matrix, 10,720
# records), 8 knowledge components. Scales calibrated so that a trained model
# reaches test AUC > 0.80 while member records remain clearly attackable.
FRCSUB_SHAPE = {"n_students": 536, "n_items": 20, "n_kcs": 8}
FRCSUB_GEN = {"seed": 7, "student_scale": 4.4, "item_scale": 2.6}


@pytest.fixture(scope="session")
def frcsub_dataset():
    return synth.generate_dataset(**FRCSUB_SHAPE, **FRCSUB_GEN)


@pytest.fixture(scope="session")
def frcsub_paths(tmp_path_factory, frcsub_dataset):
    root = tmp_path_factory.mktemp("frcsub")
    responses = root / "responses.csv"
    qmatrix = root / "qmatrix.csv"
    synth.write_dataset_csv(frcsub_dataset, str(responses), str(qmatrix))
    return str(responses), str(qmatrix), str(root)


@pytest.fixture(scope="session")
def frcsub_config(frcsub_paths):
    responses, qmatrix, root = frcsub_paths
    return ExperimentConfig(
        responses_path=responses,
        qmatrix_path=qmatrix,
        out_dir=f"{root}/out",
        unlearn_ratio=0.10,
        algorithms={"hif": {}},
        seed_data=0,
        seed_model=0,
        seed_attack=0,
    )


@pytest.fixture(scope="session")
def frcsub_ctx(frcsub_config):
    """Trained pipeline on the benchmark-shaped dataset (the slow fixture)."""
    return build_context(frcsub_config)


@pytest.fixture(scope="session")
def small_dataset():
    return synth.generate_dataset(80, 10, 4, seed=11)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    model = CDModel(
        embed_dim=8,
        ffn_hidden=(12,),
        dropout=0.0,
        max_epochs=15,
        batch_size=64,
        seed=5,
    )
    model.fit(small_dataset.records, small_dataset.qmatrix)
    return model


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", None) != "call":
                continue
            if "test_acceptance" in rep.nodeid:
                rows.append((rep.nodeid.split("::")[-1], status.upper()))
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, status in sorted(rows):
            terminalreporter.write_line(f"{status:6s}  {name}")
