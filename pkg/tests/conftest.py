import numpy as np
import pytest
import torch

from sleepssl.dataio import SubjectRecord


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    torch.set_num_threads(1)


def make_record(labels, fs=1, subject_id="subj", seed=0):
    labels = np.asarray(labels, dtype=np.uint8)
    rng = np.random.default_rng(seed)
    epochs = rng.normal(size=(len(labels), 30 * fs)).astype(np.float32)
    return SubjectRecord(subject_id, fs, epochs, labels, channel="Fpz-Cz")


@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six synthetic subjects of 60 epochs at 10 Hz, written to disk."""
    from sleepssl.harness.synthetic import generate_synthetic
    out = tmp_path_factory.mktemp("tiny")
    manifest, records = generate_synthetic(6, 60, 300, seed=3, out_dir=out)
    return out / "manifest.json", records


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
