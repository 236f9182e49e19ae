import numpy as np
import pytest
import torch

from emoface import binding, losses, metrics, seqio

torch.set_num_threads(1)

# pass/fail lines recorded by the acceptance tests, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """128-sample corpus used by the unit-level training tests."""
    root = tmp_path_factory.mktemp("small_corpus")
    return seqio.generate_corpus(root, seed=7, n_samples=128)


@pytest.fixture(scope="session")
def small_bank(small_corpus):
    bank, log = binding.train_binding(small_corpus, epochs=20, seed=3, warmup_steps=120)
    bank._train_log = log
    return bank


@pytest.fixture(scope="session")
def small_expert(small_corpus):
    expert, log = losses.train_sync_expert(small_corpus, seed=3, steps=250)
    expert._train_log = log
    return expert


@pytest.fixture(scope="session")
def small_probe(small_corpus):
    probe, _ = metrics.train_probe(small_corpus, seed=3, steps=400)
    return probe
