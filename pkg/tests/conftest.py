from pathlib import Path

import numpy as np
import pytest

from astgan.config import asset
from astgan.data import build_vocab, load_corpus
from astgan.grammar import load_grammar

from helpers import ACCEPTANCE, TOY_GRAMMAR


@pytest.fixture(scope="session")
def jobs():
    return load_grammar(Path(asset("jobs.grammar")).read_text())


@pytest.fixture(scope="session")
def toy():
    return load_grammar(TOY_GRAMMAR)


@pytest.fixture(scope="session")
def corpus(jobs):
    return load_corpus(asset("train.jsonl"), jobs), load_corpus(asset("dev.jsonl"), jobs)


@pytest.fixture(scope="session")
def vocab(jobs, corpus):
    return build_vocab(corpus[0], jobs, 2, 40)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
