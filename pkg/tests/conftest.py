import numpy as np
import pytest

from storydiffuse.config import toy_config
from storydiffuse.dataset import Vocab, generate_corpus, grammar_vocab


def tiny_config(seed: int = 0, **overrides):
    """Few stories, one narrow block: enough to exercise every code path quickly."""
    base = {
        "corpus.n_train": 12,
        "corpus.n_val": 4,
        "corpus.n_test": 6,
        "model.d_model": 8,
        "model.d_feat": 16,
        "model.n_blocks": 1,
        "model.heads": 2,
        "model.ff_mult": 2,
        "train.epochs": 1,
        "train.batch_size": 4,
        "train.dtype": "float64",
    }
    base.update(overrides)
    return toy_config("didemo-like", seed=seed, **base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def vocab():
    return Vocab(grammar_vocab())


@pytest.fixture
def tiny_corpus(tiny_cfg):
    return generate_corpus(tiny_cfg.corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
