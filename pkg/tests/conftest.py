import numpy as np
import pytest
from hypothesis import settings

from lensdistill.data import CorpusSpec, generate_corpus
from lensdistill.model import ModelConfig, init_model
from lensdistill.runtime import tune_allocator
from lensdistill.seeding import component_rng

tune_allocator()

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    spec = CorpusSpec(vocab_size=16, n_hidden_states=4, min_len=8, max_len=12,
                      n_train=200, n_val=20, n_test=30, seed=3)
    return generate_corpus(spec)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=16, max_seq_len=32)


@pytest.fixture(scope="session")
def tiny_teacher_cfg():
    return ModelConfig(n_layers=4, d_model=16, n_heads=2, vocab_size=16, max_seq_len=32)


@pytest.fixture
def tiny_model(tiny_cfg):
    return init_model(tiny_cfg, component_rng(0, "tiny"))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
