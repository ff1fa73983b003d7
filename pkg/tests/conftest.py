import numpy as np
import pytest

from vapbc.synth import SynthConfig, generate_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Five 40 s sessions: three train, one val, one test."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(seed=3, session_duration=40.0, sessions={"train": 3, "val": 1, "test": 1})
    generate_corpus(cfg, root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
