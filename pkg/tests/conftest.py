import numpy as np
import pytest

from masklab.synthdata import CorpusCounts, build_corpus, load_manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small corpus shared by integration tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    counts = CorpusCounts(
        predictor_train=24, predictor_val=8, predictor_test=10, enh_train=8, enh_val=2, enh_test=3
    )
    paths = build_corpus(root, counts, seed=11)
    return {
        "dir": root,
        "predictor": load_manifest(paths["predictor"]),
        "enhancer": load_manifest(paths["enhancer"]),
    }
