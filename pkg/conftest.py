"""
共通テストフィクスチャ
小さな合成コーパスと乱数生成器
"""

import numpy as np
import pytest

from alignment import align_corpus
from sequences import SynthConfig, synth_generate

SMALL_DIMS = (4, 3, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_corpus():
    return synth_generate(SynthConfig(segments=40, dims=SMALL_DIMS), seed=3)


@pytest.fixture(scope="session")
def aligned_corpus(small_corpus):
    return align_corpus(small_corpus)
