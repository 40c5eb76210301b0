import os
import sys

import numpy as np
import pytest

# Add parent directory to path so the flat modules import
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import ClueConfig, DatasetConfig, SepConfig  # noqa: E402


@pytest.fixture
def tiny_sep():
    return SepConfig(n_channels=8, kernel_size=4, stride=2, chunk_size=6, n_repeats=1, heads=2, ff_dim=8)


@pytest.fixture
def eval_sep():
    # long chunks keep full-length extraction cheap
    return SepConfig(n_channels=8, kernel_size=16, stride=8, chunk_size=50, n_repeats=1, heads=2, ff_dim=8)


@pytest.fixture
def tiny_clue():
    return ClueConfig(embed_dim=8, text_dim=16, hash_vocab_size=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_records(tmp_path):
    """A 4-speaker synthetic corpus with short utterances."""
    from toy_corpus import synth_toy_corpus

    cfg = DatasetConfig(min_utt_s=3.2, max_utt_s=3.6)
    _, records = synth_toy_corpus(str(tmp_path / "corpus"), n_speakers=4, utts_per_speaker=6, seed=3, cfg=cfg)
    return records
