import numpy as np
import pytest

from disentangle_lab.data import SynthConfig, synth_generate
from disentangle_lab.training import training_pool
from disentangle_lab.models import ModelSpec

TINY_LEN = 8192


def tiny_synth(**overrides) -> SynthConfig:
    base = dict(num_speakers=5, utterances_per_speaker=6, utterance_len_range=(TINY_LEN, TINY_LEN + 4096), seed=11)
    base.update(overrides)
    return SynthConfig(**base)


def tiny_spec(**overrides) -> ModelSpec:
    base = dict(channel_multiplier=0.125, segment_len=TINY_LEN, num_speakers=4)
    base.update(overrides)
    return ModelSpec(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_generate(tiny_synth())


@pytest.fixture(scope="session")
def tiny_pool(tiny_corpus):
    return training_pool(tiny_corpus, seed=1, segment_len=TINY_LEN)


def random_batch(rng, n, segment_len=TINY_LEN, num_speakers=4):
    from disentangle_lab.data import SegmentBatch

    cond = rng.integers(0, 2, n)
    cond[:2] = [0, 1]
    spk = rng.integers(0, num_speakers, n)
    return SegmentBatch(
        segments=rng.standard_normal((n, segment_len)).astype(np.float32),
        condition=cond,
        speaker=spk,
        utterance=np.arange(n),
        offset=np.zeros(n, dtype=np.int64),
        speaker_ids=np.array([f"spk{s:03d}" for s in spk], dtype=object),
    )
