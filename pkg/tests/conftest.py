import numpy as np
import pytest

from slotgate.adapter import AdapterConfig
from slotgate.decoder import DecoderConfig, Vocabulary, init_model
from slotgate.distill import DistillConfig
from slotgate.gating import GatingConfig
from slotgate.synthdata import SynthConfig, generate
from slotgate.trainer import TrainConfig


def pytest_addoption(parser):

    parser.addoption('--runslow', action='store_true', default=False,
                     help='run slow training-based tests')


def pytest_configure(config):

    config.addinivalue_line('markers', 'slow: training-based, needs --runslow')


def pytest_collection_modifyitems(config, items):

    if config.getoption('--runslow'):
        return

    skip_slow = pytest.mark.skip(reason='needs --runslow')

    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


# ———————————————————————————————————————————————————————————— Tiny setup


TINY_SYNTH = dict(
    num_train=12,
    num_eval=6,
    frames=4,
    tokens_per_frame=4,
    hidden_dim=16,
    teacher_dim=8,
    entity_count=6,
    style_rank=4,
    min_window=2,
)

TINY_DECODER = dict(
    num_layers=2,
    hidden_dim=16,
    heads=2,
    ffn_dim=32,
    lowrank_layers=(1, ),
    lowrank_rank=2,
    lowrank_alpha=4.0,
    max_positions=128,
)

TINY_ADAPTER = dict(
    hidden_dim=16,
    bottleneck_dim=8,
    num_slots=4,
    num_iters=2,
    tokens_per_frame=4,
    heads=2,
    layers=(0, ),
)


@pytest.fixture
def synth_cfg():
    return SynthConfig(**TINY_SYNTH)


@pytest.fixture
def tiny_dataset(synth_cfg):
    return generate(synth_cfg, 'A', 6, seed=0)


@pytest.fixture
def vocab():
    return Vocabulary()


@pytest.fixture
def make_model(vocab):
    ''' Factory of tiny models; keyword arguments override the adapter
        config, `gating` and `decoder` dicts the other two. '''

    def factory(dataset=None, seed=0, gating=None, decoder=None, **adapter):

        adapter_cfg = AdapterConfig(**dict(TINY_ADAPTER, **adapter))
        decoder_cfg = DecoderConfig(**dict(TINY_DECODER, **(decoder or {})))
        gating_cfg = GatingConfig(**(gating or {'mode': 'off'}))

        return init_model(
            vocab, decoder_cfg, adapter_cfg, gating_cfg,
            np.random.default_rng(seed),
            concept_table=None if dataset is None else dataset.concepts)

    return factory


@pytest.fixture
def distill_cfg():
    return DistillConfig(weight=0.1)


@pytest.fixture
def train_cfg():
    return TrainConfig(steps=3, batch_size=2, learning_rate=1e-2)


@pytest.fixture
def randomize():
    ''' Fill a zero-initialized tensor so gradients reach what it gates. '''

    def fill(tensor, rng, scale=0.3):
        tensor.data = rng.normal(0.0, scale, tensor.shape)
        return tensor

    return fill
