import numpy as np
import pytest

import slotgate.numerics as nx

from slotgate.adapter import AdapterConfig, init_adapter_params, \
    run_bottleneck, down_project
from slotgate.decoder import SequenceLayout
from slotgate.exceptions import ConfigError, ShapeError
from slotgate.gating import (
    GatingConfig,
    ConceptAnnotation,
    GateVector,
    frame_scores,
    minmax_normalize,
    co_occurrence_gate,
    build_gate,
    apply_gate,
)


NUM_FRAMES = 5


@pytest.fixture
def rng():
    return np.random.default_rng(17)


@pytest.fixture
def layout():
    return SequenceLayout(num_frames=NUM_FRAMES, tokens_per_frame=4,
                          timestamp_lengths=[2] * NUM_FRAMES, query_length=4)


@pytest.fixture
def block(rng):

    cfg = AdapterConfig(hidden_dim=12, bottleneck_dim=6, num_slots=3,
                        num_iters=2, tokens_per_frame=4, heads=2, layers=(0, ))

    return cfg, init_adapter_params(cfg, rng)[0]


@pytest.fixture
def state(rng, layout, block):

    cfg, params = block
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    return run_bottleneck(x, layout, params, cfg)


def test_config_validation():

    with pytest.raises(ConfigError):
        GatingConfig(mode='sometimes')

    with pytest.raises(ConfigError):
        GatingConfig(source='after-up')

    assert not GatingConfig(mode='off').enabled
    assert GatingConfig(layers='last').applies_to(1, (0, 1))
    assert not GatingConfig(layers='last').applies_to(0, (0, 1))


def test_annotation_must_fall_inside_the_query():

    with pytest.raises(ShapeError):
        ConceptAnnotation(subject_index=4).validate(4)

    annotation = ConceptAnnotation(subject_index=0, object_index=None)

    assert ConceptAnnotation.from_dict(annotation.as_dict()) == annotation


# ————————————————————————————————————————————————————————— Normalization


def test_minmax_spans_zero_to_one(rng):

    normalized = minmax_normalize(rng.normal(0.0, 1.0, 7)).data

    assert normalized.min() == 0.0
    assert normalized.max() == 1.0


def test_minmax_is_affine_invariant(rng):

    for _ in range(1000):
        scores = rng.normal(0.0, 1.0, rng.integers(4, 13))
        scale = rng.uniform(0.5, 10.0)
        shift = rng.uniform(-10.0, 10.0)

        np.testing.assert_allclose(
            minmax_normalize(scale * scores + shift).data,
            minmax_normalize(scores).data, rtol=0.0, atol=1e-12)


def test_gates_of_random_scores_lie_in_unit_interval(rng):

    for _ in range(10000):
        frames = rng.integers(1, 13)
        subject = minmax_normalize(rng.normal(0.0, 3.0, frames))
        obj = minmax_normalize(rng.uniform(-50.0, 50.0, frames))

        gate = co_occurrence_gate(subject, obj).data

        assert gate.shape == (frames, )
        assert np.all(gate >= 0.0)
        assert np.all(gate <= 1.0)


def test_minmax_of_constant_or_missing_scores_is_ones():

    np.testing.assert_array_equal(minmax_normalize(np.full(4, 0.3)).data, 1.0)
    np.testing.assert_array_equal(
        minmax_normalize(np.array([0.3, 0.3 + 1e-12])).data, 1.0)
    np.testing.assert_array_equal(minmax_normalize(None, 3).data, 1.0)

    with pytest.raises(ShapeError):
        minmax_normalize(None)


def test_gate_is_a_product(rng):

    subject, obj = rng.random(4), rng.random(4)

    np.testing.assert_allclose(co_occurrence_gate(subject, obj).data,
                               subject * obj)

    with pytest.raises(ShapeError):
        co_occurrence_gate(subject, obj[:3])


# ———————————————————————————————————————————————————————————————— Scoring


@pytest.mark.parametrize('source', [
    'before-down', 'after-down', 'after-reconstruction'])
def test_gate_values_lie_in_unit_interval(state, source):

    gate = build_gate(state, ConceptAnnotation(0, 2),
                      GatingConfig(source=source))

    assert len(gate) == NUM_FRAMES
    assert np.all(gate.numpy() >= 0.0)
    assert np.all(gate.numpy() <= 1.0)
    assert gate.subject_scores.shape == (NUM_FRAMES, )


def test_absent_object_gives_the_subject_gate(state):

    gate = build_gate(state, ConceptAnnotation(1, None), GatingConfig())

    assert gate.object_scores is None
    np.testing.assert_array_equal(gate.numpy(), gate.subject_normalized.data)


def test_query_agnostic_scores_ignore_query_words(rng, layout, block):

    cfg, params = block
    x = rng.normal(0.0, 1.0, (layout.length, 12))
    edited = x.copy()
    start, end = layout.query_span
    edited[start:end] = rng.normal(0.0, 1.0, (end - start, 12))

    concepts = (rng.normal(0.0, 1.0, 12), rng.normal(0.0, 1.0, 12))
    annotation = ConceptAnnotation(0, 1)

    def scores(values, concepts):
        state = down_project(nx.Tensor(values), layout, params)
        return frame_scores(state, annotation, 'after-down', concepts)[0].data

    np.testing.assert_allclose(scores(x, concepts), scores(edited, concepts),
                               atol=1e-12)
    assert not np.allclose(scores(x, None), scores(edited, None))


def test_reconstruction_source_needs_a_reconstruction(rng, layout, block):

    _, params = block
    state = down_project(nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12))),
                         layout, params)

    with pytest.raises(ShapeError):
        frame_scores(state, ConceptAnnotation(0, 1), 'after-reconstruction')


@pytest.mark.parametrize('differentiable', [False, True])
def test_gate_scores_are_detached_unless_asked(rng, layout, block,
                                               differentiable):

    cfg, params = block
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)),
                  requires_grad=True)

    with nx.GradTape():
        state = run_bottleneck(x, layout, params, cfg)
        gate = build_gate(state, ConceptAnnotation(0, 2),
                          GatingConfig(differentiable=differentiable))

    assert gate.values.requires_grad == differentiable


# ——————————————————————————————————————————————————————————————— Applying


def test_apply_gate_scales_each_frame(state):

    before = state.reconstruction.data.copy()
    values = np.linspace(0.0, 1.0, NUM_FRAMES)

    apply_gate(state, values)

    np.testing.assert_allclose(state.reconstruction.data,
                               before * values[:, None, None])


def test_apply_gate_checks_length(state):

    with pytest.raises(ShapeError):
        apply_gate(state, np.ones(NUM_FRAMES + 1))


def test_apply_gate_records_gate_vectors(state):

    ones = nx.ones((NUM_FRAMES, ))
    gate = GateVector(None, None, ones, ones, ones)

    apply_gate(state, gate)

    assert state.gate is gate
