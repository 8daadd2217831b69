import numpy as np
import pytest

import slotgate.numerics as nx

from slotgate.adapter import (
    AdapterConfig,
    AdapterParams,
    init_block_params,
    init_adapter_params,
    slot_attention_step,
    adapter_forward,
    run_bottleneck,
    orthogonal,
)
from slotgate.decoder import SequenceLayout
from slotgate.exceptions import ConfigError, ShapeError


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.fixture
def layout():
    return SequenceLayout(num_frames=3, tokens_per_frame=4,
                          timestamp_lengths=[1, 2, 3], query_length=3)


def make_cfg(**overrides):

    values = dict(hidden_dim=12, bottleneck_dim=6, num_slots=3, num_iters=2,
                  tokens_per_frame=4, heads=2, layers=(0, ))
    values.update(overrides)

    return AdapterConfig(**values)


def test_config_validation():

    with pytest.raises(ConfigError):
        make_cfg(num_slots=1)

    with pytest.raises(ConfigError):
        make_cfg(heads=4)

    with pytest.raises(ConfigError):
        make_cfg(bottleneck='mlp')

    assert make_cfg(enabled=False).insert_layers == ()
    assert make_cfg(placement='pre-decoder', layers=(1, 2)).insert_layers \
        == (0, )


def test_orthogonal_is_orthogonal(rng):

    q = orthogonal(rng, 5)

    np.testing.assert_allclose(q @ q.T, np.eye(5), atol=1e-12)


def test_slot_attention_maps_are_normalized(rng):

    params = init_block_params(rng, 12, 6, num_slots=4, heads=2)

    for _ in range(1000):
        slots = nx.Tensor(rng.normal(0.0, 1.0, (4, 6)))
        tokens = nx.Tensor(rng.normal(0.0, 2.0, (9, 6)))

        new_slots, attention, token_attention, updates = slot_attention_step(
            slots, tokens, params)

        assert new_slots.shape == (4, 6)
        assert updates.shape == (4, 6)
        assert attention.shape == (9, 4)

        np.testing.assert_allclose(attention.data.sum(axis=1), 1.0,
                                   atol=1e-9)
        np.testing.assert_allclose(token_attention.data.sum(axis=0), 1.0,
                                   atol=1e-6)


def test_slot_attention_step_checks_widths(rng):

    params = init_block_params(rng, 12, 6, num_slots=4)

    with pytest.raises(ShapeError):
        slot_attention_step(nx.zeros((4, 6)), nx.zeros((9, 5)), params)


def test_identity_at_init(rng, layout):

    cfg = make_cfg()
    params = init_adapter_params(cfg, rng)[0]
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    out, state = adapter_forward(x, layout, params, cfg)

    np.testing.assert_array_equal(out.data, x.data)
    assert state.reconstruction.shape == (3, 4, 6)


def test_reconstruction_rows_are_convex_slot_mixtures(rng, layout):

    cfg = make_cfg(num_slots=3, reconstruction_map='slot-axis')
    params = init_adapter_params(cfg, rng)[0]
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    state = run_bottleneck(x, layout, params, cfg)

    slots = state.final_slots.data
    low, high = slots.min(axis=1), slots.max(axis=1)

    for frame in range(3):
        rebuilt = state.reconstruction.data[frame]

        assert np.all(rebuilt >= low[frame] - 1e-12)
        assert np.all(rebuilt <= high[frame] + 1e-12)


def test_single_slot_reconstruction_is_the_slot(rng, layout):

    cfg = make_cfg(num_slots=2, reconstruction_map='slot-axis')
    params = init_adapter_params(cfg, rng)[0]

    # One slot.
    params.slot_init = nx.Tensor(params.slot_init.data[:1])
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    state = run_bottleneck(x, layout, params, cfg)

    np.testing.assert_allclose(state.final_attention.data, 1.0, atol=1e-12)
    np.testing.assert_allclose(
        state.reconstruction.data,
        np.broadcast_to(state.final_slots.data, (3, 4, 6)), atol=1e-12)


def test_token_axis_reconstruction_matches_explicit_sums(rng, layout):

    cfg = make_cfg()
    params = init_adapter_params(cfg, rng)[0]
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    state = run_bottleneck(x, layout, params, cfg)

    weights = state.final_token_attention.data
    slots = state.final_slots.data
    expected = np.zeros((3, 4, 6))

    for frame in range(3):
        for token in range(4):
            for slot in range(3):
                expected[frame, token] += weights[frame, token, slot] \
                    * slots[frame, slot]

    np.testing.assert_allclose(state.reconstruction.data, expected,
                               rtol=0.0, atol=1e-12)


def test_frames_are_grouped_independently(rng, layout):

    cfg = make_cfg()
    params = init_adapter_params(cfg, rng)[0]
    params.w_up = nx.Tensor(rng.normal(0.0, 0.5, (6, 12)))
    x = rng.normal(0.0, 1.0, (layout.length, 12))

    out, state = adapter_forward(nx.Tensor(x), layout, params, cfg)

    for zeroed, (start, end) in enumerate(layout.frame_spans):
        blanked = x.copy()
        blanked[start:end] = 0.0

        other, other_state = adapter_forward(nx.Tensor(blanked), layout,
                                             params, cfg)

        for frame, (first, last) in enumerate(layout.frame_spans):
            if frame == zeroed:
                continue

            np.testing.assert_allclose(other.data[first:last],
                                       out.data[first:last], atol=1e-12)
            np.testing.assert_allclose(other_state.reconstruction.data[frame],
                                       state.reconstruction.data[frame],
                                       atol=1e-12)

        np.testing.assert_allclose(other.data[layout.text_index],
                                   out.data[layout.text_index], atol=1e-12)


def test_open_gate_is_the_ungated_block(rng, layout):

    cfg = make_cfg()
    params = init_adapter_params(cfg, rng)[0]
    params.w_up = nx.Tensor(rng.normal(0.0, 0.5, (6, 12)))
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    ungated, _ = adapter_forward(x, layout, params, cfg)
    gated, _ = adapter_forward(x, layout, params, cfg, gate=np.ones(3))

    np.testing.assert_array_equal(gated.data, ungated.data)


def test_closed_gate_leaves_only_text_residuals(rng, layout):

    cfg = make_cfg()
    params = init_adapter_params(cfg, rng)[0]
    params.w_up = nx.Tensor(rng.normal(0.0, 0.5, (6, 12)))
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    out, state = adapter_forward(x, layout, params, cfg, gate=np.zeros(3))

    np.testing.assert_array_equal(out.data[layout.visual_index],
                                  x.data[layout.visual_index])
    np.testing.assert_allclose(
        out.data[layout.text_index],
        x.data[layout.text_index]
        + state.text_down.data @ params.w_up.data, atol=1e-12)


def test_text_rows_pass_through_with_a_zero_text_projection(rng, layout):

    cfg = make_cfg()
    params = init_adapter_params(cfg, rng)[0]
    params.w_up = nx.Tensor(rng.normal(0.0, 0.5, (6, 12)))
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    out, _ = adapter_forward(x, layout, params, cfg, gate=np.zeros(3))

    # A zero gate removes the visual residual; text rows keep theirs.
    np.testing.assert_allclose(out.data[layout.visual_index],
                               x.data[layout.visual_index], atol=1e-12)
    assert not np.allclose(out.data[layout.text_index],
                           x.data[layout.text_index])


def test_pre_decoder_placement_replaces_visual_rows(rng, layout):

    cfg = make_cfg(placement='pre-decoder')
    params = init_adapter_params(cfg, rng)[0]
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    out, _ = adapter_forward(x, layout, params, cfg)

    np.testing.assert_array_equal(out.data[layout.visual_index], 0.0)
    np.testing.assert_array_equal(out.data[layout.text_index],
                                  x.data[layout.text_index])


def test_self_attention_bottleneck_has_no_slots(rng, layout):

    cfg = make_cfg(bottleneck='self-attention')
    params = init_adapter_params(cfg, rng)[0]
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    state = run_bottleneck(x, layout, params, cfg)

    assert not state.has_slots
    assert state.reconstruction.shape == (3, 4, 6)


def test_cross_attention_reconstruction_has_its_own_weights(rng, layout):

    cfg = make_cfg(reconstruction='cross-attention')
    params = init_adapter_params(cfg, rng)[0]

    assert params.w_rq is not None

    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))
    state = run_bottleneck(x, layout, params, cfg)

    assert state.reconstruction.shape == (3, 4, 6)


def test_shared_projections_are_one_tensor(rng):

    cfg = make_cfg(layers=(0, 1), share_projections=True)
    blocks = init_adapter_params(cfg, rng)

    assert blocks[0].w_down is blocks[1].w_down
    assert blocks[0].w_up is blocks[1].w_up

    names = set(blocks[0].to_dict('adapter.0', 'adapter.shared'))

    assert 'adapter.shared.w_down' in names
    assert 'adapter.0.w_down' not in names


def test_params_round_trip_through_names(rng):

    params = init_block_params(rng, 12, 6, num_slots=3, heads=2)
    tensors = params.to_dict('adapter.2')

    rebuilt = AdapterParams.from_dict(tensors, 'adapter.2', heads=2)

    assert rebuilt.heads == 2
    assert rebuilt.w_rq is None
    assert rebuilt.slot_init is params.slot_init


def test_gradients_reach_slot_parameters(rng, layout):

    cfg = make_cfg()
    params = init_adapter_params(cfg, rng)[0]
    params.w_up = nx.Tensor(rng.normal(0.0, 0.5, (6, 12)), requires_grad=True)
    x = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))
    weights = nx.Tensor(rng.normal(0.0, 1.0, (layout.length, 12)))

    def loss(slot_init):
        params.slot_init = slot_init
        out, _ = adapter_forward(x, layout, params, cfg)
        return nx.sum(nx.mul(out, weights))

    analytic = nx.analytic_gradient(
        loss, nx.Tensor(params.slot_init.data.copy(), requires_grad=True))
    numeric = nx.finite_difference(
        loss, nx.Tensor(params.slot_init.data.copy(), requires_grad=True))

    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)
    assert np.abs(analytic).max() > 1e-6
