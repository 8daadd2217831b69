"""
Entity bottleneck adapter.

The interleaved sequence is projected down to a small width, each frame's
visual tokens are grouped by iterative slot attention, tokens are rebuilt
from the final slots and the result goes back up through a zero-initialized
projection added as a residual.

Frames are processed as one batch: visual tokens are held as (T, N, d) and
every operation acts on each frame independently.
"""

import logging
import dataclasses

from typing import Optional

import numpy as np

from scipy.linalg import qr

import slotgate.numerics as nx

from slotgate.constants import (
    TOKEN_AXIS_EPSILON,
    BOTTLENECKS,
    PLACEMENTS,
    RECONSTRUCTIONS,
    RECONSTRUCTION_MAPS,
)
from slotgate.decorators import ldebug
from slotgate.exceptions import ConfigError, ShapeError
from slotgate.gating import GateVector, apply_gate
from slotgate.strings import layers_to_string


LOGGER = logging.getLogger(__name__)


# ————————————————————————————————————————————————————————————————— Config


@dataclasses.dataclass(frozen=True)
class AdapterConfig:
    hidden_dim: int = 64
    bottleneck_dim: int = 16
    num_slots: int = 4
    num_iters: int = 3
    tokens_per_frame: int = 16
    heads: int = 2
    layers: tuple = (0, 1)
    enabled: bool = True
    share_projections: bool = False
    bottleneck: str = 'slot'
    placement: str = 'decoder'
    reconstruction: str = 'attention-reuse'
    reconstruction_map: str = 'token-axis'

    def __post_init__(self):

        if self.hidden_dim < 1:
            raise ConfigError('adapter.hidden_dim', 'must be positive.')

        if not 1 <= self.bottleneck_dim < self.hidden_dim:
            raise ConfigError('adapter.bottleneck_dim',
                              'must be positive and below hidden_dim '
                              '({0}).'.format(self.hidden_dim))

        if self.num_slots < 2:
            raise ConfigError('adapter.num_slots', 'must be at least 2.')

        if self.num_iters < 1:
            raise ConfigError('adapter.num_iters', 'must be at least 1.')

        if self.tokens_per_frame < 1:
            raise ConfigError('adapter.tokens_per_frame', 'must be positive.')

        if self.heads < 1 or self.bottleneck_dim % self.heads:
            raise ConfigError('adapter.heads',
                              'must divide bottleneck_dim ({0}).'.format(
                                  self.bottleneck_dim))

        if any(layer < 0 for layer in self.layers):
            raise ConfigError('adapter.layers', 'negative layer index.')

        for name, choices in (
            ('bottleneck', BOTTLENECKS),
            ('placement', PLACEMENTS),
            ('reconstruction', RECONSTRUCTIONS),
            ('reconstruction_map', RECONSTRUCTION_MAPS),
        ):
            if getattr(self, name) not in choices:
                raise ConfigError('adapter.{0}'.format(name),
                                  'must be one of {0}.'.format(
                                      ', '.join(choices)))

    @property
    def insert_layers(self):
        ''' Layers hosting an adapter; empty when disabled. With the
            pre-decoder placement a single block runs before layer 0. '''

        if not self.enabled:
            return ()

        if self.placement == 'pre-decoder':
            return (0, )

        return tuple(sorted(self.layers))

    def describe(self):

        return 'adapter {0} d={1} slots={2} iters={3} heads={4} on {5}'.format(
            self.bottleneck, self.bottleneck_dim, self.num_slots,
            self.num_iters, self.heads,
            layers_to_string(self.insert_layers)
            if self.placement == 'decoder' else 'input')


# ———————————————————————————————————————————————————————————————— Params


@dataclasses.dataclass
class AdapterParams:
    ''' Weights of one adapter block. `w_up` starts at zero. '''

    w_down: nx.Tensor
    w_up: nx.Tensor
    w_q: nx.Tensor
    w_k: nx.Tensor
    w_v: nx.Tensor
    slot_init: nx.Tensor
    gru_w: nx.Tensor
    gru_u: nx.Tensor
    gru_b: nx.Tensor
    heads: int = 1
    # cross-attention reconstruction only.
    w_rq: Optional[nx.Tensor] = None
    w_rk: Optional[nx.Tensor] = None
    w_rv: Optional[nx.Tensor] = None

    SHARED_NAMES = ('w_down', 'w_up')

    @property
    def bottleneck_dim(self):
        return self.w_q.shape[0]

    @property
    def num_slots(self):
        return self.slot_init.shape[0]

    def tensor_fields(self):

        return [field.name for field in dataclasses.fields(self)
                if field.name != 'heads'
                and getattr(self, field.name) is not None]

    def to_dict(self, prefix, shared_prefix=None):
        ''' Named tensors. With :param:`shared_prefix`, down and up
            projections are named once for all layers. '''

        tensors = {}

        for name in self.tensor_fields():
            if shared_prefix is not None and name in self.SHARED_NAMES:
                key = '{0}.{1}'.format(shared_prefix, name)

            else:
                key = '{0}.{1}'.format(prefix, name)

            tensors[key] = getattr(self, name)

        return tensors

    @classmethod
    def from_dict(cls, tensors, prefix, heads, shared_prefix=None):

        kwargs = {'heads': heads}

        for field in dataclasses.fields(cls):
            if field.name == 'heads':
                continue

            if shared_prefix is not None and field.name in cls.SHARED_NAMES:
                key = '{0}.{1}'.format(shared_prefix, field.name)

            else:
                key = '{0}.{1}'.format(prefix, field.name)

            if key in tensors:
                kwargs[field.name] = tensors[key]

            elif field.default is dataclasses.MISSING:
                raise ShapeError('missing adapter tensor “{0}”.'.format(key))

        return cls(**kwargs)


def orthogonal(rng, size):
    ''' Random orthogonal matrix, sign-fixed so the draw is unique. '''

    q, r = qr(rng.standard_normal((size, size)))

    return q * np.sign(np.diag(r))


def init_block_params(rng, hidden_dim, bottleneck_dim, num_slots, heads=1,
                      cross_attention=False):
    ''' Fresh adapter weights: normal projections (std 1/√fan-in), slot
        queries from N(0, 1/d), GRU input weights normal, recurrent weights
        orthogonal per gate, zero biases and a zero up projection. '''

    d = bottleneck_dim
    std = 1.0 / np.sqrt(d)

    def param(array):
        return nx.Tensor(array, requires_grad=True)

    params = AdapterParams(
        w_down=param(rng.normal(0.0, 1.0 / np.sqrt(hidden_dim),
                                (hidden_dim, d))),
        w_up=param(np.zeros((d, hidden_dim))),
        w_q=param(rng.normal(0.0, std, (d, d))),
        w_k=param(rng.normal(0.0, std, (d, d))),
        w_v=param(rng.normal(0.0, std, (d, d))),
        slot_init=param(rng.normal(0.0, std, (num_slots, d))),
        gru_w=param(rng.normal(0.0, std, (d, 3 * d))),
        gru_u=param(np.concatenate(
            [orthogonal(rng, d) for _ in range(3)], axis=1)),
        gru_b=param(np.zeros(3 * d)),
        heads=heads,
    )

    if cross_attention:
        params.w_rq = param(rng.normal(0.0, std, (d, d)))
        params.w_rk = param(rng.normal(0.0, std, (d, d)))
        params.w_rv = param(rng.normal(0.0, std, (d, d)))

    return params


def init_adapter_params(cfg, rng):
    ''' One :class:`AdapterParams` per insertion layer, keyed by layer.
        Shared projections are the same tensor objects in every block. '''

    blocks = {}

    for layer in cfg.insert_layers:
        blocks[layer] = init_block_params(
            rng, cfg.hidden_dim, cfg.bottleneck_dim, cfg.num_slots,
            heads=cfg.heads,
            cross_attention=cfg.reconstruction == 'cross-attention')

    if cfg.share_projections and blocks:
        first = blocks[min(blocks)]

        for block in blocks.values():
            block.w_down = first.w_down
            block.w_up = first.w_up

    LOGGER.debug('Initialized {0}.'.format(cfg.describe()))

    return blocks


# ————————————————————————————————————————————————————————————————— State


@dataclasses.dataclass
class BottleneckState:
    ''' Everything one adapter block computes for one sequence.

        Per-iteration lists hold (T, ·, ·) tensors; `slots[0]` is the
        initial slot state, `slots[i]` the state after iteration i.
    '''

    layout: object
    x: nx.Tensor
    w_down: nx.Tensor
    x_down: nx.Tensor
    visual_down: nx.Tensor
    text_down: nx.Tensor
    slots: list = dataclasses.field(default_factory=list)
    scores: list = dataclasses.field(default_factory=list)
    attention: list = dataclasses.field(default_factory=list)
    token_attention: list = dataclasses.field(default_factory=list)
    updates: list = dataclasses.field(default_factory=list)
    reconstruction: Optional[nx.Tensor] = None
    gate: Optional[GateVector] = None

    @property
    def num_frames(self):
        return self.visual_down.shape[0]

    @property
    def final_slots(self):
        return self.slots[-1] if self.slots else None

    @property
    def final_attention(self):
        ''' Slot-axis map A of the last iteration, (T, N, N_s). '''

        return self.attention[-1] if self.attention else None

    @property
    def final_token_attention(self):
        ''' Token-axis map Â of the last iteration, (T, N, N_s). '''

        return self.token_attention[-1] if self.token_attention else None

    @property
    def has_slots(self):
        return bool(self.attention)


# —————————————————————————————————————————————————————————————— Operations


def down_project(x, layout, params):
    ''' `X_down = X·W_down`, split into visual (T, N, d) and text rows. '''

    if x.ndim != 2 or x.shape[1] != params.w_down.shape[0]:
        raise ShapeError('adapter input width {0} differs from {1}.'.format(
            x.shape[-1], params.w_down.shape[0]))

    if x.shape[0] != layout.length:
        raise ShapeError('sequence length {0} differs from layout {1}.'.format(
            x.shape[0], layout.length))

    x_down = nx.matmul(x, params.w_down)
    d = x_down.shape[1]

    visual = nx.reshape(
        nx.take_rows(x_down, layout.visual_index),
        (layout.num_frames, layout.tokens_per_frame, d))

    return BottleneckState(
        layout=layout,
        x=x,
        w_down=params.w_down,
        x_down=x_down,
        visual_down=visual,
        text_down=nx.take_rows(x_down, layout.text_index),
    )


def split_heads(x, heads):
    ''' (T, R, d) → (T, H, R, d/H). '''

    frames, rows, width = x.shape

    return nx.transpose(
        nx.reshape(x, (frames, rows, heads, width // heads)), (0, 2, 1, 3))


def merge_heads(x):
    ''' (T, H, R, d/H) → (T, R, d). '''

    frames, heads, rows, width = x.shape

    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)),
                      (frames, rows, heads * width))


def gru_cell(hidden, inputs, params):
    ''' Standard GRU: update gate z, reset gate r, tanh candidate. '''

    d = hidden.shape[-1]

    projected = nx.add(
        nx.matmul(inputs, params.gru_w),
        nx.broadcast_to(params.gru_b, inputs.shape[:-1] + (3 * d, )))
    recurrent = nx.matmul(hidden, params.gru_u)

    def part(tensor, index):
        return nx.slice_(tensor, (Ellipsis, slice(index * d, (index + 1) * d)))

    update = nx.sigmoid(nx.add(part(projected, 0), part(recurrent, 0)))
    reset = nx.sigmoid(nx.add(part(projected, 1), part(recurrent, 1)))
    candidate = nx.tanh(nx.add(part(projected, 2),
                               nx.mul(reset, part(recurrent, 2))))

    # h' = (1 − z)·n + z·h
    return nx.add(candidate, nx.mul(update, nx.sub(hidden, candidate)))


def attend_slots(slots, keys, values, params):
    ''' One competitive attention pass of batched slots over batched
        tokens. :returns: `(scores, A, Â, Z)`; maps are head-averaged. '''

    heads = params.heads
    head_dim = slots.shape[-1] // heads

    queries = split_heads(nx.matmul(slots, params.w_q), heads)

    # M = K·Qᵀ/√d_h, (T, H, N, N_s)
    scores = nx.scale(nx.matmul(keys, nx.transpose(queries)),
                      1.0 / np.sqrt(head_dim))

    attention = nx.softmax(scores, axis=-1)

    column_sums = nx.shift(nx.sum(attention, axis=-2, keepdims=True),
                           TOKEN_AXIS_EPSILON)
    token_attention = nx.div(attention,
                             nx.broadcast_to(column_sums, attention.shape))

    updates = merge_heads(nx.matmul(nx.transpose(token_attention), values))

    return (
        nx.mean(scores, axis=1),
        nx.mean(attention, axis=1),
        nx.mean(token_attention, axis=1),
        updates,
    )


def _step(slots, keys, values, params):

    scores, attention, token_attention, updates = attend_slots(
        slots, keys, values, params)

    return (gru_cell(slots, updates, params),
            scores, attention, token_attention, updates)


def _keys_values(tokens, params):

    return (split_heads(nx.matmul(tokens, params.w_k), params.heads),
            split_heads(nx.matmul(tokens, params.w_v), params.heads))


def slot_attention_step(slots, frame_tokens, params):
    ''' One slot-attention iteration on a single frame.

        :param slots: (N_s, d) tensor.
        :param frame_tokens: (N, d) tensor.
        :returns: `(slots', A, Â, Z)` with A and Â of shape (N, N_s).
    '''

    if slots.ndim != 2 or frame_tokens.ndim != 2 \
            or slots.shape[1] != frame_tokens.shape[1]:
        raise ShapeError('slot_attention_step: slots {0}, tokens {1}.'.format(
            slots.shape, frame_tokens.shape))

    batched_slots = nx.reshape(slots, (1, ) + slots.shape)
    keys, values = _keys_values(
        nx.reshape(frame_tokens, (1, ) + frame_tokens.shape), params)

    new_slots, _, attention, token_attention, updates = _step(
        batched_slots, keys, values, params)

    def unbatch(tensor):
        return nx.reshape(tensor, tensor.shape[1:])

    return (unbatch(new_slots), unbatch(attention),
            unbatch(token_attention), unbatch(updates))


def run_slot_attention(state, params, cfg):
    ''' Iterate slot attention I times on every frame, each frame starting
        from the shared slot queries. Fills the per-iteration lists of
        :param:`state` and returns it. '''

    frames, _, d = state.visual_down.shape

    keys, values = _keys_values(state.visual_down, params)
    slots = nx.broadcast_to(params.slot_init, (frames, params.num_slots, d))

    state.slots = [slots]

    for _ in range(cfg.num_iters):
        slots, scores, attention, token_attention, updates = _step(
            slots, keys, values, params)

        state.slots.append(slots)
        state.scores.append(scores)
        state.attention.append(attention)
        state.token_attention.append(token_attention)
        state.updates.append(updates)

    assert ldebug('Slot attention over {0} frames, {1} iterations.',
                  state.num_frames, len(state.attention))

    return state


def run_self_attention(state, params):
    ''' Bottleneck variant without slots: per-frame multi-head self
        attention among the down-projected visual tokens. '''

    heads = params.heads
    tokens = state.visual_down
    head_dim = tokens.shape[-1] // heads

    queries = split_heads(nx.matmul(tokens, params.w_q), heads)
    keys, values = _keys_values(tokens, params)

    weights = nx.softmax(nx.scale(
        nx.matmul(queries, nx.transpose(keys)), 1.0 / np.sqrt(head_dim)),
        axis=-1)

    state.reconstruction = merge_heads(nx.matmul(weights, values))

    return state


def reconstruct_tokens(state, reconstruction_map='token-axis'):
    ''' Rebuild visual tokens as attention-weighted mixtures of the final
        slots, without new parameters.

        :param reconstruction_map: `token-axis` (default) weights slots by
            Â, each slot spreading its unit mass over the tokens;
            `slot-axis` uses A, whose rows sum to one, so tokens become
            convex slot mixtures.
    '''

    if not state.has_slots:
        raise ShapeError('reconstruct_tokens needs slot attention maps.')

    if reconstruction_map == 'slot-axis':
        weights = state.final_attention

    elif reconstruction_map == 'token-axis':
        weights = state.final_token_attention

    else:
        raise ConfigError('adapter.reconstruction_map',
                          'unknown map {0!r}.'.format(reconstruction_map))

    state.reconstruction = nx.matmul(weights, state.final_slots)

    return state


def reconstruct_cross_attention(state, params):
    ''' Reconstruction variant with learned token→slot cross attention. '''

    slots = state.final_slots
    d = slots.shape[-1]

    queries = nx.matmul(state.visual_down, params.w_rq)
    keys = nx.matmul(slots, params.w_rk)

    weights = nx.softmax(nx.scale(
        nx.matmul(queries, nx.transpose(keys)), 1.0 / np.sqrt(d)), axis=-1)

    state.reconstruction = nx.matmul(weights, nx.matmul(slots, params.w_rv))

    return state


def run_bottleneck(x, layout, params, cfg):
    ''' Down projection, grouping and reconstruction, ungated. '''

    state = down_project(x, layout, params)

    if cfg.bottleneck == 'self-attention':
        return run_self_attention(state, params)

    run_slot_attention(state, params, cfg)

    if cfg.reconstruction == 'cross-attention':
        return reconstruct_cross_attention(state, params)

    return reconstruct_tokens(state, cfg.reconstruction_map)


def adapter_forward(x, layout, params, cfg, gate=None):
    ''' Residual adapter block.

        `X_out = X + [X̃_vis ⊙ g ; X_txt]·W_up`, rows back in sequence order.
        With the pre-decoder placement, visual rows are replaced by
        `X̃_vis·W_up` instead and text rows pass through.

        :param gate: `None`, a :class:`GateVector`, or a callable taking
            the :class:`BottleneckState` and returning one (so gates can
            use the block's own features).
        :returns: `(x_out, state)`.
    '''

    state = run_bottleneck(x, layout, params, cfg)

    if callable(gate):
        gate = gate(state)

    if gate is not None:
        apply_gate(state, gate)

    frames, tokens, d = state.reconstruction.shape
    visual = nx.reshape(state.reconstruction, (frames * tokens, d))

    if cfg.placement == 'pre-decoder':
        combined = nx.concat([
            nx.matmul(visual, params.w_up),
            nx.take_rows(x, layout.text_index),
        ], axis=0)

        return nx.take_rows(combined, layout.adapter_order), state

    combined = nx.take_rows(
        nx.concat([visual, state.text_down], axis=0), layout.adapter_order)

    return nx.add(x, nx.matmul(combined, params.w_up)), state
