"""
Entity-to-evidence gating.

Each frame is scored by the cosine between its mean visual feature and the
query's subject and object concept vectors. Scores are min-max normalized
over the clip and multiplied into one gate per frame, which scales the
frame's reconstructed tokens before the up projection.

A concept missing from the query scores all-ones, the identity of the
product, so an absent object reduces the gate to the subject score.
"""

import logging
import dataclasses

from typing import Optional

import numpy as np

import slotgate.numerics as nx

from slotgate.constants import (
    GATING_MODES,
    GATING_SOURCES,
    LAYER_SELECTIONS,
    MINMAX_DEGENERATE_RANGE,
)
from slotgate.exceptions import ConfigError, ShapeError


LOGGER = logging.getLogger(__name__)


# ————————————————————————————————————————————————————————————————— Classes


@dataclasses.dataclass(frozen=True)
class GatingConfig:
    mode: str = 'query-dependent'
    source: str = 'after-down'
    layers: str = 'all'
    differentiable: bool = False

    def __post_init__(self):

        for name, choices in (
            ('mode', GATING_MODES),
            ('source', GATING_SOURCES),
            ('layers', LAYER_SELECTIONS),
        ):
            if getattr(self, name) not in choices:
                raise ConfigError('gating.{0}'.format(name),
                                  'must be one of {0}.'.format(
                                      ', '.join(choices)))

    @property
    def enabled(self):
        return self.mode != 'off'

    def applies_to(self, layer, insert_layers):

        if not self.enabled or layer not in insert_layers:
            return False

        return self.layers == 'all' or layer == max(insert_layers)


@dataclasses.dataclass(frozen=True)
class ConceptAnnotation:
    ''' Positions of the subject and object words inside the query span;
        `None` when the query has no such concept. '''

    subject_index: Optional[int] = None
    object_index: Optional[int] = None

    def validate(self, query_length):

        for name in ('subject_index', 'object_index'):
            index = getattr(self, name)

            if index is not None and not 0 <= index < query_length:
                raise ShapeError('{0} {1} is outside the query span of {2} '
                                 'tokens.'.format(name, index, query_length))

        return self

    def as_dict(self):
        return {'subject': self.subject_index, 'object': self.object_index}

    @classmethod
    def from_dict(cls, data):
        return cls(subject_index=data.get('subject'),
                   object_index=data.get('object'))


@dataclasses.dataclass
class GateVector:
    ''' Raw and normalized per-frame concept scores and their product.
        Missing concepts have `None` raw scores. '''

    subject_scores: Optional[nx.Tensor]
    object_scores: Optional[nx.Tensor]
    subject_normalized: nx.Tensor
    object_normalized: nx.Tensor
    values: nx.Tensor

    def __len__(self):
        return self.values.shape[0]

    def numpy(self):
        return self.values.data


# ——————————————————————————————————————————————————————————————— Functions


def frame_features(state, source):
    ''' Per-frame mean visual feature for :param:`source`. '''

    layout = state.layout

    if source == 'before-down':
        visual = nx.reshape(
            nx.take_rows(state.x, layout.visual_index),
            (layout.num_frames, layout.tokens_per_frame, state.x.shape[1]))

    elif source == 'after-down':
        visual = state.visual_down

    elif source == 'after-reconstruction':
        if state.reconstruction is None:
            raise ShapeError('no reconstruction to score frames from.')

        visual = state.reconstruction

    else:
        raise ConfigError('gating.source', 'unknown source {0!r}.'.format(
            source))

    return nx.mean(visual, axis=1)


def concept_vector(state, annotation_index, source, embedding=None):
    ''' The concept as seen by :param:`source` features: the query token
        row at :param:`annotation_index`, or a fixed :param:`embedding`
        (full width) when given. `None` for a missing concept. '''

    if embedding is not None:
        if source == 'before-down':
            return embedding

        return nx.reshape(
            nx.matmul(nx.reshape(embedding, (1, -1)), state.w_down), (-1, ))

    if annotation_index is None:
        return None

    row = np.array([state.layout.query_start + annotation_index])
    rows = state.x if source == 'before-down' else state.x_down

    return nx.reshape(nx.take_rows(rows, row), (-1, ))


def frame_scores(state, annotation, source='after-reconstruction',
                 concepts=None):
    ''' Cosine of each frame's mean visual feature with the subject and the
        object concept.

        :param concepts: optional `(subject, object)` full-width embeddings
            replacing the query words (query-agnostic gating).
        :returns: `(s_sub, s_obj)`, each a length-T tensor or `None` when
            the concept is missing.
    '''

    annotation.validate(state.layout.query_length)

    features = frame_features(state, source)

    if concepts is None:
        concepts = (None, None)

    scores = []

    for index, embedding in zip(
            (annotation.subject_index, annotation.object_index), concepts):
        vector = concept_vector(state, index, source, embedding)

        scores.append(None if vector is None
                      else nx.cosine_rows(features, vector))

    return tuple(scores)


def minmax_normalize(scores, num_frames=None):
    ''' `(s − min) / (max − min)` over frames.

        Missing scores (`None`, length from :param:`num_frames`) and
        constant scores (range below 1e-9) give all-ones.
    '''

    if scores is None:
        if num_frames is None:
            raise ShapeError('missing scores need an explicit length.')

        return nx.ones((num_frames, ))

    scores = nx.as_tensor(scores)

    if scores.ndim != 1 or scores.size < 1:
        raise ShapeError('scores must be a non-empty vector, got {0}.'.format(
            scores.shape))

    if scores.data.max() - scores.data.min() < MINMAX_DEGENERATE_RANGE:
        return nx.ones(scores.shape)

    low = nx.broadcast_to(nx.min(scores), scores.shape)
    span = nx.broadcast_to(
        nx.sub(nx.max(scores), nx.min(scores)), scores.shape)

    return nx.div(nx.sub(scores, low), span)


def co_occurrence_gate(subject_normalized, object_normalized):
    ''' Per-frame product of the two normalized scores. '''

    subject_normalized = nx.as_tensor(subject_normalized)
    object_normalized = nx.as_tensor(object_normalized)

    if subject_normalized.shape != object_normalized.shape:
        raise ShapeError('gate scores of lengths {0} and {1}.'.format(
            subject_normalized.shape, object_normalized.shape))

    return nx.mul(subject_normalized, object_normalized)


def build_gate(state, annotation, cfg, concepts=None):
    ''' Full gate for one adapter block. Scores are detached unless the
        config asks for a differentiable gate. '''

    subject_scores, object_scores = frame_scores(
        state, annotation, cfg.source, concepts)

    if not cfg.differentiable:
        subject_scores = None if subject_scores is None \
            else subject_scores.detach()
        object_scores = None if object_scores is None \
            else object_scores.detach()

    subject_normalized = minmax_normalize(subject_scores, state.num_frames)
    object_normalized = minmax_normalize(object_scores, state.num_frames)

    return GateVector(
        subject_scores=subject_scores,
        object_scores=object_scores,
        subject_normalized=subject_normalized,
        object_normalized=object_normalized,
        values=co_occurrence_gate(subject_normalized, object_normalized),
    )


def apply_gate(state, gate):
    ''' Scale each frame's reconstructed tokens by its gate value. Text
        rows are not touched.

        :param gate: a :class:`GateVector`, or any length-T values.
    '''

    values = gate.values if isinstance(gate, GateVector) else \
        nx.as_tensor(gate)

    if state.reconstruction is None:
        raise ShapeError('apply_gate needs a reconstruction.')

    frames, tokens, width = state.reconstruction.shape

    if values.shape != (frames, ):
        raise ShapeError('gate of shape {0} for {1} frames.'.format(
            values.shape, frames))

    per_token = nx.broadcast_to(nx.reshape(values, (frames, 1, 1)),
                                (frames, tokens, width))

    state.reconstruction = nx.mul(state.reconstruction, per_token)

    if isinstance(gate, GateVector):
        state.gate = gate

    return state
