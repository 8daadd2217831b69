"""
Toy interleaved-timestamp decoder.

A video is laid out as `[f_1, τ_1, …, f_T, τ_T, q]`: each frame's visual
tokens followed by the digits of its relative timestamp, then the query
words, then (when teacher forcing or decoding) the answer
`<boa> S <sep> E <eoa>`. Context rows attend to each other freely and never
to the answer; answer rows attend to the context and causally to earlier
answer rows.

Base weights are frozen. Adapters run at the start of their layers, and
low-rank updates `x·W + (α/r)·(x·A)·B` with `B = 0` at init sit on the
attention projections of their layers. The output head is tied to the
embedding table.
"""

import logging
import dataclasses

import numpy as np

import slotgate.numerics as nx

from slotgate.adapter import (
    AdapterConfig,
    AdapterParams,
    adapter_forward,
    init_adapter_params,
)
from slotgate.constants import (
    SPECIAL_TOKENS,
    DIGIT_TOKENS,
    ANSWER_TOKENS,
    QUERY_WORDS,
    ENTITY_WORDS,
    GENERIC_SUBJECT_WORD,
    GENERIC_OBJECT_WORD,
    TIMESTAMP_RANGE,
    MASKED_SCORE,
    MAX_ANSWER_TOKENS,
)
from slotgate.exceptions import ShapeError, UsageError, VocabularyError
from slotgate.gating import GatingConfig, ConceptAnnotation, build_gate
from slotgate.regex import ANSWER_RE
from slotgate.strings import layers_to_string


LOGGER = logging.getLogger(__name__)

PROJECTIONS = ('q', 'k', 'v', 'o')


# ——————————————————————————————————————————————————————————— Time windows


def timestamp_value(frame, num_frames):
    ''' Relative integer timestamp, `round(100·t/(T−1))`; 0 for T = 1. '''

    if num_frames < 2:
        return 0

    return int(np.floor(TIMESTAMP_RANGE * frame / (num_frames - 1) + 0.5))


@dataclasses.dataclass(frozen=True)
class TimeWindow:
    start: int
    end: int

    def __post_init__(self):

        if not 0 <= self.start <= self.end <= TIMESTAMP_RANGE:
            raise ShapeError('invalid window ({0}, {1}).'.format(
                self.start, self.end))

    @classmethod
    def from_frames(cls, first, last, num_frames):

        return cls(timestamp_value(first, num_frames),
                   timestamp_value(last, num_frames))

    def iou(self, other):
        ''' Temporal IoU on the relative axis; two equal points score 1. '''

        intersection = max(0, min(self.end, other.end)
                           - max(self.start, other.start))
        union = max(self.end, other.end) - min(self.start, other.start)

        if union == 0:
            return 1.0 if self == other else 0.0

        return intersection / union

    def as_list(self):
        return [self.start, self.end]

    def __str__(self):
        return '{0} {1}'.format(self.start, self.end)


def parse_window(text):
    ''' Parse a decoded answer like “23 71”. Values are clamped into
        [0, 100] and swapped when reversed; `None` when unparseable. '''

    match = ANSWER_RE.match(text)

    if match is None:
        return None

    start, end = (min(int(value), TIMESTAMP_RANGE)
                  for value in match.groups())

    if start > end:
        start, end = end, start

    return TimeWindow(start, end)


# ———————————————————————————————————————————————————————————— Vocabulary


class Vocabulary:
    ''' Special tokens, digits, then the closed query-word set. '''

    def __init__(self, words=QUERY_WORDS):

        self.tokens = tuple(SPECIAL_TOKENS) + tuple(DIGIT_TOKENS) \
            + tuple(words)

        if len(set(self.tokens)) != len(self.tokens):
            raise ShapeError('duplicate vocabulary tokens.')

        self.__index = {token: index for index, token in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.__index

    def id(self, token):

        try:
            return self.__index[token]

        except KeyError:
            raise VocabularyError(token)

    def encode(self, tokens):
        return np.array([self.id(token) for token in tokens], dtype=np.int64)

    def decode(self, ids):
        return [self.tokens[int(index)] for index in ids]

    @property
    def answer_ids(self):
        return self.encode(ANSWER_TOKENS)

    def render_timestamp(self, value):
        return list(str(int(value)))

    def render_answer(self, window):

        return (['<boa>'] + list(str(window.start)) + ['<sep>']
                + list(str(window.end)) + ['<eoa>'])

    def answer_text(self, tokens):
        ''' Text of a decoded answer: digits joined, separator as a space,
            stopping at `<eoa>`. Unexpected tokens are kept verbatim. '''

        parts = []

        for token in tokens:
            if token == '<boa>':
                continue

            if token == '<eoa>':
                break

            if token == '<sep>':
                parts.append(' ')

            elif token in DIGIT_TOKENS:
                parts.append(token)

            else:
                parts.append(' {0} '.format(token))

        return ''.join(parts)


# ———————————————————————————————————————————————————————————————— Layout


class SequenceLayout:
    ''' Spans of one interleaved sequence; every span is `(start, end)`
        with `end` exclusive. '''

    def __init__(self, num_frames, tokens_per_frame, timestamp_lengths,
                 query_length, answer_length=0):

        if len(timestamp_lengths) != num_frames:
            raise ShapeError('{0} timestamp spans for {1} frames.'.format(
                len(timestamp_lengths), num_frames))

        self.num_frames = num_frames
        self.tokens_per_frame = tokens_per_frame

        frame_spans, timestamp_spans = [], []
        position = 0

        for length in timestamp_lengths:
            frame_spans.append((position, position + tokens_per_frame))
            position += tokens_per_frame
            timestamp_spans.append((position, position + length))
            position += length

        self.frame_spans = tuple(frame_spans)
        self.timestamp_spans = tuple(timestamp_spans)
        self.query_span = (position, position + query_length)
        position += query_length
        self.answer_span = (position, position + answer_length)
        self.length = position + answer_length

        self.visual_index = np.concatenate([
            np.arange(start, end) for start, end in self.frame_spans
        ]).astype(np.int64)

        is_visual = np.zeros(self.length, dtype=bool)
        is_visual[self.visual_index] = True

        self.text_index = np.flatnonzero(~is_visual).astype(np.int64)

        # Rows ordered [visual…, text…] go back to sequence order with this.
        self.adapter_order = np.argsort(
            np.concatenate([self.visual_index, self.text_index]),
            kind='stable').astype(np.int64)

    @property
    def query_start(self):
        return self.query_span[0]

    @property
    def query_length(self):
        return self.query_span[1] - self.query_span[0]

    @property
    def answer_start(self):
        return self.answer_span[0]

    @property
    def answer_length(self):
        return self.answer_span[1] - self.answer_span[0]

    @property
    def context_length(self):
        return self.answer_span[0]

    def spans(self):

        spans = []

        for frame, timestamp in zip(self.frame_spans, self.timestamp_spans):
            spans.extend([frame, timestamp])

        spans.append(self.query_span)

        if self.answer_length:
            spans.append(self.answer_span)

        return [span for span in spans if span[1] > span[0]]

    def attention_mask(self):
        ''' Additive (L, L) mask: 0 where row i may attend to column j. '''

        context = self.context_length
        allowed = np.zeros((self.length, self.length), dtype=bool)

        allowed[:, :context] = True
        allowed[context:, context:] = np.tril(
            np.ones((self.answer_length, self.answer_length), dtype=bool))

        return np.where(allowed, 0.0, MASKED_SCORE)


@dataclasses.dataclass
class TokenSequence:
    ''' Embedded sequence (L, D), its layout and text token ids
        (-1 on visual rows). '''

    embeddings: nx.Tensor
    layout: SequenceLayout
    token_ids: np.ndarray


def assemble_sequence(visual, query_words, vocab, embedding,
                      answer_tokens=()):
    ''' Interleave (T, N, D) :param:`visual` tokens with timestamp digits,
        then the query and answer words embedded from :param:`embedding`. '''

    visual = np.asarray(visual, dtype=np.float64)

    if visual.ndim != 3 or visual.shape[2] != embedding.shape[1]:
        raise ShapeError('visual tokens {0} for embedding width {1}.'.format(
            visual.shape, embedding.shape[1]))

    frames, tokens, width = visual.shape

    timestamps = [vocab.render_timestamp(timestamp_value(frame, frames))
                  for frame in range(frames)]
    text = [token for stamp in timestamps for token in stamp] \
        + list(query_words) + list(answer_tokens)

    layout = SequenceLayout(frames, tokens, [len(stamp) for stamp in timestamps],
                            len(query_words), len(answer_tokens))

    ids = vocab.encode(text)

    embeddings = nx.take_rows(
        nx.concat([nx.Tensor(visual.reshape(frames * tokens, width)),
                   nx.take_rows(embedding, ids)], axis=0),
        layout.adapter_order)

    token_ids = np.full(layout.length, -1, dtype=np.int64)
    token_ids[layout.text_index] = ids

    return TokenSequence(embeddings=embeddings, layout=layout,
                         token_ids=token_ids)


def build_sequence(sample, vocab, embedding, answer_tokens=()):
    ''' Sequence of a sample with `visual` and `query` attributes. '''

    return assemble_sequence(sample.visual, sample.query, vocab, embedding,
                             answer_tokens)


# ———————————————————————————————————————————————————————————————— Config


@dataclasses.dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    heads: int = 2
    ffn_dim: int = 512
    lowrank_enabled: bool = True
    lowrank_layers: tuple = (2, 3)
    lowrank_rank: int = 4
    lowrank_alpha: float = 16.0
    max_positions: int = 512

    def __post_init__(self):

        if self.num_layers < 1:
            raise UsageError('decoder.num_layers', 'must be positive.')

        if self.heads < 1 or self.hidden_dim % self.heads:
            raise UsageError('decoder.heads', 'must divide hidden_dim.')

        if self.ffn_dim < 1:
            raise UsageError('decoder.ffn_dim', 'must be positive.')

        if self.lowrank_rank < 1:
            raise UsageError('decoder.lowrank_rank', 'must be positive.')

        if any(not 0 <= layer < self.num_layers
               for layer in self.lowrank_layers):
            raise UsageError('decoder.lowrank_layers',
                             'must lie in 0-{0}.'.format(self.num_layers - 1))

    @property
    def insert_lowrank(self):
        return tuple(sorted(self.lowrank_layers)) \
            if self.lowrank_enabled else ()

    @property
    def lowrank_scale(self):
        return self.lowrank_alpha / self.lowrank_rank


def check_layer_sets(decoder_cfg, adapter_cfg):

    adapter_layers = set(adapter_cfg.insert_layers)

    if adapter_cfg.placement == 'decoder' and any(
            layer >= decoder_cfg.num_layers for layer in adapter_layers):
        raise UsageError('adapter.layers', 'must lie in 0-{0}.'.format(
            decoder_cfg.num_layers - 1))

    if adapter_cfg.placement == 'decoder' \
            and adapter_layers & set(decoder_cfg.insert_lowrank):
        raise UsageError('adapter.layers',
                         'overlaps decoder.lowrank_layers ({0}).'.format(
                             layers_to_string(decoder_cfg.insert_lowrank)))

    if adapter_cfg.hidden_dim != decoder_cfg.hidden_dim:
        raise UsageError('adapter.hidden_dim',
                         'differs from decoder.hidden_dim.')


# ————————————————————————————————————————————————————————————————— Model


def sinusoidal_positions(count, width):
    ''' Unit-norm sinusoidal position codes, (count, width). '''

    positions = np.arange(count)[:, None]
    rates = 1.0 / (10000.0 ** (np.arange(0, width, 2) / width))
    table = np.zeros((count, width))

    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[:width // 2])

    return table / np.sqrt(width / 2.0)


class Model:
    ''' Frozen base tensors, adapter blocks, low-rank factors and the
        trainable answer-token embedding rows, plus their configs. '''

    def __init__(self, vocab, decoder_cfg, adapter_cfg, gating_cfg,
                 base, adapters, lowrank):

        check_layer_sets(decoder_cfg, adapter_cfg)

        self.vocab = vocab
        self.decoder_cfg = decoder_cfg
        self.adapter_cfg = adapter_cfg
        self.gating_cfg = gating_cfg
        self.base = base
        self.adapters = adapters
        self.lowrank = lowrank

        answer_ids = vocab.answer_ids
        self.row_map = np.arange(len(vocab), dtype=np.int64)
        self.row_map[answer_ids] = len(vocab) + np.arange(len(answer_ids))

        self.positions = sinusoidal_positions(decoder_cfg.max_positions,
                                              decoder_cfg.hidden_dim)

    # ———————————————————————————————————————————————————————— Tensors

    def embedding_table(self):
        ''' Full (V, D) table: frozen rows, answer rows from the trainable
            tensor. '''

        return nx.take_rows(
            nx.concat([self.base['embedding'],
                       self.base['answer_embedding']], axis=0),
            self.row_map)

    def adapter_tensors(self):

        shared = 'adapter.shared' if self.adapter_cfg.share_projections \
            else None
        tensors = {}

        for layer, block in sorted(self.adapters.items()):
            tensors.update(block.to_dict('adapter.{0}'.format(layer), shared))

        return tensors

    def trainable_tensors(self):
        ''' Answer rows, adapter and low-rank tensors, by name. '''

        tensors = {'answer_embedding': self.base['answer_embedding']}
        tensors.update(self.adapter_tensors())
        tensors.update(self.lowrank)

        return tensors

    def base_tensors(self):

        return {name: tensor for name, tensor in self.base.items()
                if name != 'answer_embedding'}

    def named_tensors(self):

        tensors = dict(self.base)
        tensors.update(self.adapter_tensors())
        tensors.update(self.lowrank)

        return dict(sorted(tensors.items()))

    def parameter_census(self):
        ''' `(trainable, total)` parameter counts. '''

        trainable = sum(t.size for t in self.trainable_tensors().values())
        total = sum(t.size for t in self.named_tensors().values())

        return trainable, total

    def metadata(self):

        return {
            'decoder': dataclasses.asdict(self.decoder_cfg),
            'adapter': dataclasses.asdict(self.adapter_cfg),
            'gating': dataclasses.asdict(self.gating_cfg),
            'vocabulary': list(self.vocab.tokens),
        }

    @classmethod
    def from_arrays(cls, arrays, metadata):
        ''' Rebuild from checkpoint arrays and :meth:`metadata`. '''

        def config(klass, data):
            return klass(**{key: tuple(value) if isinstance(value, list)
                            else value for key, value in data.items()})

        decoder_cfg = config(DecoderConfig, metadata['decoder'])
        adapter_cfg = config(AdapterConfig, metadata['adapter'])
        gating_cfg = config(GatingConfig, metadata['gating'])

        special = len(SPECIAL_TOKENS) + len(DIGIT_TOKENS)
        vocab = Vocabulary(tuple(metadata['vocabulary'][special:]))

        tensors = {name: nx.Tensor(np.array(array))
                   for name, array in arrays.items()}

        base = {name: tensor for name, tensor in tensors.items()
                if not name.startswith(('adapter.', 'lowrank.'))}
        lowrank = {name: tensor for name, tensor in tensors.items()
                   if name.startswith('lowrank.')}

        shared = 'adapter.shared' if adapter_cfg.share_projections else None
        adapters = {
            layer: AdapterParams.from_dict(
                tensors, 'adapter.{0}'.format(layer), adapter_cfg.heads,
                shared)
            for layer in adapter_cfg.insert_layers
        }

        model = cls(vocab, decoder_cfg, adapter_cfg, gating_cfg,
                    base, adapters, lowrank)
        model.set_trainable()

        return model

    def set_trainable(self, base=False):
        ''' Mark tensors for gradient recording: the adaptation set always,
            the frozen base only when :param:`base` (pretraining). '''

        for tensor in self.base_tensors().values():
            tensor.requires_grad = base

        for tensor in self.trainable_tensors().values():
            tensor.requires_grad = True

    # ————————————————————————————————————————————————————————— Gating

    def generic_concepts(self):

        table = self.base['embedding']

        return tuple(
            nx.reshape(nx.take_rows(
                table, np.array([self.vocab.id(word)])), (-1, ))
            for word in (GENERIC_SUBJECT_WORD, GENERIC_OBJECT_WORD))

    def gate_for(self, layer, annotation):
        ''' Gate builder for the adapter at :param:`layer`, or `None`. '''

        gating_cfg = self.gating_cfg

        if not gating_cfg.applies_to(layer, self.adapter_cfg.insert_layers):
            return None

        if gating_cfg.mode == 'query-agnostic':
            concepts = self.generic_concepts()
            annotation = ConceptAnnotation()

        else:
            if annotation is None:
                return None

            concepts = None

        def gate(state):
            return build_gate(state, annotation, gating_cfg, concepts)

        return gate


def init_model(vocab, decoder_cfg, adapter_cfg, gating_cfg, rng,
               concept_table=None):
    ''' Random frozen base, fresh adapters and low-rank factors.

        :param concept_table: optional (E, D) entity embeddings used for
            the first E entity-word rows of the frozen embedding table.
    '''

    check_layer_sets(decoder_cfg, adapter_cfg)

    width = decoder_cfg.hidden_dim
    ffn = decoder_cfg.ffn_dim

    def frozen(array):
        return nx.Tensor(array)

    embedding = rng.normal(0.0, 1.0 / np.sqrt(width), (len(vocab), width))

    if concept_table is not None:
        concept_table = np.asarray(concept_table)

        for entity, vector in enumerate(concept_table):
            embedding[vocab.id(ENTITY_WORDS[entity])] = vector

    base = {'embedding': frozen(embedding)}

    for layer in range(decoder_cfg.num_layers):
        prefix = 'layers.{0}.'.format(layer)

        for name in PROJECTIONS:
            base[prefix + 'w_' + name] = frozen(
                rng.normal(0.0, 1.0 / np.sqrt(width), (width, width)))

        base[prefix + 'w_ff1'] = frozen(
            rng.normal(0.0, 1.0 / np.sqrt(width), (width, ffn)))
        base[prefix + 'b_ff1'] = frozen(np.zeros(ffn))
        base[prefix + 'w_ff2'] = frozen(
            rng.normal(0.0, 1.0 / np.sqrt(ffn), (ffn, width)))
        base[prefix + 'b_ff2'] = frozen(np.zeros(width))

        for norm in ('ln1', 'ln2'):
            base[prefix + norm + '_g'] = frozen(np.ones(width))
            base[prefix + norm + '_b'] = frozen(np.zeros(width))

    base['ln_f_g'] = frozen(np.ones(width))
    base['ln_f_b'] = frozen(np.zeros(width))

    base['answer_embedding'] = nx.Tensor(
        embedding[vocab.answer_ids].copy(), requires_grad=True)

    lowrank = {}
    rank = decoder_cfg.lowrank_rank

    for layer in decoder_cfg.insert_lowrank:
        for name in PROJECTIONS:
            prefix = 'lowrank.{0}.{1}.'.format(layer, name)

            lowrank[prefix + 'a'] = nx.Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(width), (width, rank)),
                requires_grad=True)
            lowrank[prefix + 'b'] = nx.Tensor(
                np.zeros((rank, width)), requires_grad=True)

    adapters = init_adapter_params(adapter_cfg, rng)

    model = Model(vocab, decoder_cfg, adapter_cfg, gating_cfg,
                  base, adapters, lowrank)

    trainable, total = model.parameter_census()

    LOGGER.info('Model: {0} layers, {1}; {2} of {3} parameters trainable '
                '({4:.2%}).'.format(decoder_cfg.num_layers,
                                    adapter_cfg.describe(),
                                    trainable, total, trainable / total))

    return model


# ——————————————————————————————————————————————————————————————— Forward


@dataclasses.dataclass
class ForwardResult:
    logits: nx.Tensor
    states: dict = dataclasses.field(default_factory=dict)
    attention: dict = dataclasses.field(default_factory=dict)


def split_heads(x, heads):
    ''' (L, D) → (H, L, D/H). '''

    length, width = x.shape

    return nx.transpose(nx.reshape(x, (length, heads, width // heads)),
                        (1, 0, 2))


def merge_heads(x):

    heads, length, width = x.shape

    return nx.reshape(nx.transpose(x, (1, 0, 2)), (length, heads * width))


def project(x, model, layer, name):
    ''' `x·W`, plus the scaled low-rank path when the layer has one. '''

    out = nx.matmul(x, model.base['layers.{0}.w_{1}'.format(layer, name)])

    prefix = 'lowrank.{0}.{1}.'.format(layer, name)

    if prefix + 'a' in model.lowrank:
        delta = nx.matmul(nx.matmul(x, model.lowrank[prefix + 'a']),
                          model.lowrank[prefix + 'b'])
        out = nx.add(out, nx.scale(delta, model.decoder_cfg.lowrank_scale))

    return out


def transformer_block(h, mask, model, layer):
    ''' Pre-norm attention and SiLU feed-forward sublayers.
        :returns: `(h, attention weights (H, L, L))`. '''

    base = model.base
    prefix = 'layers.{0}.'.format(layer)
    heads = model.decoder_cfg.heads
    head_dim = h.shape[1] // heads

    normed = nx.layer_norm(h, base[prefix + 'ln1_g'], base[prefix + 'ln1_b'])

    queries = split_heads(project(normed, model, layer, 'q'), heads)
    keys = split_heads(project(normed, model, layer, 'k'), heads)
    values = split_heads(project(normed, model, layer, 'v'), heads)

    scores = nx.scale(nx.matmul(queries, nx.transpose(keys)),
                      1.0 / np.sqrt(head_dim))
    weights = nx.softmax(
        nx.add(scores, nx.broadcast_to(mask, scores.shape)), axis=-1)

    attended = project(merge_heads(nx.matmul(weights, values)),
                       model, layer, 'o')
    h = nx.add(h, attended)

    normed = nx.layer_norm(h, base[prefix + 'ln2_g'], base[prefix + 'ln2_b'])
    hidden = nx.silu(nx.add(
        nx.matmul(normed, base[prefix + 'w_ff1']),
        nx.broadcast_to(base[prefix + 'b_ff1'],
                        (h.shape[0], model.decoder_cfg.ffn_dim))))
    out = nx.add(nx.matmul(hidden, base[prefix + 'w_ff2']),
                 nx.broadcast_to(base[prefix + 'b_ff2'], h.shape))

    return nx.add(h, out), weights


def decoder_forward(sequence, model, annotation=None,
                    record_attention=False):
    ''' Logits (L, V) of the whole sequence.

        :param annotation: concept positions for query-dependent gating.
        :returns: a :class:`ForwardResult` with the adapter states by layer
            and, when asked, the attention weights by layer.
    '''

    layout = sequence.layout
    cfg = model.decoder_cfg
    adapter_cfg = model.adapter_cfg

    if layout.length > cfg.max_positions:
        raise ShapeError('sequence of {0} tokens exceeds {1} positions.'.format(
            layout.length, cfg.max_positions))

    result = ForwardResult(logits=None)
    x = sequence.embeddings

    if adapter_cfg.enabled and adapter_cfg.placement == 'pre-decoder':
        x, result.states[0] = adapter_forward(
            x, layout, model.adapters[0], adapter_cfg,
            gate=model.gate_for(0, annotation))

    h = nx.add(x, nx.Tensor(model.positions[:layout.length]))
    mask = nx.Tensor(layout.attention_mask())

    decoder_adapters = adapter_cfg.insert_layers \
        if adapter_cfg.placement == 'decoder' else ()

    for layer in range(cfg.num_layers):
        if layer in decoder_adapters:
            h, result.states[layer] = adapter_forward(
                h, layout, model.adapters[layer], adapter_cfg,
                gate=model.gate_for(layer, annotation))

        h, weights = transformer_block(h, mask, model, layer)

        if record_attention:
            result.attention[layer] = weights.data

    h = nx.layer_norm(h, model.base['ln_f_g'], model.base['ln_f_b'])

    result.logits = nx.matmul(h, nx.transpose(model.embedding_table()))

    return result


# —————————————————————————————————————————————————————————————— Losses


def answer_loss(logits, layout, answer_ids):
    ''' Teacher-forced cross-entropy: each answer row predicts the next
        answer token. '''

    answer_ids = np.asarray(answer_ids, dtype=np.int64)

    if layout.answer_length < 2:
        raise ShapeError('empty answer span.')

    if len(answer_ids) != layout.answer_length:
        raise ShapeError('{0} answer ids for a span of {1}.'.format(
            len(answer_ids), layout.answer_length))

    positions = np.arange(layout.answer_start,
                          layout.answer_start + layout.answer_length - 1)

    return nx.cross_entropy(nx.take_rows(logits, positions), answer_ids[1:])


def vtg_loss(logits, layout, target, vocab):
    ''' Cross-entropy of the rendered :param:`target` window. '''

    return answer_loss(logits, layout,
                       vocab.encode(vocab.render_answer(target)))


# ————————————————————————————————————————————————————————————— Decoding


def greedy_decode(visual, query_words, model, annotation=None,
                  max_tokens=MAX_ANSWER_TOKENS):
    ''' Greedy decoding restricted to answer tokens, from `<boa>` until
        `<eoa>` or :param:`max_tokens`. :returns: the decoded tokens. '''

    vocab = model.vocab
    embedding = model.embedding_table()

    allowed = np.array([vocab.id(token) for token in ANSWER_TOKENS
                        if token != '<boa>'])
    tokens = ['<boa>']

    while len(tokens) < max_tokens:
        sequence = assemble_sequence(visual, query_words, vocab, embedding,
                                     answer_tokens=tokens)
        logits = decoder_forward(sequence, model, annotation).logits.data

        next_id = allowed[int(np.argmax(logits[-1, allowed]))]
        tokens.append(vocab.tokens[next_id])

        if tokens[-1] == '<eoa>':
            break

    return tokens


def decode_window(tokens, vocab):
    ''' :returns: `(window or None, answer text)`. '''

    text = vocab.answer_text(tokens)

    return parse_window(text), text
