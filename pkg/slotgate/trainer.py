import os
import math
import logging
import dataclasses

import numpy as np

import slotgate.numerics as nx

from slotgate.constants import (
    DIAGNOSTICS_DIRNAME,
    METRICS_LOG_FILENAME,
    RECALL_THRESHOLDS,
    MAX_ANSWER_TOKENS,
)
from slotgate.decorators import run_at_most_every, log_duration
from slotgate.decoder import (
    assemble_sequence,
    decoder_forward,
    vtg_loss,
    answer_loss,
    greedy_decode,
    decode_window,
)
from slotgate.distill import (
    TeacherFeatures,
    pool_and_normalize,
    build_cluster_maps,
    block_ebd_loss,
)
from slotgate.exceptions import ConfigError, NonFiniteError, DiagnosticsError
from slotgate.parallel import map_ordered
from slotgate.store import append_jsonl, write_json


LOGGER = logging.getLogger(__name__)

BATCH_STREAM = 11
PRETRAIN_STREAM = 12


# ————————————————————————————————————————————————————————————————— Config


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    batch_size: int = 8
    learning_rate: float = 5e-4
    weight_decay: float = 0.1
    warmup_fraction: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_grad_norm: float = 1.0
    pretrain_steps: int = 0
    pretrain_learning_rate: float = 1e-3

    def __post_init__(self):

        if self.steps < 0 or self.pretrain_steps < 0:
            raise ConfigError('train.steps', 'must not be negative.')

        if self.batch_size < 1:
            raise ConfigError('train.batch_size', 'must be positive.')

        if self.learning_rate <= 0:
            raise ConfigError('train.learning_rate', 'must be positive.')

        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError('train.warmup_fraction', 'must lie in [0, 1).')

        if self.max_grad_norm < 0:
            raise ConfigError('train.max_grad_norm', 'must not be negative.')


# —————————————————————————————————————————————————————————————— Optimizer


def cosine_schedule(step, total_steps, peak, warmup_fraction):
    ''' Linear warmup over the first fraction of steps, then cosine decay
        to zero. :param:`step` counts from 0. '''

    warmup = max(1, int(math.ceil(total_steps * warmup_fraction)))

    if step < warmup:
        return peak * (step + 1) / warmup

    progress = (step - warmup) / max(1, total_steps - warmup)

    return 0.5 * peak * (1.0 + math.cos(math.pi * min(1.0, progress)))


def global_norm(grads):

    return math.sqrt(sum(float((grad * grad).sum()) for grad in grads.values()))


def clip_gradients(grads, max_norm):
    ''' Scale all gradients together so their global norm is at most
        :param:`max_norm` (0 disables). :returns: `(grads, norm)`. '''

    norm = global_norm(grads)

    if max_norm and norm > max_norm:
        factor = max_norm / norm
        grads = {name: grad * factor for name, grad in grads.items()}

    return grads, norm


class AdamW:
    ''' Adam with decoupled weight decay, applied to matrices only. '''

    def __init__(self, params, weight_decay=0.1, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):

        self.params = params
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0

        self.first = {name: np.zeros(t.shape) for name, t in params.items()}
        self.second = {name: np.zeros(t.shape) for name, t in params.items()}

    def step(self, grads, learning_rate):

        self.step_count += 1

        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count

        for name, tensor in self.params.items():
            grad = grads[name]

            self.first[name] = self.beta1 * self.first[name] \
                + (1.0 - self.beta1) * grad
            self.second[name] = self.beta2 * self.second[name] \
                + (1.0 - self.beta2) * grad * grad

            update = (self.first[name] / correction1) / (
                np.sqrt(self.second[name] / correction2) + self.epsilon)

            data = tensor.data

            if tensor.ndim >= 2 and self.weight_decay:
                data = data - learning_rate * self.weight_decay * data

            tensor.data = data - learning_rate * update


# ——————————————————————————————————————————————————————————————— Losses


def cluster_targets(dataset, num_slots, seed, threads=None):
    ''' Cluster maps of every sample, keyed by video id. '''

    def build(sample):
        teacher = pool_and_normalize(
            TeacherFeatures(sample.teacher, video_id=sample.video_id,
                            source='synthetic-oracle'),
            sample.visual.shape[1])
        return build_cluster_maps(teacher, num_slots, seed, threads=1)

    maps = map_ordered(build, dataset.samples, threads=threads)

    return {sample.video_id: cluster_map
            for sample, cluster_map in zip(dataset.samples, maps)}


def sample_loss(model, sample, distill_cfg, cluster_map=None, embedding=None):
    ''' `L_CE + λ·Σ_layers L_EBD` for one sample.

        :returns: `(total, parts)` with parts `ce` and `ebd` as floats;
            the binding term is skipped entirely when λ = 0.
    '''

    vocab = model.vocab

    if embedding is None:
        embedding = model.embedding_table()

    sequence = assemble_sequence(sample.visual, sample.query, vocab, embedding,
                                 vocab.render_answer(sample.window))
    result = decoder_forward(sequence, model, sample.annotation)

    ce = vtg_loss(result.logits, sequence.layout, sample.window, vocab)
    parts = {'ce': ce.item(), 'ebd': 0.0}

    if not distill_cfg.enabled or cluster_map is None:
        return ce, parts

    insert_layers = model.adapter_cfg.insert_layers
    binding = [block_ebd_loss(state, cluster_map, distill_cfg)
               for layer, state in sorted(result.states.items())
               if distill_cfg.applies_to(layer, insert_layers)
               and state.has_slots]

    if not binding:
        return ce, parts

    binding = nx.sum(nx.stack(binding))
    parts['ebd'] = binding.item()

    return nx.add(ce, nx.scale(binding, distill_cfg.weight)), parts


def sample_gradients(model, sample, distill_cfg, cluster_map, params):

    with nx.GradTape() as tape:
        total, parts = sample_loss(model, sample, distill_cfg, cluster_map)

    grads = tape.gradient(total, list(params.values()))
    parts['total'] = total.item()

    return dict(zip(params, grads)), parts


def batch_gradients(model, batch, distill_cfg, cluster_maps, params,
                    threads=None):
    ''' Mean gradients over :param:`batch`, reduced in batch order. '''

    results = map_ordered(
        lambda sample: sample_gradients(
            model, sample, distill_cfg,
            cluster_maps.get(sample.video_id) if cluster_maps else None,
            params),
        batch, threads=threads)

    grads = {name: np.zeros(tensor.shape) for name, tensor in params.items()}
    parts = {'total': 0.0, 'ce': 0.0, 'ebd': 0.0}

    for sample_grads, sample_parts in results:
        for name in grads:
            grads[name] = grads[name] + sample_grads[name]

        for key in parts:
            parts[key] += sample_parts[key]

    count = float(len(batch))

    return ({name: grad / count for name, grad in grads.items()},
            {key: value / count for key, value in parts.items()})


# —————————————————————————————————————————————————————————————— Training


@dataclasses.dataclass
class TrainResult:
    history: list
    steps: int


def batch_indices(rng, count, batch_size):
    ''' Endless shuffled batches, a fresh permutation per epoch. '''

    while True:
        order = rng.permutation(count)

        for start in range(0, count, batch_size):
            yield order[start:start + batch_size]


def log_progress(step, total, record):

    LOGGER.info('step {0}/{1}: loss {2:.4f} (ce {3:.4f}, ebd {4:.4f}), '
                'lr {5:.2e}.'.format(step + 1, total, record['loss'],
                                     record['ce'], record['ebd'],
                                     record['lr']))


def dump_nonfinite(out_dir, step, record, params):

    directory = os.path.join(out_dir, DIAGNOSTICS_DIRNAME)
    os.makedirs(directory, exist_ok=True)

    filename = os.path.join(directory, 'nonfinite-step{0}.json'.format(step))

    write_json(filename, {
        'step': step,
        'last_record': record,
        'parameter_norms': {
            name: float(np.sqrt(np.nansum(tensor.data * tensor.data)))
            for name, tensor in params.items()
        },
    })

    return filename


@log_duration('Training')
def train(model, dataset, distill_cfg, train_cfg, seed, out_dir=None,
          threads=None, progress_every=10.0):
    ''' Adapt :param:`model` on :param:`dataset`.

        Only the answer-token rows, adapters and low-rank factors move.
        Each step averages per-sample gradients in batch order, clips them
        by global norm and applies AdamW at the scheduled rate. One record
        per step goes to `metrics.jsonl` under :param:`out_dir`.

        :param progress_every: seconds between progress log lines.
        :raises NonFiniteError: with the diagnostic dump path.
    '''

    if not len(dataset):
        raise DiagnosticsError('empty training split.')

    model.set_trainable()
    params = model.trainable_tensors()

    cluster_maps = None

    if distill_cfg.enabled and model.adapter_cfg.bottleneck == 'slot' \
            and model.adapter_cfg.enabled:
        cluster_maps = cluster_targets(dataset, model.adapter_cfg.num_slots,
                                       seed, threads)

    optimizer = AdamW(params, weight_decay=train_cfg.weight_decay,
                      beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                      epsilon=train_cfg.adam_epsilon)

    rng = np.random.default_rng(np.random.SeedSequence([seed, BATCH_STREAM]))
    batches = batch_indices(rng, len(dataset), train_cfg.batch_size)

    log_filename = None

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_filename = os.path.join(out_dir, METRICS_LOG_FILENAME)

        if os.path.exists(log_filename):
            os.unlink(log_filename)

    report = run_at_most_every(progress_every, limit=0)(log_progress)

    history = []
    record = None

    for step in range(train_cfg.steps):
        batch = [dataset.samples[index] for index in next(batches)]
        learning_rate = cosine_schedule(step, train_cfg.steps,
                                        train_cfg.learning_rate,
                                        train_cfg.warmup_fraction)

        try:
            grads, parts = batch_gradients(model, batch, distill_cfg,
                                           cluster_maps, params, threads)

            if not np.isfinite(parts['total']):
                raise NonFiniteError('loss is not finite.')

            grads, norm = clip_gradients(grads, train_cfg.max_grad_norm)

            if not np.isfinite(norm):
                raise NonFiniteError('gradient norm is not finite.')

        except NonFiniteError as e:
            dump = dump_nonfinite(out_dir or '.', step, record, params)

            LOGGER.error('Non-finite value at step {0}: {1}; diagnostics in '
                         '“{2}”.'.format(step, e, dump))

            raise NonFiniteError('non-finite value at step {0}.'.format(step),
                                 dump_path=dump)

        optimizer.step(grads, learning_rate)

        record = {
            'step': step,
            'lr': learning_rate,
            'loss': parts['total'],
            'ce': parts['ce'],
            'ebd': parts['ebd'],
            'grad_norm': norm,
        }

        history.append(record)

        if log_filename is not None:
            append_jsonl(log_filename, record)

        report(step, train_cfg.steps, record)

    return TrainResult(history=history, steps=train_cfg.steps)


def caption_loss(model, sample, embedding):
    ''' Next-token loss of the query words as a caption of the video. '''

    vocab = model.vocab
    caption = ['<boa>'] + list(sample.query) + ['<eoa>']

    sequence = assemble_sequence(sample.visual, (), vocab, embedding, caption)
    result = decoder_forward(sequence, model)

    return answer_loss(result.logits, sequence.layout, vocab.encode(caption))


@log_duration('Pretraining')
def pretrain(model, dataset, train_cfg, seed):
    ''' Optional stage fitting the frozen base to caption the synthetic
        videos, before any adaptation. Adaptation tensors do not move. '''

    if not train_cfg.pretrain_steps:
        return []

    model.set_trainable(base=True)
    params = model.base_tensors()

    optimizer = AdamW(params, weight_decay=train_cfg.weight_decay,
                      beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                      epsilon=train_cfg.adam_epsilon)

    rng = np.random.default_rng(np.random.SeedSequence([seed, PRETRAIN_STREAM]))
    batches = batch_indices(rng, len(dataset), train_cfg.batch_size)

    history = []

    try:
        for step in range(train_cfg.pretrain_steps):
            batch = [dataset.samples[index] for index in next(batches)]
            grads = {name: np.zeros(t.shape) for name, t in params.items()}
            total = 0.0

            for sample in batch:
                with nx.GradTape() as tape:
                    loss = caption_loss(model, sample, model.embedding_table())

                for name, grad in zip(params, tape.gradient(
                        loss, list(params.values()))):
                    grads[name] = grads[name] + grad / len(batch)

                total += loss.item() / len(batch)

            grads, _ = clip_gradients(grads, train_cfg.max_grad_norm)
            optimizer.step(grads, cosine_schedule(
                step, train_cfg.pretrain_steps,
                train_cfg.pretrain_learning_rate, train_cfg.warmup_fraction))

            history.append(total)

            LOGGER.debug('pretrain step {0}: caption loss {1:.4f}.'.format(
                step, total))

    finally:
        model.set_trainable()

    return history


# ———————————————————————————————————————————————————————————— Evaluation


@dataclasses.dataclass
class Prediction:
    video_id: str
    text: str
    window: object
    target: object
    iou: float

    def as_dict(self):

        return {
            'video_id': self.video_id,
            'text': self.text,
            'window': None if self.window is None else self.window.as_list(),
            'target': self.target.as_list(),
            'iou': self.iou,
        }


def predict_window(model, sample, max_tokens=MAX_ANSWER_TOKENS):
    ''' Greedy-decode and parse one sample's window. An unparseable
        answer is a miss with IoU 0. '''

    tokens = greedy_decode(sample.visual, sample.query, model,
                           sample.annotation, max_tokens)
    window, text = decode_window(tokens, model.vocab)

    return Prediction(
        video_id=sample.video_id,
        text=text,
        window=window,
        target=sample.window,
        iou=0.0 if window is None else window.iou(sample.window),
    )


def metrics_from_predictions(predictions):
    ''' R1@θ and mIoU in percent, and the parse-failure rate, from
        prediction records (objects or their dicts). '''

    records = [p.as_dict() if isinstance(p, Prediction) else p
               for p in predictions]

    if not records:
        raise DiagnosticsError('no predictions to score.')

    ious = np.array([record['iou'] for record in records])
    failures = sum(record['window'] is None for record in records)

    metrics = {
        'R1@{0}'.format(threshold): float(100.0 * np.mean(ious >= threshold))
        for threshold in RECALL_THRESHOLDS
    }
    metrics['mIoU'] = float(100.0 * ious.mean())
    metrics['parse_failure_rate'] = failures / len(records)
    metrics['count'] = len(records)

    return metrics


@log_duration('Evaluation')
def evaluate(model, dataset, max_tokens=MAX_ANSWER_TOKENS, threads=None):
    ''' :returns: `(metrics, predictions)`. '''

    if not len(dataset):
        raise DiagnosticsError('empty evaluation split.')

    predictions = map_ordered(
        lambda sample: predict_window(model, sample, max_tokens),
        dataset.samples, threads=threads)

    metrics = metrics_from_predictions(predictions)

    LOGGER.info('{0} ({1}): mIoU {2:.2f}, R1@0.5 {3:.2f}, {4} parse '
                'failures.'.format(dataset.split, dataset.domain,
                                   metrics['mIoU'], metrics['R1@0.5'],
                                   int(metrics['parse_failure_rate']
                                       * metrics['count'])))

    return metrics, predictions
