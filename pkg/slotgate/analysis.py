"""
Diagnostics of trained checkpoints.

Slot attention sharpness and overlap per adapter layer, visual similarity of
evaluation videos to a reference split, noise injected into chosen frame
intervals, and the share of answer attention spent on ground-truth frames.
Every report flattens to CSV rows plus a JSON summary.
"""

import os
import zlib
import logging
import dataclasses

import numpy as np

from scipy.special import entr

from slotgate.constants import (
    NOISE_TARGETS,
    RECALL_THRESHOLDS,
    MAX_ANSWER_TOKENS,
)
from slotgate.decoder import build_sequence, decoder_forward
from slotgate.distill import binding_iou
from slotgate.exceptions import DiagnosticsError, ShapeError
from slotgate.parallel import map_ordered
from slotgate.store import write_csv, write_json
from slotgate.trainer import evaluate


LOGGER = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-6
NOISE_STREAM = 21

METRIC_KEYS = tuple('R1@{0}'.format(threshold)
                    for threshold in RECALL_THRESHOLDS) + ('mIoU', )


# ————————————————————————————————————————————————————————————— Slot maps


@dataclasses.dataclass
class SlotDiagnostics:
    ''' Mean slot entropy (nats) and mean pairwise inter-slot cosine of the
        token-normalized slot maps, by adapter layer. '''

    entropy: dict
    cosine: dict
    num_tokens: int
    binding: dict = dataclasses.field(default_factory=dict)

    @property
    def uniform_bound(self):
        return float(np.log(self.num_tokens))

    def rows(self):

        return [
            {
                'layer': layer,
                'entropy': self.entropy[layer],
                'uniform_bound': self.uniform_bound,
                'cosine': self.cosine[layer],
                'binding_iou': self.binding.get(layer, ''),
            }
            for layer in sorted(self.entropy)
        ]

    def as_dict(self):

        return {
            'num_tokens': self.num_tokens,
            'uniform_bound': self.uniform_bound,
            'layers': self.rows(),
        }


def check_token_normalized(maps, layer):

    sums = maps.sum(axis=-2)

    if np.any(maps < 0) or np.max(np.abs(sums - 1.0)) > NORMALIZATION_TOLERANCE:
        raise DiagnosticsError('layer {0}: slot maps are not normalized over '
                               'tokens (column sums {1:.6g}–{2:.6g}).'.format(
                                   layer, sums.min(), sums.max()))


def slot_entropy(maps):
    ''' Mean over slots and frames of `−Σ_n p·ln p`, maps (…, N, K). '''

    return float(entr(maps).sum(axis=-2).mean())


def slot_cosine(maps):
    ''' Mean cosine over unordered slot pairs of (…, N, K) maps. '''

    maps = maps.reshape((-1, ) + maps.shape[-2:])
    slots = maps.shape[-1]

    if slots < 2:
        raise DiagnosticsError('pairwise cosine needs two slots.')

    norms = np.linalg.norm(maps, axis=1, keepdims=True)
    unit = maps / np.maximum(norms, 1e-12)

    gram = np.einsum('fnk,fnj->fkj', unit, unit)
    upper = np.triu_indices(slots, k=1)

    return float(gram[:, upper[0], upper[1]].mean())


def slot_diagnostics(maps_by_layer):
    ''' :param maps_by_layer: layer → token-normalized maps (…, N, K), each
        slot a distribution over the N tokens of its frame.

        :raises DiagnosticsError: on empty or unnormalized maps.
    '''

    if not maps_by_layer:
        raise DiagnosticsError('no slot maps to diagnose.')

    entropy, cosine = {}, {}
    num_tokens = None

    for layer, maps in sorted(maps_by_layer.items()):
        maps = np.asarray(maps, dtype=np.float64)

        if maps.ndim < 2 or maps.size == 0:
            raise DiagnosticsError('layer {0}: empty slot maps.'.format(layer))

        check_token_normalized(maps, layer)

        if num_tokens is not None and maps.shape[-2] != num_tokens:
            raise ShapeError('layers disagree on the token count.')

        num_tokens = maps.shape[-2]

        entropy[layer] = slot_entropy(maps)
        cosine[layer] = slot_cosine(maps)

    return SlotDiagnostics(entropy=entropy, cosine=cosine,
                           num_tokens=num_tokens)


def collect_slot_maps(model, dataset, limit=None, threads=None):
    ''' Final-iteration maps of every slot adapter layer over
        :param:`dataset` (the first :param:`limit` samples).

        :returns: `(token_maps, slot_maps)`, both layer → (S, T, N, K).
    '''

    samples = dataset.samples[:limit] if limit else dataset.samples

    if not samples:
        raise DiagnosticsError('empty split.')

    embedding = model.embedding_table()

    def forward(sample):
        sequence = build_sequence(sample, model.vocab, embedding)
        states = decoder_forward(sequence, model, sample.annotation).states

        return {
            layer: (state.final_token_attention.data,
                    state.final_attention.data)
            for layer, state in states.items() if state.has_slots
        }

    results = map_ordered(forward, samples, threads=threads)

    if not results[0]:
        raise DiagnosticsError('the model has no slot adapter layers.')

    token_maps = {layer: np.stack([result[layer][0] for result in results])
                  for layer in results[0]}
    slot_maps = {layer: np.stack([result[layer][1] for result in results])
                 for layer in results[0]}

    return token_maps, slot_maps


def diagnose_slots(model, dataset, limit=None, threads=None):
    ''' Slot diagnostics plus argmax-slot binding IoU against the
        ground-truth entity masks. '''

    samples = dataset.samples[:limit] if limit else dataset.samples
    token_maps, slot_maps = collect_slot_maps(model, dataset, limit, threads)

    report = slot_diagnostics(token_maps)

    report.binding = {
        layer: float(np.mean([binding_iou(maps[index], sample.masks)
                              for index, sample in enumerate(samples)]))
        for layer, maps in slot_maps.items()
    }

    for row in report.rows():
        LOGGER.info('layer {layer}: entropy {entropy:.3f} (bound '
                    '{uniform_bound:.3f}), cosine {cosine:.3f}, binding IoU '
                    '{binding_iou:.3f}.'.format(**row))

    return report


# —————————————————————————————————————————————————————— Visual similarity


@dataclasses.dataclass
class SimilarityReport:
    centroid: np.ndarray
    probe_ids: list
    cosines: np.ndarray
    assignments: np.ndarray
    edges: list
    bin_sizes: list

    def rows(self):

        return [
            {'video_id': video_id, 'cosine': float(cosine), 'bin': int(bin_)}
            for video_id, cosine, bin_ in sorted(
                zip(self.probe_ids, self.cosines, self.assignments),
                key=lambda row: (row[2], row[1], row[0]))
        ]

    def as_dict(self):

        return {
            'bins': len(self.bin_sizes),
            'bin_sizes': list(self.bin_sizes),
            'edges': list(self.edges),
            'mean_cosine': float(np.mean(self.cosines)),
            'bin_means': [
                float(np.mean(self.cosines[self.assignments == bin_]))
                for bin_ in range(len(self.bin_sizes))
            ],
        }


def video_descriptor(visual):
    ''' Mean of per-frame token means of a (T, N, D) video. '''

    visual = np.asarray(visual, dtype=np.float64)

    if visual.ndim != 3:
        raise ShapeError('expected a (T, N, D) video, got {0}.'.format(
            visual.shape))

    return visual.mean(axis=1).mean(axis=0)


def cosine_to(vector, centroid):

    norm = np.linalg.norm(vector) * np.linalg.norm(centroid)

    if norm <= 1e-12:
        return 0.0

    return float(np.dot(vector, centroid) / norm)


def similarity_report(reference, probe, bins=5, probe_ids=None):
    ''' Rank :param:`probe` videos by cosine to the centroid of the
        :param:`reference` descriptors, in equal quantile bins (sizes differ
        by at most one, bin 0 least similar). Ties are broken by video id,
        so the report does not depend on probe order.

        :param reference: iterable of (T, N, D) videos.
        :param probe: iterable of (T, N, D) videos.
        :param probe_ids: names of the probe videos, default their index.
    '''

    reference = [video_descriptor(video) for video in reference]
    probe = [video_descriptor(video) for video in probe]

    if not reference or not probe:
        raise DiagnosticsError('similarity needs non-empty reference and '
                               'probe splits.')

    if len({vector.shape for vector in reference + probe}) != 1:
        raise ShapeError('descriptor widths differ between splits.')

    if not 1 <= bins <= len(probe):
        raise DiagnosticsError('{0} bins for {1} probe videos.'.format(
            bins, len(probe)))

    if probe_ids is None:
        probe_ids = [str(index) for index in range(len(probe))]

    probe_ids = [str(video_id) for video_id in probe_ids]

    if len(probe_ids) != len(probe):
        raise ShapeError('{0} ids for {1} probe videos.'.format(
            len(probe_ids), len(probe)))

    centroid = np.mean(reference, axis=0)
    cosines = np.array([cosine_to(vector, centroid) for vector in probe])

    order = sorted(range(len(probe)),
                   key=lambda index: (cosines[index], probe_ids[index]))

    assignments = np.zeros(len(probe), dtype=np.int64)
    edges = [float(cosines[order[0]])]
    sizes = []

    for bin_, members in enumerate(np.array_split(np.array(order), bins)):
        assignments[members] = bin_
        edges.append(float(cosines[members[-1]]))
        sizes.append(len(members))

    return SimilarityReport(centroid=centroid, probe_ids=probe_ids,
                            cosines=cosines, assignments=assignments,
                            edges=edges, bin_sizes=sizes)


# ———————————————————————————————————————————————————————————— Noise probes


@dataclasses.dataclass
class NoiseProbe:
    target: str
    sigma: float
    clean: dict
    noisy: dict

    @property
    def deltas(self):
        ''' Noisy minus clean, per metric; negative means a drop. '''

        return {key: self.noisy[key] - self.clean[key] for key in METRIC_KEYS}

    def row(self):

        row = {'target': self.target, 'sigma': self.sigma}

        for key in METRIC_KEYS:
            row['clean_' + key] = self.clean[key]
            row['noisy_' + key] = self.noisy[key]
            row['delta_' + key] = self.deltas[key]

        return row


def random_interval(rng, num_frames, span):
    ''' Frames of a same-length interval avoiding the :param:`span`
        `(first, last)` when the video leaves room, else overlapping it as
        little as possible. '''

    first, last = span
    length = last - first + 1

    if length > num_frames:
        raise DiagnosticsError('interval of {0} frames in a {1}-frame '
                               'video.'.format(length, num_frames))

    starts = np.arange(num_frames - length + 1)
    overlap = np.maximum(0, np.minimum(starts + length - 1, last)
                         - np.maximum(starts, first) + 1)
    candidates = starts[overlap == overlap.min()]

    start = int(candidates[rng.integers(len(candidates))])

    return np.arange(start, start + length)


def noise_frames(rng, num_frames, span, target):

    first, last = span

    if not 0 <= first <= last or last - first + 1 > num_frames:
        raise DiagnosticsError('interval {0}–{1} does not fit {2} '
                               'frames.'.format(first, last, num_frames))

    if target == 'gt_interval':
        return np.arange(first, last + 1)

    if target == 'random_interval':
        return random_interval(rng, num_frames, span)

    if target == 'non_gt_all':
        frames = np.arange(num_frames)
        return frames[(frames < first) | (frames > last)]

    raise DiagnosticsError('unknown noise target “{0}”, expected one of '
                           '{1}.'.format(target, ', '.join(NOISE_TARGETS)))


def add_interval_noise(sample, target, sigma, seed):
    ''' Copy of :param:`sample` with N(0, σ²) added to the visual tokens
        of the chosen frames. '''

    rng = np.random.default_rng(np.random.SeedSequence([
        int(seed), NOISE_STREAM, NOISE_TARGETS.index(target),
        zlib.crc32(sample.video_id.encode('utf-8'))]))

    frames = noise_frames(rng, sample.num_frames, sample.frame_span, target)
    visual = sample.visual.copy()

    if sigma and len(frames):
        visual[frames] += sigma * rng.standard_normal(visual[frames].shape)

    return dataclasses.replace(sample, visual=visual)


def noise_probe(model, dataset, target, sigma, seed, clean=None,
                max_tokens=MAX_ANSWER_TOKENS, threads=None):
    ''' Re-evaluate :param:`dataset` with noise in the :param:`target`
        frames of every sample.

        :param clean: clean metrics when already known.
    '''

    if target not in NOISE_TARGETS:
        raise DiagnosticsError('unknown noise target “{0}”.'.format(target))

    if sigma < 0:
        raise DiagnosticsError('noise σ must not be negative.')

    if clean is None:
        clean, _ = evaluate(model, dataset, max_tokens, threads)

    noisy_dataset = dataclasses.replace(dataset, samples=[
        add_interval_noise(sample, target, sigma, seed)
        for sample in dataset.samples
    ])

    noisy, _ = evaluate(model, noisy_dataset, max_tokens, threads)

    probe = NoiseProbe(target=target, sigma=float(sigma), clean=clean,
                       noisy=noisy)

    LOGGER.info('Noise on {0} (σ={1}): ΔmIoU {2:+.2f}, ΔR1@0.7 '
                '{3:+.2f}.'.format(target, sigma, probe.deltas['mIoU'],
                                   probe.deltas['R1@0.7']))

    return probe


# ——————————————————————————————————————————————————— Ground-truth attention


def gt_attention_ratio(model, sample):
    ''' Share of the answer rows' attention to visual tokens that lands on
        frames of the target window, averaged over answer rows, heads and
        layers, with the reference answer teacher-forced. '''

    vocab = model.vocab
    sequence = build_sequence(sample, vocab, model.embedding_table(),
                              vocab.render_answer(sample.window))
    layout = sequence.layout

    result = decoder_forward(sequence, model, sample.annotation,
                             record_attention=True)

    first, last = sample.frame_span
    inside = np.concatenate([np.arange(*layout.frame_spans[frame])
                             for frame in range(first, last + 1)])
    rows = np.arange(layout.answer_start, layout.length)

    ratios = []

    for weights in result.attention.values():
        answer = weights[:, rows, :]
        total = answer[:, :, layout.visual_index].sum(axis=-1)
        ratios.append(answer[:, :, inside].sum(axis=-1)
                      / np.maximum(total, 1e-300))

    return float(np.mean(ratios))


def mean_gt_attention_ratio(model, dataset, limit=None, threads=None):

    samples = dataset.samples[:limit] if limit else dataset.samples

    if not samples:
        raise DiagnosticsError('empty split.')

    return float(np.mean(map_ordered(
        lambda sample: gt_attention_ratio(model, sample), samples,
        threads=threads)))


# ———————————————————————————————————————————————————————————————— Writers


def write_report(directory, name, rows, summary):
    ''' `<name>.csv` and `<name>.json` in :param:`directory`. '''

    os.makedirs(directory, exist_ok=True)

    csv_filename = write_csv(os.path.join(directory, name + '.csv'), rows)
    write_json(os.path.join(directory, name + '.json'), summary)

    LOGGER.info('Report “{0}” written to “{1}”.'.format(name, directory))

    return csv_filename
