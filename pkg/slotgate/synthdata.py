"""
Synthetic cross-domain grounding benchmark.

Every frame holds exactly four token groups: background and three entities.
A query “SUBJ VERB OBJ” is answered by the maximal frame span where subject
and object co-occur; outside it at most one of them appears. Subject-only
queries (“SUBJ VERB”) are answered by the subject's presence span.

Visual tokens live in the decoder's embedding space. One orthogonal basis is
cut into column blocks: the first spans entity identities, shared by all
domains; each styled domain textures tokens within its own block, so domains
share concepts while their visual statistics differ.
"""

import os
import logging
import dataclasses

from typing import Optional

import numpy as np

from scipy.linalg import subspace_angles

from slotgate.constants import (
    ENTITY_WORDS,
    VERB_WORDS,
    DATASET_FORMAT_VERSION,
    MANIFEST_FILENAME,
    SAMPLES_FILENAME,
    CONCEPTS_FILENAME,
    VIDEOS_DIRNAME,
)
from slotgate.decoder import TimeWindow
from slotgate.exceptions import (
    ConfigError,
    GenerationError,
    ManifestError,
    ChecksumMismatchError,
)
from slotgate.gating import ConceptAnnotation
from slotgate.parallel import map_ordered
from slotgate.store import (
    write_tensor,
    read_tensor,
    write_json,
    read_json,
    write_jsonl,
    read_jsonl,
    sha256_file,
    check_file_exists,
)


LOGGER = logging.getLogger(__name__)

# Column block of the shared basis used by each domain style.
DOMAIN_BLOCKS = {
    'identity': None,
    'A': 1,
    'B': 2,
    'C': 3,
}

GROUPS_PER_FRAME = 4
MIN_STYLE_ANGLE = np.pi / 4

WORLD_STREAM = 0
SPLIT_STREAMS = {'train': 1, 'id_eval': 2, 'ood_eval': 3}


# ————————————————————————————————————————————————————————————————— Config


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    num_train: int = 2000
    num_eval: int = 500
    frames: int = 10
    tokens_per_frame: int = 16
    hidden_dim: int = 64
    teacher_dim: int = 32
    teacher_pool: int = 2
    teacher_noise: float = 0.05
    entity_count: int = 12
    entity_scale: float = 1.0
    noise_scale: float = 0.1
    texture_scale: float = 0.5
    background_scale: float = 1.0
    style_rank: int = 16
    min_window: int = 2
    absent_object_rate: float = 0.1
    train_domain: str = 'A'
    ood_domain: str = 'B'

    def __post_init__(self):

        if self.frames < 1:
            raise ConfigError('synth.frames', 'must be positive.')

        if self.tokens_per_frame < GROUPS_PER_FRAME:
            raise ConfigError('synth.tokens_per_frame',
                              'must be at least {0}.'.format(GROUPS_PER_FRAME))

        side = int(round(np.sqrt(self.tokens_per_frame)))

        if side * side != self.tokens_per_frame:
            raise ConfigError('synth.tokens_per_frame',
                              'must be a square number.')

        if not 5 <= self.entity_count <= len(ENTITY_WORDS):
            raise ConfigError('synth.entity_count', 'must lie in 5-{0}.'.format(
                len(ENTITY_WORDS)))

        if self.hidden_dim < GROUPS_PER_FRAME * self.style_rank:
            raise ConfigError('synth.style_rank',
                              'needs hidden_dim ≥ {0}·style_rank.'.format(
                                  GROUPS_PER_FRAME))

        if self.min_window < 1:
            raise ConfigError('synth.min_window', 'must be positive.')

        if not 0.0 <= self.absent_object_rate <= 1.0:
            raise ConfigError('synth.absent_object_rate',
                              'must lie in [0, 1].')

        if self.teacher_pool < 1:
            raise ConfigError('synth.teacher_pool', 'must be positive.')

        for name in ('train_domain', 'ood_domain'):
            if getattr(self, name) not in DOMAIN_BLOCKS:
                raise ConfigError('synth.{0}'.format(name),
                                  'must be one of {0}.'.format(
                                      ', '.join(DOMAIN_BLOCKS)))

    @property
    def grid_side(self):
        return int(round(np.sqrt(self.tokens_per_frame)))


# ————————————————————————————————————————————————————————————————— Classes


@dataclasses.dataclass
class World:
    ''' Seed-level constants shared by every split and domain. '''

    basis: np.ndarray
    concepts: np.ndarray
    teacher_table: np.ndarray
    neutral_background: np.ndarray
    style_rank: int

    def style_subspace(self, domain):

        block = DOMAIN_BLOCKS[domain]

        if block is None:
            return None

        return self.basis[:, block * self.style_rank:
                          (block + 1) * self.style_rank]


@dataclasses.dataclass
class DomainStyle:
    ''' Texture subspace (D, r) or `None`, background vector, noise. '''

    name: str
    subspace: Optional[np.ndarray]
    background: np.ndarray
    texture_scale: float
    noise_scale: float


@dataclasses.dataclass
class SyntheticSample:
    video_id: str
    visual: np.ndarray
    masks: np.ndarray
    query: tuple
    annotation: ConceptAnnotation
    window: TimeWindow
    frame_span: tuple
    domain: str
    subject: int
    object: Optional[int]
    teacher: Optional[np.ndarray] = None

    @property
    def num_frames(self):
        return self.visual.shape[0]


@dataclasses.dataclass
class Dataset:
    config: dict
    domain: str
    split: str
    seed: int
    concepts: np.ndarray
    samples: list

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


# ————————————————————————————————————————————————————————————————— World


def build_world(cfg, seed):

    rng = np.random.default_rng(np.random.SeedSequence([seed, WORLD_STREAM]))

    basis, _ = np.linalg.qr(rng.standard_normal(
        (cfg.hidden_dim, cfg.hidden_dim)))

    entity_block = basis[:, :cfg.style_rank]

    def unit_rows(count, width):
        rows = rng.standard_normal((count, width))
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)

    concepts = cfg.entity_scale * (
        unit_rows(cfg.entity_count, cfg.style_rank) @ entity_block.T)

    # Entities then background; independent of any domain.
    teacher_table = unit_rows(cfg.entity_count + 1, cfg.teacher_dim)

    neutral_background = unit_rows(1, cfg.style_rank)[0] @ entity_block.T

    return World(basis=basis, concepts=concepts, teacher_table=teacher_table,
                 neutral_background=neutral_background,
                 style_rank=cfg.style_rank)


def domain_style(world, cfg, domain):

    subspace = world.style_subspace(domain)

    if subspace is None:
        background = world.neutral_background
        texture = 0.0

    else:
        background = subspace[:, 0]
        texture = cfg.texture_scale

    return DomainStyle(name=domain, subspace=subspace,
                       background=cfg.background_scale * background,
                       texture_scale=texture, noise_scale=cfg.noise_scale)


def style_gap(world, first, second):
    ''' Smallest principal angle between two domains' style subspaces;
        π/2 when either is unstyled. '''

    a, b = world.style_subspace(first), world.style_subspace(second)

    if a is None or b is None:
        return np.pi / 2

    return float(np.min(subspace_angles(a, b)))


def check_style_gap(world, first, second):

    if first == second:
        return

    angle = style_gap(world, first, second)

    if angle <= MIN_STYLE_ANGLE:
        raise GenerationError('style subspaces of {0} and {1} are only '
                              '{2:.1f}° apart.'.format(
                                  first, second, np.degrees(angle)))

    LOGGER.info('Style gap {0}/{1}: {2:.1f}°.'.format(
        first, second, np.degrees(angle)))


# ——————————————————————————————————————————————————————————————— Samples


def cooccurrence_span(masks, subject, obj=None):
    ''' Maximal contiguous frame span where :param:`subject` (and
        :param:`obj` when given) are present; `None` if never. '''

    present = (masks == subject).any(axis=1)

    if obj is not None:
        present &= (masks == obj).any(axis=1)

    best, start = None, None

    for frame, flag in enumerate(list(present) + [False]):
        if flag and start is None:
            start = frame

        elif not flag and start is not None:
            if best is None or frame - start > best[1] - best[0] + 1:
                best = (start, frame - 1)

            start = None

    return best


def frame_groups(rng, subject, obj, inside, entity_count):
    ''' The three entity ids of one frame. '''

    if inside:
        present = [subject] if obj is None else [subject, obj]

    elif obj is None:
        present = []

    else:
        present = [[subject], [obj], []][int(rng.integers(3))]

    excluded = {subject} if obj is None else {subject, obj}
    pool = np.array([entity for entity in range(entity_count)
                     if entity not in excluded])
    extra = rng.choice(pool, size=GROUPS_PER_FRAME - 1 - len(present),
                       replace=False)

    return present + [int(entity) for entity in extra]


def frame_masks(rng, entities, background_id, tokens):
    ''' Random token partition into background and the three entities,
        each group non-empty. '''

    sizes = 1 + rng.multinomial(tokens - GROUPS_PER_FRAME,
                                [1.0 / GROUPS_PER_FRAME] * GROUPS_PER_FRAME)
    labels = np.repeat([background_id] + list(entities), sizes)

    return labels[rng.permutation(tokens)]


def render_tokens(rng, masks, world, style, cfg):
    ''' Entity embedding or style background, plus style texture and
        isotropic noise, for every token. '''

    frames, tokens = masks.shape

    # Background is the last row, id `entity_count`.
    table = np.vstack([world.concepts, style.background[None, :]])
    visual = table[masks.reshape(-1)].reshape(frames, tokens, cfg.hidden_dim)

    if style.subspace is not None and style.texture_scale:
        coefficients = rng.standard_normal(
            (frames, tokens, style.subspace.shape[1]))
        visual = visual + style.texture_scale * (
            coefficients @ style.subspace.T) / np.sqrt(style.subspace.shape[1])

    if style.noise_scale:
        visual = visual + style.noise_scale * rng.standard_normal(
            visual.shape) / np.sqrt(cfg.hidden_dim)

    return visual


def teacher_oracle(sample, world, cfg, rng=None, noise=None):
    ''' Stand-in for self-supervised patch features: the unit embedding of
        each token's entity id plus Gaussian noise, on a grid
        :attr:`SynthConfig.teacher_pool` times finer than the tokens.

        :returns: (T, P, F) features with P = (pool·√N)².
    '''

    if noise is None:
        noise = cfg.teacher_noise

    frames, tokens = sample.masks.shape
    side = int(round(np.sqrt(tokens)))
    pool = cfg.teacher_pool

    grid = sample.masks.reshape(frames, side, side)
    grid = np.repeat(np.repeat(grid, pool, axis=1), pool, axis=2)

    features = world.teacher_table[grid.reshape(frames, -1)]

    if noise:
        if rng is None:
            raise GenerationError('a noisy teacher needs a generator.')

        features = features + noise * rng.standard_normal(features.shape)

    return features


def make_sample(index, cfg, world, style, seed, split):

    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, SPLIT_STREAMS.get(split, 9), index]))

    frames = cfg.frames

    if cfg.min_window > frames:
        raise GenerationError('a {0}-frame window does not fit {1} '
                              'frames.'.format(cfg.min_window, frames))

    subject, obj = (int(entity) for entity in rng.choice(
        cfg.entity_count, size=2, replace=False))

    if rng.random() < cfg.absent_object_rate:
        obj = None

    length = int(rng.integers(cfg.min_window, frames + 1))
    first = int(rng.integers(0, frames - length + 1))
    last = first + length - 1

    masks = np.stack([
        frame_masks(rng, frame_groups(rng, subject, obj,
                                      first <= frame <= last,
                                      cfg.entity_count),
                    cfg.entity_count, cfg.tokens_per_frame)
        for frame in range(frames)
    ])

    verb = VERB_WORDS[int(rng.integers(len(VERB_WORDS)))]

    if obj is None:
        query = (ENTITY_WORDS[subject], verb)
        annotation = ConceptAnnotation(subject_index=0)

    else:
        query = (ENTITY_WORDS[subject], verb, ENTITY_WORDS[obj])
        annotation = ConceptAnnotation(subject_index=0, object_index=2)

    sample = SyntheticSample(
        video_id='{0}-{1}-{2:05d}'.format(split, style.name, index),
        visual=render_tokens(rng, masks, world, style, cfg),
        masks=masks,
        query=query,
        annotation=annotation,
        window=TimeWindow.from_frames(first, last, frames),
        frame_span=(first, last),
        domain=style.name,
        subject=subject,
        object=obj,
    )

    if cooccurrence_span(masks, subject, obj) != (first, last):
        raise GenerationError('{0}: window does not match co-occurrence.'.format(
            sample.video_id))

    sample.teacher = teacher_oracle(sample, world, cfg, rng)

    return sample


def generate(cfg, domain, num_samples, seed, split='train', threads=None):
    ''' A dataset of :param:`num_samples` samples in :param:`domain`.
        Each sample draws from its own seed, so results do not depend on
        thread count or order. '''

    world = build_world(cfg, seed)
    style = domain_style(world, cfg, domain)

    samples = map_ordered(
        lambda index: make_sample(index, cfg, world, style, seed, split),
        range(num_samples), threads=threads)

    LOGGER.info('Generated {0} {1} samples in domain {2}.'.format(
        num_samples, split, domain))

    return Dataset(config=dataclasses.asdict(cfg), domain=domain, split=split,
                   seed=seed, concepts=world.concepts, samples=samples)


def generate_benchmark(cfg, seed, threads=None):
    ''' Train and in-domain eval splits in the train domain, out-of-domain
        eval split in the other one, after checking their style gap. '''

    check_style_gap(build_world(cfg, seed), cfg.train_domain, cfg.ood_domain)

    return {
        'train': generate(cfg, cfg.train_domain, cfg.num_train, seed,
                          'train', threads),
        'id_eval': generate(cfg, cfg.train_domain, cfg.num_eval, seed,
                            'id_eval', threads),
        'ood_eval': generate(cfg, cfg.ood_domain, cfg.num_eval, seed,
                             'ood_eval', threads),
    }


# ———————————————————————————————————————————————————————————————— Storage


MANIFEST_FIELDS = ('format_version', 'config', 'domain', 'split', 'seed',
                   'num_samples', 'files')
SAMPLE_FIELDS = ('video_id', 'query', 'annotation', 'window', 'frame_span',
                 'domain', 'subject', 'object', 'files')


def sample_files(video_id):

    return {
        kind: '{0}/{1}.{2}.bin'.format(VIDEOS_DIRNAME, video_id, kind)
        for kind in ('visual', 'masks', 'teacher')
    }


def write_dataset(dataset, directory):
    ''' Tensor files per video, `samples.jsonl`, the concept table and a
        manifest with every file's checksum. '''

    os.makedirs(os.path.join(directory, VIDEOS_DIRNAME), exist_ok=True)

    records = []
    written = []

    concepts = CONCEPTS_FILENAME + '.bin'
    write_tensor(os.path.join(directory, concepts), dataset.concepts)
    written.append(concepts)

    for sample in dataset.samples:
        files = sample_files(sample.video_id)

        write_tensor(os.path.join(directory, files['visual']), sample.visual)
        write_tensor(os.path.join(directory, files['masks']), sample.masks)
        write_tensor(os.path.join(directory, files['teacher']), sample.teacher)
        written.extend(files.values())

        records.append({
            'video_id': sample.video_id,
            'query': list(sample.query),
            'annotation': sample.annotation.as_dict(),
            'window': sample.window.as_list(),
            'frame_span': list(sample.frame_span),
            'domain': sample.domain,
            'subject': sample.subject,
            'object': sample.object,
            'files': files,
        })

    write_jsonl(os.path.join(directory, SAMPLES_FILENAME), records)
    written.append(SAMPLES_FILENAME)

    write_json(os.path.join(directory, MANIFEST_FILENAME), {
        'format_version': DATASET_FORMAT_VERSION,
        'config': dataset.config,
        'domain': dataset.domain,
        'split': dataset.split,
        'seed': dataset.seed,
        'num_samples': len(dataset.samples),
        'files': {name: sha256_file(os.path.join(directory, name))
                  for name in sorted(written)},
    })

    LOGGER.info('Dataset of {0} samples written to “{1}”.'.format(
        len(dataset.samples), directory))

    return directory


def read_manifest(directory):

    manifest = read_json(os.path.join(directory, MANIFEST_FILENAME))

    if not isinstance(manifest, dict):
        raise ManifestError('manifest', 'must be a mapping.')

    for field in MANIFEST_FIELDS:
        if field not in manifest:
            raise ManifestError(field, 'missing from dataset manifest.')

    if manifest['format_version'] != DATASET_FORMAT_VERSION:
        raise ManifestError('format_version', 'unsupported version {0}.'.format(
            manifest['format_version']))

    if not isinstance(manifest['files'], dict):
        raise ManifestError('files', 'must map file names to checksums.')

    if not isinstance(manifest['num_samples'], int):
        raise ManifestError('num_samples', 'must be an integer.')

    return manifest


def verify_checksums(directory, manifest):

    for name, checksum in sorted(manifest['files'].items()):
        path = os.path.join(directory, name)

        check_file_exists(path, 'dataset file')

        if sha256_file(path) != checksum:
            raise ChecksumMismatchError(
                path, 'checksum mismatch for “{0}”.'.format(path))


def read_dataset(directory, verify=True):

    manifest = read_manifest(directory)

    if verify:
        verify_checksums(directory, manifest)

    records = read_jsonl(os.path.join(directory, SAMPLES_FILENAME))

    if len(records) != manifest['num_samples']:
        raise ManifestError('num_samples', '{0} records for {1} '
                            'declared.'.format(len(records),
                                               manifest['num_samples']))

    samples = []

    for record in records:
        for field in SAMPLE_FIELDS:
            if field not in record:
                raise ManifestError('samples.{0}'.format(field),
                                    'missing in {0}.'.format(
                                        record.get('video_id', '?')))

        files = record['files']

        samples.append(SyntheticSample(
            video_id=record['video_id'],
            visual=read_tensor(os.path.join(directory, files['visual'])),
            masks=read_tensor(os.path.join(
                directory, files['masks'])).astype(np.int64),
            query=tuple(record['query']),
            annotation=ConceptAnnotation.from_dict(record['annotation']),
            window=TimeWindow(*record['window']),
            frame_span=tuple(record['frame_span']),
            domain=record['domain'],
            subject=record['subject'],
            object=record['object'],
            teacher=read_tensor(os.path.join(directory, files['teacher'])),
        ))

    LOGGER.info('Dataset of {0} samples read from “{1}”.'.format(
        len(samples), directory))

    return Dataset(
        config=manifest['config'],
        domain=manifest['domain'],
        split=manifest['split'],
        seed=manifest['seed'],
        concepts=read_tensor(os.path.join(directory,
                                          CONCEPTS_FILENAME + '.bin')),
        samples=samples,
    )


def synth_config_from_dict(data):

    return SynthConfig(**data)
