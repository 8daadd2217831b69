"""
Command line entry point.

    slotgate [global flags] {generate,train,eval,diagnose,ablate} [flags]

Settings come from the packaged defaults, then `--config`, then flags.
Every run writes its resolved settings to `<out>/resolved_config.json`;
passing that file back with `--config` replays the run.
"""

import os
import sys
import logging
import argparse
import dataclasses

import numpy as np

from slotgate.adapter import AdapterConfig
from slotgate.analysis import (
    METRIC_KEYS,
    diagnose_slots,
    similarity_report,
    noise_probe,
    mean_gt_attention_ratio,
    write_report,
)
from slotgate.constants import (
    APP_NAME,
    APP_VERSION,
    ExitCodes,
    GATING_MODES,
    GATING_SOURCES,
    LAYER_SELECTIONS,
    RECONSTRUCTIONS,
    RECONSTRUCTION_MAPS,
    BOTTLENECKS,
    PLACEMENTS,
    EBD_MAPS,
    NOISE_TARGETS,
    SPLITS,
    EVAL_SPLITS,
    DATA_DIRNAME,
    CHECKPOINT_DIRNAME,
    ABLATION_DIRNAME,
    DIAGNOSTICS_DIRNAME,
    METRICS_FILENAME,
    PREDICTIONS_FILENAME,
)
from slotgate.decoder import (
    DecoderConfig,
    Model,
    Vocabulary,
    init_model,
)
from slotgate.distill import DistillConfig
from slotgate.exceptions import (
    SlotgateError,
    StoreError,
    UsageError,
)
from slotgate.gating import GatingConfig
from slotgate.logging import setup_logging
from slotgate.parallel import set_max_threads
from slotgate.preferences import (
    gpod,
    resolve_settings,
    merge_settings,
    write_resolved_settings,
    build_config,
)
from slotgate.foundations import AttributeDict
from slotgate.sentry import sentry
from slotgate.store import (
    save_checkpoint,
    load_checkpoint,
    write_json,
    write_jsonl,
    write_csv,
)
from slotgate.strings import format_mean_std
from slotgate.synthdata import (
    SynthConfig,
    generate_benchmark,
    write_dataset,
    read_dataset,
    synth_config_from_dict,
)
from slotgate.trainer import TrainConfig, train, pretrain, evaluate


LOGGER = logging.getLogger(__name__)

MODEL_STREAM = 31
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


# ————————————————————————————————————————————————————————————————— Config


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = 'runs/latest'
    threads: int = 1
    log_level: str = 'INFO'
    colors: object = None
    sentry_dsn: object = None
    progress_every_seconds: float = 10.0

    def __post_init__(self):

        if self.threads < 1:
            raise UsageError('run.threads', 'must be at least 1.')

        if self.log_level not in LOG_LEVELS:
            raise UsageError('run.log_level', 'must be one of {0}.'.format(
                ', '.join(LOG_LEVELS)))

        if not self.out:
            raise UsageError('run.out', 'must not be empty.')


# Flag → (section, setting, argparse keywords). One flag per ablation switch.
SWITCHES = (
    ('--adapter', 'adapter', 'enabled', {'choices': ('on', 'off')}),
    ('--adapter-layers', 'adapter', 'layers', {'metavar': 'LAYERS'}),
    ('--placement', 'adapter', 'placement', {'choices': PLACEMENTS}),
    ('--bottleneck', 'adapter', 'bottleneck', {'choices': BOTTLENECKS}),
    ('--reconstruction', 'adapter', 'reconstruction',
     {'choices': RECONSTRUCTIONS}),
    ('--reconstruction-map', 'adapter', 'reconstruction_map',
     {'choices': RECONSTRUCTION_MAPS}),
    ('--lowrank', 'decoder', 'lowrank_enabled', {'choices': ('on', 'off')}),
    ('--ebd-weight', 'distill', 'weight', {'type': float, 'metavar': 'λ'}),
    ('--ebd-map', 'distill', 'attention_map', {'choices': EBD_MAPS}),
    ('--ebd-layers', 'distill', 'layers', {'choices': LAYER_SELECTIONS}),
    ('--gating', 'gating', 'mode', {'choices': GATING_MODES}),
    ('--gating-source', 'gating', 'source', {'choices': GATING_SOURCES}),
    ('--gating-layers', 'gating', 'layers', {'choices': LAYER_SELECTIONS}),
    ('--steps', 'train', 'steps', {'type': int}),
)

LOWRANK_ONLY = {
    'adapter': {'enabled': False},
    'distill': {'weight': 0.0},
    'gating': {'mode': 'off'},
}
PLAIN_ADAPTER = {'distill': {'weight': 0.0}, 'gating': {'mode': 'off'}}

# Ablation grids: name → ordered (row label, settings overrides).
GRIDS = {
    'components': (
        ('low-rank', LOWRANK_ONLY),
        ('+adapter', PLAIN_ADAPTER),
        ('+adapter+ebd', {'gating': {'mode': 'off'}}),
        ('+adapter+ebd+gating', {}),
    ),
    'placement': (
        ('low-rank', LOWRANK_ONLY),
        ('pre-decoder', {'adapter': {'placement': 'pre-decoder'}}),
        ('decoder', {'adapter': {'placement': 'decoder'}}),
    ),
    'bottleneck': (
        ('low-rank', LOWRANK_ONLY),
        ('self-attention', {'adapter': {'bottleneck': 'self-attention'},
                            'distill': {'weight': 0.0},
                            'gating': {'mode': 'off'}}),
        ('slot', PLAIN_ADAPTER),
    ),
    'entity-source': (
        ('query-agnostic', {'gating': {'mode': 'query-agnostic'}}),
        ('query-dependent', {'gating': {'mode': 'query-dependent'}}),
    ),
    'adapter-layers': tuple(
        (layers, {'adapter': {'layers': layers}})
        for layers in ('0', '1', '0-1')
    ),
    'reconstruction': tuple(
        (name, {'adapter': {'reconstruction': name}})
        for name in RECONSTRUCTIONS
    ),
    'ebd-scale': tuple(
        ('λ={0}'.format(weight), {'distill': {'weight': weight}})
        for weight in (0.01, 0.1, 1.0)
    ),
    'gating-source': tuple(
        (source, {'gating': {'source': source}})
        for source in GATING_SOURCES
    ),
    'gating-layers': tuple(
        (layers, {'gating': {'layers': layers}})
        for layers in LAYER_SELECTIONS
    ),
}


def overrides_from_args(args):
    ''' Nested settings overrides for every flag given explicitly. '''

    overrides = {'run': {}}

    for name in ('seed', 'out', 'threads', 'log_level'):
        value = getattr(args, name, None)

        if value is not None:
            overrides['run'][name] = value

    if getattr(args, 'no_colors', False):
        overrides['run']['colors'] = False

    for flag, section, key, _ in SWITCHES:
        value = getattr(args, flag[2:].replace('-', '_'), None)

        if value is None:
            continue

        if value in ('on', 'off'):
            value = value == 'on'

        overrides.setdefault(section, {})[key] = value

    if getattr(args, 'grid', None) is not None:
        overrides.setdefault('ablation', {})['grid'] = args.grid

    if getattr(args, 'seeds', None) is not None:
        overrides.setdefault('ablation', {})['seeds'] = list(args.seeds)

    return overrides


def check_settings(settings):
    ''' Reject switch combinations that describe no valid model. '''

    adapter = settings.adapter

    if settings.synth.hidden_dim != settings.decoder.hidden_dim:
        raise UsageError('synth.hidden_dim', 'differs from '
                         'decoder.hidden_dim ({0}).'.format(
                             settings.decoder.hidden_dim))

    if not adapter.enabled:
        if settings.distill.weight > 0:
            raise UsageError('distill.weight', 'needs the adapter; pass '
                             '--ebd-weight 0 with --adapter off.')

        if settings.gating.mode != 'off':
            raise UsageError('gating.mode', 'needs the adapter; pass '
                             '--gating off with --adapter off.')

    elif adapter.bottleneck == 'self-attention' and settings.distill.weight > 0:
        raise UsageError('distill.weight', 'needs the slot bottleneck; pass '
                         '--ebd-weight 0 with --bottleneck self-attention.')


def with_overrides(settings, overrides):

    return AttributeDict(merge_settings(settings.as_dict(), overrides))


# ———————————————————————————————————————————————————————————————— Helpers


def dataset_directory(args, run_cfg):

    return args.data or os.path.join(run_cfg.out, DATA_DIRNAME)


def load_datasets(directory, splits=SPLITS):

    return {split: read_dataset(os.path.join(directory, split))
            for split in splits}


def make_datasets(settings, seed, threads, directory=None):
    ''' Generate the benchmark, written under :param:`directory` when
        given. '''

    datasets = generate_benchmark(build_config(SynthConfig, settings, 'synth'),
                                  seed, threads)

    if directory is not None:
        for split, dataset in datasets.items():
            write_dataset(dataset, os.path.join(directory, split))

    return datasets


def build_model(settings, dataset, seed):
    ''' Fresh model whose entity-word rows carry :param:`dataset`'s
        concepts, sized from the dataset's own generation settings. '''

    synth_cfg = synth_config_from_dict(dataset.config)
    decoder_cfg = build_config(DecoderConfig, settings, 'decoder')

    if synth_cfg.hidden_dim != decoder_cfg.hidden_dim:
        raise UsageError('decoder.hidden_dim', 'dataset tokens have width '
                         '{0}.'.format(synth_cfg.hidden_dim))

    adapter_cfg = build_config(AdapterConfig, settings, 'adapter',
                               hidden_dim=decoder_cfg.hidden_dim,
                               tokens_per_frame=synth_cfg.tokens_per_frame)
    gating_cfg = build_config(GatingConfig, settings, 'gating')

    rng = np.random.default_rng(np.random.SeedSequence([seed, MODEL_STREAM]))

    return init_model(Vocabulary(), decoder_cfg, adapter_cfg, gating_cfg, rng,
                      concept_table=dataset.concepts)


def fit(settings, datasets, seed, out_dir=None, threads=None,
        progress_every=10.0):
    ''' Build, optionally pretrain, and adapt a model on the train split. '''

    train_cfg = build_config(TrainConfig, settings, 'train')
    distill_cfg = build_config(DistillConfig, settings, 'distill')

    model = build_model(settings, datasets['train'], seed)

    pretrain(model, datasets['train'], train_cfg, seed)
    train(model, datasets['train'], distill_cfg, train_cfg, seed,
          out_dir=out_dir, threads=threads, progress_every=progress_every)

    return model


def score_splits(model, datasets, settings, threads=None):
    ''' :returns: `(metrics by split, prediction records)`. '''

    metrics, records = {}, []

    for split in EVAL_SPLITS:
        if split not in datasets:
            continue

        metrics[split], predictions = evaluate(
            model, datasets[split], settings.eval.max_answer_tokens, threads)

        for prediction in predictions:
            record = prediction.as_dict()
            record['split'] = split
            records.append(record)

    return metrics, records


def write_scores(out_dir, metrics, records):

    write_json(os.path.join(out_dir, METRICS_FILENAME), metrics)
    write_jsonl(os.path.join(out_dir, PREDICTIONS_FILENAME), records)


def save_model(model, directory, seed):

    return save_checkpoint(
        directory,
        {name: tensor.data for name, tensor in model.named_tensors().items()},
        {'model': model.metadata(), 'seed': seed, 'version': APP_VERSION})


def load_model(directory):

    arrays, metadata = load_checkpoint(directory)

    return Model.from_arrays(arrays, metadata['model'])


# ——————————————————————————————————————————————————————————————— Commands


def cmd_generate(args, settings, run_cfg):

    directory = dataset_directory(args, run_cfg)

    make_datasets(settings, run_cfg.seed, run_cfg.threads, directory)

    LOGGER.info('Benchmark written to “{0}”.'.format(directory))

    return ExitCodes.OK


def cmd_train(args, settings, run_cfg):

    check_settings(settings)

    if args.data:
        datasets = load_datasets(args.data)

    else:
        datasets = make_datasets(settings, run_cfg.seed, run_cfg.threads,
                                 os.path.join(run_cfg.out, DATA_DIRNAME))

    model = fit(settings, datasets, run_cfg.seed, out_dir=run_cfg.out,
                threads=run_cfg.threads,
                progress_every=run_cfg.progress_every_seconds)

    save_model(model, os.path.join(run_cfg.out, CHECKPOINT_DIRNAME),
               run_cfg.seed)

    metrics, records = score_splits(model, datasets, settings,
                                    run_cfg.threads)
    write_scores(run_cfg.out, metrics, records)

    for split, values in metrics.items():
        print('{0}: {1}'.format(split, ', '.join(
            '{0} {1:.2f}'.format(key, values[key]) for key in METRIC_KEYS)))

    return ExitCodes.OK


def cmd_eval(args, settings, run_cfg):

    checkpoint = args.checkpoint or os.path.join(run_cfg.out,
                                                 CHECKPOINT_DIRNAME)
    model = load_model(checkpoint)

    datasets = load_datasets(dataset_directory(args, run_cfg),
                             args.split or EVAL_SPLITS)

    metrics, records = score_splits(model, datasets, settings,
                                    run_cfg.threads)
    write_scores(run_cfg.out, metrics, records)

    for split, values in metrics.items():
        print('{0}: {1}'.format(split, ', '.join(
            '{0} {1:.2f}'.format(key, values[key]) for key in METRIC_KEYS)))

    return ExitCodes.OK


def cmd_diagnose(args, settings, run_cfg):

    checkpoint = args.checkpoint or os.path.join(run_cfg.out,
                                                 CHECKPOINT_DIRNAME)
    model = load_model(checkpoint)
    datasets = load_datasets(dataset_directory(args, run_cfg))

    analysis = settings.analysis
    directory = os.path.join(run_cfg.out, DIAGNOSTICS_DIRNAME)
    threads = run_cfg.threads
    summary = {}

    if model.adapter_cfg.enabled and model.adapter_cfg.bottleneck == 'slot':
        for split in EVAL_SPLITS:
            report = diagnose_slots(model, datasets[split], args.limit,
                                    threads)
            write_report(directory, 'slots-{0}'.format(split),
                         report.rows(), report.as_dict())
            summary['slots-' + split] = report.as_dict()

    else:
        LOGGER.warning('No slot adapter in this model, skipping slot '
                       'diagnostics.')

    probe = [sample for split in EVAL_SPLITS for sample in datasets[split]]

    similarity = similarity_report(
        [sample.visual for sample in datasets['train']],
        [sample.visual for sample in probe],
        bins=analysis.similarity_bins,
        probe_ids=[sample.video_id for sample in probe])

    write_report(directory, 'similarity', similarity.rows(),
                 similarity.as_dict())
    summary['similarity'] = similarity.as_dict()

    sigma = analysis.noise_sigma if args.sigma is None else args.sigma
    clean, _ = evaluate(model, datasets['id_eval'],
                        settings.eval.max_answer_tokens, threads)

    probes = [noise_probe(model, datasets['id_eval'], target, sigma,
                          run_cfg.seed, clean=clean,
                          max_tokens=settings.eval.max_answer_tokens,
                          threads=threads)
              for target in analysis.noise_targets]

    rows = [probe.row() for probe in probes]
    write_report(directory, 'noise', rows, {'split': 'id_eval', 'probes': rows})
    summary['noise'] = rows

    attention = [
        {'split': split,
         'gt_attention_ratio': mean_gt_attention_ratio(
             model, datasets[split], args.limit, threads)}
        for split in EVAL_SPLITS
    ]
    write_report(directory, 'attention', attention, {'splits': attention})
    summary['attention'] = attention

    write_json(os.path.join(directory, 'summary.json'), summary)

    return ExitCodes.OK


def summarize_cells(results):
    ''' Per row, `mean ± std` over seeds of every split metric. '''

    rows = []

    for label, runs in results.items():
        row = {'row': label, 'seeds': len(runs)}

        for split in EVAL_SPLITS:
            for key in METRIC_KEYS:
                values = np.array([run[split][key] for run in runs])
                row['{0} {1}'.format(split, key)] = format_mean_std(
                    values.mean(), values.std())

        rows.append(row)

    return rows


def cmd_ablate(args, settings, run_cfg):

    grid_name = settings.ablation.grid

    if grid_name not in GRIDS:
        raise UsageError('ablation.grid', 'must be one of {0}.'.format(
            ', '.join(GRIDS)))

    seeds = [int(seed) for seed in settings.ablation.seeds]

    if len(seeds) < 1:
        raise UsageError('ablation.seeds', 'needs at least one seed.')

    grid = GRIDS[grid_name]
    rows = [(label, with_overrides(settings, overrides))
            for label, overrides in grid]

    for _, row_settings in rows:
        check_settings(row_settings)

    directory = os.path.join(run_cfg.out, ABLATION_DIRNAME, grid_name)
    results = {label: [] for label, _ in rows}

    fixed = load_datasets(args.data) if args.data else None

    for seed in seeds:
        datasets = fixed or make_datasets(settings, seed, run_cfg.threads)

        for index, (label, row_settings) in enumerate(rows):
            LOGGER.info('Ablation {0}, row “{1}”, seed {2}.'.format(
                grid_name, label, seed))

            out_dir = os.path.join(directory, 'row{0}'.format(index),
                                   'seed{0}'.format(seed))

            model = fit(row_settings, datasets, seed, out_dir=out_dir,
                        threads=run_cfg.threads,
                        progress_every=run_cfg.progress_every_seconds)

            metrics, _ = score_splits(model, datasets, row_settings,
                                      run_cfg.threads)
            write_json(os.path.join(out_dir, METRICS_FILENAME), metrics)

            results[label].append(metrics)

    table = summarize_cells(results)

    os.makedirs(directory, exist_ok=True)
    write_csv(os.path.join(directory, 'results.csv'), table)
    write_json(os.path.join(directory, 'results.json'), {
        'grid': grid_name,
        'seeds': seeds,
        'rows': [{'row': label, 'runs': runs}
                 for label, runs in results.items()],
    })

    for row in table:
        print('{0:<22} ID mIoU {1:<16} OOD mIoU {2}'.format(
            row['row'], row['id_eval mIoU'], row['ood_eval mIoU']))

    return ExitCodes.OK


# ———————————————————————————————————————————————————————————————— Parser


def build_parser():

    parser = argparse.ArgumentParser(
        prog=APP_NAME,
        description='Entity-slot adapters with co-occurrence gating on a '
                    'synthetic temporal grounding benchmark.')

    parser.add_argument('--version', action='version',
                        version='%(prog)s {0}'.format(APP_VERSION))
    parser.add_argument('--config', metavar='FILE',
                        help='settings file (YAML or JSON) over the defaults')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--out', metavar='DIR', help='output directory')
    parser.add_argument('--threads', type=int, help='worker threads cap')
    parser.add_argument('--log-level', choices=LOG_LEVELS)
    parser.add_argument('--no-colors', action='store_true',
                        help='plain console logs')

    switches = parser.add_argument_group('ablation switches')

    for flag, section, key, kwargs in SWITCHES:
        switches.add_argument(
            flag, help='{0}.{1}, default {2}'.format(section, key,
                                                     gpod(section, key)),
            **kwargs)

    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    generate = commands.add_parser('generate', help='write the benchmark')
    generate.add_argument('--data', metavar='DIR',
                          help='dataset root, default <out>/data')
    generate.set_defaults(func=cmd_generate)

    train_parser = commands.add_parser(
        'train', help='adapt a model, then evaluate it')
    train_parser.add_argument('--data', metavar='DIR',
                              help='existing dataset root; generated when '
                                   'omitted')
    train_parser.set_defaults(func=cmd_train)

    for name, func, text in (
            ('eval', cmd_eval, 'score a checkpoint'),
            ('diagnose', cmd_diagnose, 'slot, similarity and noise reports')):
        command = commands.add_parser(name, help=text)
        command.add_argument('--checkpoint', metavar='DIR',
                             help='default <out>/checkpoint')
        command.add_argument('--data', metavar='DIR',
                             help='dataset root, default <out>/data')
        command.set_defaults(func=func)

    commands.choices['eval'].add_argument(
        '--split', action='append', choices=EVAL_SPLITS)

    diagnose = commands.choices['diagnose']
    diagnose.add_argument('--limit', type=int,
                          help='samples per split for slot and attention '
                               'diagnostics')
    diagnose.add_argument('--sigma', type=float,
                          help='noise standard deviation, default {0}'.format(
                              gpod('analysis', 'noise_sigma')))

    ablate = commands.add_parser('ablate', help='run an ablation grid')
    ablate.add_argument('--grid', choices=sorted(GRIDS))
    ablate.add_argument('--seeds', type=int, nargs='+')
    ablate.add_argument('--data', metavar='DIR',
                        help='fixed dataset root for every seed')
    ablate.set_defaults(func=cmd_ablate)

    return parser


def check_noise_targets(settings):

    for target in settings.analysis.noise_targets:
        if target not in NOISE_TARGETS:
            raise UsageError('analysis.noise_targets',
                             'unknown target “{0}”.'.format(target))


def report_failure(error):

    LOGGER.error(str(error))
    LOGGER.debug('Failure details.', exc_info=True)

    sentry.capture(error)

    dump_path = getattr(error, 'dump_path', None)

    if dump_path:
        LOGGER.error('Diagnostics dumped to “{0}”.'.format(dump_path))

    return error.exit_code


def main(argv=None):

    args = build_parser().parse_args(argv)

    setup_logging()

    try:
        settings = resolve_settings(args.config, overrides_from_args(args))
        run_cfg = build_config(RunConfig, settings, 'run')

        check_noise_targets(settings)

        setup_logging(run_cfg.out, run_cfg.log_level, run_cfg.colors)
        set_max_threads(run_cfg.threads)
        sentry.enable(run_cfg.sentry_dsn)

        write_resolved_settings(settings, run_cfg.out)

        return args.func(args, settings, run_cfg)

    except SlotgateError as e:
        return report_failure(e)

    except OSError as e:
        return report_failure(StoreError(
            'Cannot access “{0}”: {1}.'.format(e.filename, e.strerror)))

    except KeyboardInterrupt:
        LOGGER.warning('Interrupted.')
        return ExitCodes.FAILURE

    finally:
        sentry.disable()


if __name__ == '__main__':
    sys.exit(main())
