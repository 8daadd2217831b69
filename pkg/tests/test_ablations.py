''' Directional checks on full-size training runs. Slow: each model trains
    for the default number of steps on the default benchmark. '''

import numpy as np
import pytest

from slotgate.analysis import diagnose_slots, noise_probe
from slotgate.cli import GRIDS, fit, make_datasets, score_splits, \
    with_overrides
from slotgate.preferences import resolve_settings


pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
THREADS = 4


@pytest.fixture(scope='module')
def settings():
    return resolve_settings()


@pytest.fixture(scope='module')
def benchmarks(settings):
    return {seed: make_datasets(settings, seed, THREADS) for seed in SEEDS}


@pytest.fixture(scope='module')
def components(settings, benchmarks):
    ''' Row label → list of (model, metrics) over seeds. '''

    results = {}

    for label, overrides in GRIDS['components']:
        row_settings = with_overrides(settings, overrides)
        results[label] = []

        for seed in SEEDS:
            datasets = benchmarks[seed]
            model = fit(row_settings, datasets, seed, threads=THREADS)
            metrics, _ = score_splits(model, datasets, row_settings, THREADS)
            results[label].append((model, metrics))

    return results


def mean_metric(runs, split, key):

    return np.mean([metrics[split][key] for _, metrics in runs])


def test_each_component_helps_out_of_domain(components):

    ood = {label: mean_metric(runs, 'ood_eval', 'mIoU')
           for label, runs in components.items()}

    assert ood['low-rank'] < ood['+adapter'] < ood['+adapter+ebd']
    assert ood['+adapter+ebd'] <= ood['+adapter+ebd+gating']
    assert ood['+adapter+ebd+gating'] - ood['low-rank'] >= 5.0

    assert abs(mean_metric(components['+adapter+ebd+gating'], 'id_eval',
                           'mIoU')
               - mean_metric(components['low-rank'], 'id_eval', 'mIoU')) \
        <= 2.0


def test_distillation_binds_slots_to_entities(components, benchmarks):

    bound, _ = components['+adapter+ebd+gating'][0]
    plain, _ = components['+adapter'][0]
    datasets = benchmarks[SEEDS[0]]

    for split, floor in (('id_eval', 0.7), ('ood_eval', 0.6)):
        report = diagnose_slots(bound, datasets[split], threads=THREADS)
        baseline = diagnose_slots(plain, datasets[split], threads=THREADS)

        assert min(report.binding.values()) >= floor
        assert max(baseline.binding.values()) < 0.4


def test_distillation_sharpens_and_separates_slots(components, benchmarks):

    bound, _ = components['+adapter+ebd+gating'][0]
    plain, _ = components['+adapter'][0]
    dataset = benchmarks[SEEDS[0]]['id_eval']

    report = diagnose_slots(bound, dataset, threads=THREADS)
    baseline = diagnose_slots(plain, dataset, threads=THREADS)

    for layer in baseline.entropy:
        assert report.entropy[layer] < 0.9 * baseline.entropy[layer]
        assert report.cosine[layer] < 0.5
        assert baseline.cosine[layer] > 0.9
        assert baseline.entropy[layer] >= 0.95 * baseline.uniform_bound


def test_ground_truth_noise_hurts_more_than_random_noise(components,
                                                         benchmarks):

    drops = {'gt_interval': [], 'random_interval': []}

    for seed, (model, metrics) in zip(SEEDS,
                                      components['+adapter+ebd+gating']):
        for target in drops:
            probe = noise_probe(model, benchmarks[seed]['id_eval'], target,
                                1.0, seed, clean=metrics['id_eval'],
                                threads=THREADS)
            drops[target].append(-probe.deltas['R1@0.7'])

    assert np.mean(drops['gt_interval']) >= \
        1.5 * np.mean(drops['random_interval'])
