import os
import dataclasses

import numpy as np
import pytest

from slotgate.analysis import (
    METRIC_KEYS,
    NoiseProbe,
    slot_entropy,
    slot_cosine,
    slot_diagnostics,
    collect_slot_maps,
    diagnose_slots,
    similarity_report,
    random_interval,
    noise_frames,
    add_interval_noise,
    noise_probe,
    gt_attention_ratio,
    mean_gt_attention_ratio,
    write_report,
)
from slotgate.exceptions import DiagnosticsError, ShapeError
from slotgate.synthdata import generate
from slotgate.store import read_json


# ————————————————————————————————————————————————————————————— Slot maps


def test_uniform_maps_reach_the_entropy_bound():

    maps = np.full((2, 3, 64, 4), 1.0 / 64)

    report = slot_diagnostics({0: maps})

    assert report.entropy[0] == pytest.approx(np.log(64), abs=1e-9)
    assert report.entropy[0] == pytest.approx(4.159, abs=1e-3)
    assert report.uniform_bound == pytest.approx(np.log(64))
    assert report.cosine[0] == pytest.approx(1.0)


def test_one_hot_maps_are_sharp_and_disjoint():

    maps = np.zeros((1, 8, 4))
    maps[0, [0, 2, 4, 6], [0, 1, 2, 3]] = 1.0

    assert slot_entropy(maps) == 0.0
    assert slot_cosine(maps) == 0.0


def test_slot_maps_must_be_token_normalized():

    maps = np.full((2, 16, 4), 1.0 / 16)
    maps[0, 0, 0] += 1e-3

    with pytest.raises(DiagnosticsError):
        slot_diagnostics({0: maps})

    with pytest.raises(DiagnosticsError):
        slot_diagnostics({})


def test_layers_must_agree_on_tokens():

    with pytest.raises(ShapeError):
        slot_diagnostics({0: np.full((1, 4, 2), 0.25),
                          1: np.full((1, 8, 2), 0.125)})


def test_rows_list_each_layer():

    report = slot_diagnostics({1: np.full((1, 4, 2), 0.25),
                               0: np.full((1, 4, 2), 0.25)})

    assert [row['layer'] for row in report.rows()] == [0, 1]
    assert report.as_dict()['num_tokens'] == 4


def test_model_slot_maps(tiny_dataset, make_model):

    model = make_model(tiny_dataset)

    token_maps, slot_maps = collect_slot_maps(model, tiny_dataset, limit=3)

    assert set(token_maps) == {0}
    assert token_maps[0].shape == (3, 4, 4, 4)
    np.testing.assert_allclose(slot_maps[0].sum(axis=-1), 1.0, atol=1e-9)

    report = diagnose_slots(model, tiny_dataset, limit=3)

    assert 0.0 <= report.entropy[0] <= report.uniform_bound + 1e-9
    assert 0.0 <= report.binding[0] <= 1.0


def test_models_without_slots_have_no_slot_maps(tiny_dataset, make_model):

    model = make_model(tiny_dataset, enabled=False)

    with pytest.raises(DiagnosticsError):
        collect_slot_maps(model, tiny_dataset)


# —————————————————————————————————————————————————————— Visual similarity


def test_similarity_bins_are_balanced(rng_videos):

    reference, probe = rng_videos

    report = similarity_report(reference, probe, bins=3)

    assert sum(report.bin_sizes) == len(probe)
    assert max(report.bin_sizes) - min(report.bin_sizes) <= 1
    assert report.edges == sorted(report.edges)

    # Bin 0 is the least similar.
    for low, high in zip(report.rows(), report.rows()[1:]):
        if low['bin'] < high['bin']:
            assert low['cosine'] <= high['cosine']


def test_similarity_does_not_depend_on_probe_order(rng_videos):

    reference, probe = rng_videos
    ids = ['v{0}'.format(index) for index in range(len(probe))]
    order = np.random.default_rng(4).permutation(len(probe))

    report = similarity_report(reference, probe, bins=3, probe_ids=ids)
    shuffled = similarity_report(reference, [probe[i] for i in order], bins=3,
                                 probe_ids=[ids[i] for i in order])

    assert report.rows() == shuffled.rows()
    assert report.bin_sizes == shuffled.bin_sizes
    assert report.edges == shuffled.edges
    np.testing.assert_allclose(report.as_dict()['bin_means'],
                               shuffled.as_dict()['bin_means'], rtol=1e-12)


def test_similarity_checks_its_inputs(rng_videos):

    reference, probe = rng_videos

    with pytest.raises(DiagnosticsError):
        similarity_report(reference, [], bins=1)

    with pytest.raises(DiagnosticsError):
        similarity_report(reference, probe, bins=len(probe) + 1)

    with pytest.raises(ShapeError):
        similarity_report(reference, [np.ones((2, 3, 6))], bins=1)


def test_other_domain_is_less_similar(synth_cfg):

    cfg = dataclasses.replace(synth_cfg, num_eval=20)
    reference = generate(cfg, 'A', 20, seed=0)
    same = generate(cfg, 'A', 20, seed=0, split='id_eval')
    other = generate(cfg, 'B', 20, seed=0, split='ood_eval')

    report = similarity_report(
        [sample.visual for sample in reference],
        [sample.visual for sample in same.samples + other.samples],
        bins=2)

    assert report.cosines[:20].mean() > report.cosines[20:].mean()


@pytest.fixture
def rng_videos():

    rng = np.random.default_rng(8)

    reference = [rng.normal(1.0, 1.0, (3, 4, 5)) for _ in range(4)]
    probe = [rng.normal(0.0, 1.0, (3, 4, 5)) for _ in range(10)]

    return reference, probe


# ———————————————————————————————————————————————————————————— Noise probes


def test_random_interval_avoids_the_target_when_it_can():

    rng = np.random.default_rng(0)

    for _ in range(20):
        frames = random_interval(rng, 10, (2, 4))

        assert len(frames) == 3
        assert not set(frames) & {2, 3, 4}
        assert frames.max() < 10


def test_random_interval_overlaps_as_little_as_possible():

    rng = np.random.default_rng(0)

    for _ in range(20):
        frames = random_interval(rng, 10, (2, 7))

        assert len(frames) == 6
        assert len(set(frames) & set(range(2, 8))) == 4


def test_noise_frames_by_target():

    rng = np.random.default_rng(0)

    np.testing.assert_array_equal(
        noise_frames(rng, 6, (1, 3), 'gt_interval'), [1, 2, 3])
    np.testing.assert_array_equal(
        noise_frames(rng, 6, (1, 3), 'non_gt_all'), [0, 4, 5])

    with pytest.raises(DiagnosticsError):
        noise_frames(rng, 6, (1, 3), 'everywhere')

    with pytest.raises(DiagnosticsError):
        noise_frames(rng, 2, (0, 3), 'gt_interval')


def test_interval_noise_touches_only_its_frames(tiny_dataset):

    sample = tiny_dataset.samples[0]
    first, last = sample.frame_span

    noisy = add_interval_noise(sample, 'gt_interval', 1.0, seed=0)
    changed = np.flatnonzero(
        np.any(noisy.visual != sample.visual, axis=(1, 2)))

    np.testing.assert_array_equal(changed, np.arange(first, last + 1))
    np.testing.assert_array_equal(
        add_interval_noise(sample, 'gt_interval', 1.0, seed=0).visual,
        noisy.visual)

    silent = add_interval_noise(sample, 'random_interval', 0.0, seed=0)

    np.testing.assert_array_equal(silent.visual, sample.visual)


def test_zero_noise_changes_no_metric(tiny_dataset, make_model):

    probe = noise_probe(make_model(tiny_dataset), tiny_dataset,
                        'gt_interval', 0.0, seed=0)

    assert all(delta == 0.0 for delta in probe.deltas.values())
    assert set(probe.row()) >= {'target', 'sigma', 'delta_mIoU'}


def test_noise_probe_checks_arguments(tiny_dataset, make_model):

    model = make_model(tiny_dataset)

    with pytest.raises(DiagnosticsError):
        noise_probe(model, tiny_dataset, 'gt_interval', -1.0, seed=0,
                    clean={})

    with pytest.raises(DiagnosticsError):
        noise_probe(model, tiny_dataset, 'sideways', 1.0, seed=0, clean={})


def test_noise_probe_deltas():

    clean = {key: 50.0 for key in METRIC_KEYS}
    noisy = dict(clean, mIoU=40.0)

    probe = NoiseProbe('gt_interval', 1.0, clean, noisy)

    assert probe.deltas['mIoU'] == -10.0
    assert probe.row()['delta_R1@0.5'] == 0.0


# ——————————————————————————————————————————————————— Ground-truth attention


def test_attention_ratio_is_a_share(tiny_dataset, make_model):

    model = make_model(tiny_dataset)
    sample = tiny_dataset.samples[0]

    ratio = gt_attention_ratio(model, sample)

    assert 0.0 <= ratio <= 1.0
    assert gt_attention_ratio(
        model, dataclasses.replace(sample, frame_span=(0, 3))) == \
        pytest.approx(1.0)
    assert 0.0 <= mean_gt_attention_ratio(model, tiny_dataset, limit=2) <= 1.0


# ———————————————————————————————————————————————————————————————— Writers


def test_reports_write_csv_and_json(tmpdir):

    directory = str(tmpdir.join('diagnostics'))

    write_report(directory, 'slots', [{'layer': 0, 'entropy': 1.0}],
                 {'layers': 1})

    assert os.path.exists(os.path.join(directory, 'slots.csv'))
    assert read_json(os.path.join(directory, 'slots.json')) == {'layers': 1}
