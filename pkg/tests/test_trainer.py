import os
import dataclasses

import numpy as np
import pytest

import slotgate.numerics as nx

from slotgate.distill import DistillConfig
from slotgate.exceptions import ConfigError, DiagnosticsError
from slotgate.store import read_json
from slotgate.trainer import (
    TrainConfig,
    AdamW,
    Prediction,
    cosine_schedule,
    clip_gradients,
    cluster_targets,
    sample_loss,
    batch_indices,
    dump_nonfinite,
    train,
    pretrain,
    predict_window,
    metrics_from_predictions,
    evaluate,
)


# —————————————————————————————————————————————————————————————— Optimizer


def test_config_validation():

    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)

    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)

    with pytest.raises(ConfigError):
        TrainConfig(warmup_fraction=1.0)


def test_cosine_schedule_warms_up_then_decays():

    rates = [cosine_schedule(step, 100, 1.0, 0.05) for step in range(100)]

    assert rates[0] == pytest.approx(0.2)
    assert rates[4] == pytest.approx(1.0)
    assert rates[5] == pytest.approx(1.0)
    assert all(a >= b for a, b in zip(rates[5:], rates[6:]))
    assert rates[-1] < 1e-2


def test_clip_gradients_scales_globally():

    grads = {'a': np.array([3.0, 0.0]), 'b': np.array([[0.0], [4.0]])}

    clipped, norm = clip_gradients(grads, 1.0)

    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(clipped['a'], [0.6, 0.0])
    np.testing.assert_allclose(clipped['b'], [[0.0], [0.8]])

    unclipped, _ = clip_gradients(grads, 0.0)

    assert unclipped['a'] is grads['a']


def test_adamw_decays_matrices_only():

    params = {'matrix': nx.Tensor(np.ones((2, 2))),
              'vector': nx.Tensor(np.ones(3))}
    optimizer = AdamW(params, weight_decay=0.1)

    optimizer.step({'matrix': np.zeros((2, 2)), 'vector': np.zeros(3)}, 0.5)

    np.testing.assert_allclose(params['matrix'].data, 0.95)
    np.testing.assert_array_equal(params['vector'].data, 1.0)


def test_adamw_first_step_moves_by_the_rate():

    params = {'vector': nx.Tensor(np.zeros(2))}
    optimizer = AdamW(params, weight_decay=0.0)

    optimizer.step({'vector': np.array([2.0, -0.5])}, 0.01)

    np.testing.assert_allclose(params['vector'].data, [-0.01, 0.01],
                               rtol=1e-6)


def test_batches_cover_every_sample_each_epoch():

    batches = batch_indices(np.random.default_rng(0), 5, 2)
    epoch = np.concatenate([next(batches) for _ in range(3)])

    assert sorted(epoch) == [0, 1, 2, 3, 4]


# ———————————————————————————————————————————————————————————————— Losses


def test_zero_weight_loss_is_the_caption_loss(tiny_dataset, make_model):

    model = make_model(tiny_dataset)
    sample = tiny_dataset.samples[0]
    maps = cluster_targets(tiny_dataset, 4, seed=0)

    total, parts = sample_loss(model, sample, DistillConfig(weight=0.0),
                               maps[sample.video_id])

    assert total.item() == parts['ce']
    assert parts['ebd'] == 0.0


def test_binding_term_is_weighted(tiny_dataset, make_model, distill_cfg):

    model = make_model(tiny_dataset)
    sample = tiny_dataset.samples[0]
    maps = cluster_targets(tiny_dataset, 4, seed=0)

    total, parts = sample_loss(model, sample, distill_cfg,
                               maps[sample.video_id])

    assert parts['ebd'] > 0.0
    assert total.item() == pytest.approx(
        parts['ce'] + distill_cfg.weight * parts['ebd'], rel=1e-12)


@pytest.mark.parametrize('weight', [0.0, 0.1])
def test_sample_loss_gradients_match_central_differences(tiny_dataset,
                                                         make_model,
                                                         randomize, weight):

    rng = np.random.default_rng(5)
    model = make_model(tiny_dataset, gating={'mode': 'query-dependent'})
    block = model.adapters[0]

    randomize(block.w_up, rng)

    for tensor in model.lowrank.values():
        randomize(tensor, rng)

    sample = tiny_dataset.samples[0]
    cluster_map = cluster_targets(tiny_dataset, 4, seed=0)[sample.video_id]
    cfg = DistillConfig(weight=weight)

    def replace_block(field):
        def install(tensor):
            setattr(block, field, tensor)
        return install

    def replace_lowrank(name):
        def install(tensor):
            model.lowrank[name] = tensor
        return install

    targets = [('w_up', block.w_up, replace_block('w_up')),
               ('slot_init', block.slot_init, replace_block('slot_init'))]
    targets += [(name, tensor, replace_lowrank(name))
                for name, tensor in sorted(model.lowrank.items())]

    assert len(targets) == 2 + 2 * 4

    for name, original, install in targets:

        def loss(tensor):
            install(tensor)
            return sample_loss(model, sample, cfg, cluster_map)[0]

        start = original.data.copy()
        analytic = nx.analytic_gradient(
            loss, nx.Tensor(start.copy(), requires_grad=True))
        numeric = nx.finite_difference(
            loss, nx.Tensor(start.copy(), requires_grad=True))
        install(original)

        error = np.linalg.norm(analytic - numeric) / max(
            np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)

        assert np.linalg.norm(analytic) > 0.0, name
        assert error < 1e-4, name


def test_total_loss_is_linear_in_the_binding_weight(tiny_dataset,
                                                    make_model, randomize):

    model = make_model(tiny_dataset)
    randomize(model.adapters[0].w_up, np.random.default_rng(2))
    sample = tiny_dataset.samples[0]
    cluster_map = cluster_targets(tiny_dataset, 4, seed=0)[sample.video_id]

    weights = (1e-3, 0.1, 0.5, 2.0)
    totals, bindings = [], []

    for weight in weights:
        total, parts = sample_loss(model, sample, DistillConfig(weight=weight),
                                   cluster_map)
        totals.append(total.item())
        bindings.append(parts['ebd'])

    # The binding term itself does not depend on its weight.
    np.testing.assert_allclose(bindings, bindings[0], rtol=0.0, atol=1e-12)

    for (low, high), (low_total, high_total) in zip(
            zip(weights, weights[1:]), zip(totals, totals[1:])):
        slope = (high_total - low_total) / (high - low)

        assert slope == pytest.approx(bindings[0], abs=1e-8)


def test_cluster_targets_cover_the_dataset(tiny_dataset):

    maps = cluster_targets(tiny_dataset, 4, seed=0)

    assert set(maps) == {sample.video_id for sample in tiny_dataset}

    for sample in tiny_dataset:
        assert maps[sample.video_id].labels.shape == sample.masks.shape


# —————————————————————————————————————————————————————————————— Training


def test_training_is_deterministic(tmpdir, tiny_dataset, make_model,
                                   distill_cfg, train_cfg):

    cfg = dataclasses.replace(train_cfg, steps=50)
    logs, weights = [], []

    for run, threads in enumerate((1, 2)):
        out = str(tmpdir.join('run{0}'.format(run)))
        model = make_model(tiny_dataset)

        train(model, tiny_dataset, distill_cfg, cfg, seed=0,
              out_dir=out, threads=threads)

        with open(os.path.join(out, 'metrics.jsonl')) as f:
            logs.append(f.read())

        weights.append({name: tensor.data.copy() for name, tensor
                        in model.trainable_tensors().items()})

    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) == cfg.steps

    for name, values in weights[0].items():
        np.testing.assert_array_equal(values, weights[1][name])


def test_training_moves_only_the_adaptation_set(tiny_dataset, make_model,
                                                distill_cfg, train_cfg):

    model = make_model(tiny_dataset)
    base = {name: tensor.data.copy()
            for name, tensor in model.base_tensors().items()}
    w_up = model.adapters[0].w_up.data.copy()

    result = train(model, tiny_dataset, distill_cfg, train_cfg, seed=0)

    assert len(result.history) == train_cfg.steps
    assert all(np.isfinite(record['loss']) for record in result.history)
    assert not np.array_equal(model.adapters[0].w_up.data, w_up)

    for name, tensor in model.base_tensors().items():
        np.testing.assert_array_equal(tensor.data, base[name])


def test_training_needs_samples(tiny_dataset, make_model, distill_cfg,
                                train_cfg):

    empty = dataclasses.replace(tiny_dataset, samples=[])

    with pytest.raises(DiagnosticsError):
        train(make_model(tiny_dataset), empty, distill_cfg, train_cfg, seed=0)


def test_pretraining_moves_only_the_base(tiny_dataset, make_model):

    model = make_model(tiny_dataset)
    cfg = TrainConfig(steps=1, batch_size=2, pretrain_steps=1)
    embedding = model.base['embedding'].data.copy()
    slot_init = model.adapters[0].slot_init.data.copy()

    history = pretrain(model, tiny_dataset, cfg, seed=0)

    assert len(history) == 1
    assert not np.array_equal(model.base['embedding'].data, embedding)
    np.testing.assert_array_equal(model.adapters[0].slot_init.data, slot_init)
    assert not model.base['embedding'].requires_grad


def test_nonfinite_dump_lists_parameter_norms(tmpdir, make_model):

    model = make_model()
    params = model.trainable_tensors()

    filename = dump_nonfinite(str(tmpdir), 4, {'loss': 1.0}, params)
    dump = read_json(filename)

    assert dump['step'] == 4
    assert set(dump['parameter_norms']) == set(params)


# ———————————————————————————————————————————————————————————— Evaluation


def record(iou, window=(0, 10)):

    return {'video_id': 'v', 'text': '', 'window': window,
            'target': [0, 10], 'iou': iou}


def test_metrics_are_percentages():

    metrics = metrics_from_predictions([
        record(1.0), record(0.6), record(0.4), record(0.0, window=None)])

    assert metrics['R1@0.3'] == pytest.approx(75.0)
    assert metrics['R1@0.5'] == pytest.approx(50.0)
    assert metrics['R1@0.7'] == pytest.approx(25.0)
    assert metrics['mIoU'] == pytest.approx(50.0)
    assert metrics['parse_failure_rate'] == pytest.approx(0.25)
    assert metrics['count'] == 4


def test_metrics_need_predictions():

    with pytest.raises(DiagnosticsError):
        metrics_from_predictions([])


def test_predictions_serialize(tiny_dataset, make_model):

    prediction = predict_window(make_model(tiny_dataset),
                                tiny_dataset.samples[0])
    data = prediction.as_dict()

    assert isinstance(prediction, Prediction)
    assert data['target'] == tiny_dataset.samples[0].window.as_list()
    assert 0.0 <= data['iou'] <= 1.0

    if prediction.window is None:
        assert data['iou'] == 0.0


def test_evaluate_scores_every_sample(tiny_dataset, make_model):

    metrics, predictions = evaluate(make_model(tiny_dataset), tiny_dataset)

    assert metrics['count'] == len(tiny_dataset)
    assert [p.video_id for p in predictions] == \
        [sample.video_id for sample in tiny_dataset]
    assert 0.0 <= metrics['mIoU'] <= 100.0
