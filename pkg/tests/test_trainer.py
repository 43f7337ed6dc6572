import math
from collections import OrderedDict
from dataclasses import replace
from unittest import mock

import numpy as np
import pytest

from kconfig import SceneConfig
from kernel import Trainer
from kernel.DataFactory import SyntheticDataset, stack_samples
from kernel.Network import build_network
from kernel.Trainer import TrainingDiverged, TrainState


class TestSgdStep:
    def test_two_steps_by_hand(self, train_cfg):
        cfg = replace(train_cfg, lr=0.1, momentum=0.5, weight_decay=0.1)
        params = OrderedDict(w=np.array([1.0]), b=np.array([2.0]))
        grads = OrderedDict(w=np.array([0.5]), b=np.array([0.5]))
        state = TrainState()
        Trainer.sgd_step(params, grads, state, cfg, decayed=lambda name: name == 'w')
        # v_w = 0.5 + 0.1 * 1 = 0.6, v_b = 0.5
        np.testing.assert_allclose(params['w'], [0.94])
        np.testing.assert_allclose(params['b'], [1.95])
        Trainer.sgd_step(params, grads, state, cfg, decayed=lambda name: name == 'w')
        # v_w = 0.5 * 0.6 + 0.5 + 0.1 * 0.94 = 0.894
        np.testing.assert_allclose(params['w'], [0.94 - 0.0894])
        np.testing.assert_allclose(params['b'], [1.95 - 0.075])
        assert state.t == 2

    def test_key_mismatch(self, train_cfg):
        with pytest.raises(Trainer.ParameterKeyError):
            Trainer.sgd_step({'a': np.zeros(1)}, {'b': np.zeros(1)}, TrainState(), train_cfg)

    def test_decay_hook_is_used(self, train_cfg):
        params, grads = {'c.weight': np.ones(1)}, {'c.weight': np.zeros(1)}
        with mock.patch('kernel.Trainer.decay_gradient', side_effect=lambda g, p, wd: g) as hook:
            Trainer.sgd_step(params, grads, TrainState(), train_cfg)
        hook.assert_called_once()
        np.testing.assert_array_equal(params['c.weight'], [1.0])


def test_batches_cover_every_index_once():
    batches = Trainer.make_batches(5, 2, np.array([4, 0, 3, 1, 2]))
    assert [b.tolist() for b in batches] == [[4, 0], [3, 1], [2]]


@pytest.mark.parametrize('deterministic', [True, False])
def test_threaded_loading_yields_every_batch(scene_cfg, train_cfg, deterministic):
    data = SyntheticDataset(scene_cfg, 5, seed=1)
    batches = Trainer.make_batches(5, 2)
    sizes = [len(b) for b in Trainer.iterate_batches(data, batches, train_cfg, 1, threads=3,
                                                       deterministic=deterministic)]
    assert sorted(sizes) == [1, 2, 2]


def test_threaded_loading_keeps_order_when_deterministic(scene_cfg, train_cfg):
    data = SyntheticDataset(scene_cfg, 4, seed=1)
    batches = Trainer.make_batches(4, 1)
    serial = list(Trainer.iterate_batches(data, batches, train_cfg, 1, threads=1))
    pooled = list(Trainer.iterate_batches(data, batches, train_cfg, 1, threads=2, deterministic=True))
    for a, b in zip(serial, pooled):
        np.testing.assert_array_equal(a.I_l, b.I_l)


def test_step_loss_has_image_resolution_and_positive_terms(scene_cfg, tiny_net_cfg, train_cfg):
    net = build_network(tiny_net_cfg, 0)
    batch = stack_samples(SyntheticDataset(scene_cfg, 2, seed=2))
    breakdown = Trainer.step_loss(net, batch, train_cfg, t=10, mode='eval')
    assert breakdown.lambda_t == pytest.approx(math.exp(-1.0))
    assert breakdown.supervised > 0 and breakdown.unsupervised > 0
    rho_l, rho_r = Trainer.predict_pair(net, batch, 'eval')
    assert rho_l.shape == rho_r.shape == (2, 1, 32, 64)


@pytest.fixture
def datasets(scene_cfg):
    return SyntheticDataset(scene_cfg, 4, seed=5, split='train'), SyntheticDataset(scene_cfg, 2, seed=5, split='val')


@pytest.mark.slow
class TestTrain:
    def test_run_writes_log_and_checkpoints(self, tmp_path, datasets, tiny_net_cfg, train_cfg):
        result = Trainer.train(*datasets, tiny_net_cfg, train_cfg, out_dir=str(tmp_path))
        assert [row['epoch'] for row in result.log] == [1, 2]
        assert result.state.t == 4
        rows = Trainer.read_log(tmp_path / 'train_log.csv')
        assert list(rows[0]) == Trainer.LOG_COLUMNS
        assert rows[1]['t'] == 4
        assert rows[1]['lambda_t'] == pytest.approx(math.exp(-10.0 / 4))
        assert (tmp_path / 'best.ckpt').exists() and (tmp_path / 'last.ckpt').exists()
        net, ckpt = Trainer.load_network(str(tmp_path / 'best.ckpt'))
        assert ckpt.extra['best_val'] == min(row['val_total'] for row in result.log)

    def test_same_seed_same_weights(self, datasets, tiny_net_cfg, train_cfg):
        cfg = replace(train_cfg, max_epochs=1)
        a = Trainer.train(*datasets, tiny_net_cfg, cfg)
        b = Trainer.train(*datasets, tiny_net_cfg, cfg)
        for name in a.net.params:
            np.testing.assert_array_equal(a.net.params[name], b.net.params[name])

    def test_resume_continues_the_same_run(self, tmp_path, datasets, tiny_net_cfg, train_cfg):
        full = Trainer.train(*datasets, tiny_net_cfg, train_cfg)
        Trainer.train(*datasets, tiny_net_cfg, replace(train_cfg, max_epochs=1), out_dir=str(tmp_path))
        resumed = Trainer.train(*datasets, tiny_net_cfg, train_cfg, resume=str(tmp_path / 'last.ckpt'))
        assert resumed.state.t == full.state.t
        assert resumed.log[-1]['val_total'] == pytest.approx(full.log[-1]['val_total'], rel=1e-12)
        for name in full.net.params:
            np.testing.assert_allclose(resumed.net.params[name], full.net.params[name], rtol=1e-12, atol=1e-15)

    def test_resume_keeps_the_best_epoch_of_the_earlier_run(self, tmp_path, datasets, tiny_net_cfg, train_cfg):
        values = iter([1.0, 2.0])
        with mock.patch('kernel.Trainer.validation_loss', side_effect=lambda *a, **k: next(values)):
            Trainer.train(*datasets, tiny_net_cfg, train_cfg, out_dir=str(tmp_path))
        best, _ = Trainer.load_network(str(tmp_path / 'best.ckpt'))
        last, _ = Trainer.load_network(str(tmp_path / 'last.ckpt'))
        assert any(not np.array_equal(best.params[name], last.params[name]) for name in best.params)

        with mock.patch('kernel.Trainer.validation_loss', return_value=3.0):
            resumed = Trainer.train(*datasets, tiny_net_cfg, replace(train_cfg, max_epochs=3),
                                    resume=str(tmp_path / 'last.ckpt'))
        assert resumed.state.epoch == 3 and resumed.state.best_val == 1.0
        for name in best.params:
            np.testing.assert_array_equal(resumed.net.params[name], best.params[name])

    def test_lambda_never_decreases_in_the_log(self, tmp_path, datasets, tiny_net_cfg, train_cfg):
        Trainer.train(*datasets, tiny_net_cfg, replace(train_cfg, max_epochs=3, early_stop_patience=3),
                      out_dir=str(tmp_path))
        lambdas = [row['lambda_t'] for row in Trainer.read_log(tmp_path / 'train_log.csv')]
        assert len(lambdas) == 3
        assert all(b >= a for a, b in zip(lambdas, lambdas[1:]))

    def test_training_lowers_the_loss_on_its_scenes(self, scene_cfg, tiny_net_cfg, train_cfg):
        scenes = SyntheticDataset(scene_cfg, 16, seed=9)
        cfg = replace(train_cfg, batch_size=4, max_epochs=3)
        result = Trainer.train(scenes, SyntheticDataset(scene_cfg, 4, seed=9, split='val'), tiny_net_cfg, cfg)
        fresh = build_network(tiny_net_cfg, cfg.seed)
        t = result.state.t
        assert Trainer.validation_loss(result.net, scenes, cfg, t) < Trainer.validation_loss(fresh, scenes, cfg, t)

    @pytest.mark.parametrize('seed', [0, 1, 2])
    def test_supervised_term_alone_decreases_every_epoch(self, tiny_net_cfg, train_cfg, seed):
        # dense depth samples, one unaugmented batch per epoch
        scene = SceneConfig(width=64, height=32, num_layers=2, gt_density=1.0, gt_rows_band=1.0)
        scenes = SyntheticDataset(scene, 4, seed=seed)
        cfg = replace(train_cfg, gamma=0.0, reg_weight=0.0, batch_size=4, max_epochs=5, lr=1e-3,
                      weight_decay=0.0, augment=False, early_stop_patience=5, seed=seed)
        result = Trainer.train(scenes, scenes, tiny_net_cfg, cfg)
        supervised = [row['L_S'] for row in result.log]
        assert len(supervised) == 5
        assert all(b < a for a, b in zip(supervised, supervised[1:])), supervised

    def test_smoothness_term_alone_flattens_the_prediction(self, scene_cfg, tiny_net_cfg, train_cfg):
        scenes = SyntheticDataset(scene_cfg, 2, seed=4)
        cfg = replace(train_cfg, beta=0.0, gamma=0.0, batch_size=2, max_epochs=4, lr=1e-4, augment=False,
                      early_stop_patience=4)
        result = Trainer.train(scenes, scenes, tiny_net_cfg, cfg)
        smoothness = [row['L_R'] for row in result.log]
        assert len(smoothness) == 4
        assert 0.0 < smoothness[-1] < smoothness[0]

    def test_early_stop(self, datasets, tiny_net_cfg, train_cfg):
        cfg = replace(train_cfg, max_epochs=4, early_stop_patience=1)
        values = iter([1.0, 2.0, 0.5, 0.1])
        with mock.patch('kernel.Trainer.validation_loss', side_effect=lambda *a, **k: next(values)):
            result = Trainer.train(*datasets, tiny_net_cfg, cfg)
        assert result.stop_reason == 'early_stop'
        assert len(result.log) == 2
        assert result.state.best_val == 1.0

    def test_non_finite_loss_raises(self, datasets, tiny_net_cfg, train_cfg):
        with mock.patch('kernel.Loss.berhu', side_effect=lambda d, delta: np.full_like(np.asarray(d), np.nan)):
            with pytest.raises(TrainingDiverged) as info:
                Trainer.train(*datasets, tiny_net_cfg, train_cfg)
        assert info.value.iteration == 1


def test_empty_dataset_rejected(scene_cfg, tiny_net_cfg, train_cfg):
    with pytest.raises(ValueError):
        Trainer.train([], SyntheticDataset(scene_cfg, 1, seed=0), tiny_net_cfg, train_cfg)
