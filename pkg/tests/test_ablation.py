import os
from dataclasses import asdict

import numpy as np
import pytest

from kconfig import BenchConfig, RunConfig, SceneConfig, load_config
from kernel import Ablation, EvalKit
from kernel.Ablation import VARIANTS, UnknownVariantError
from kernel.DataFactory import gen_scene


@pytest.fixture
def run_cfg(tiny_net_cfg, train_cfg):
    return RunConfig(net=tiny_net_cfg, train=train_cfg, scene=SceneConfig(width=32, height=16, gt_density=0.4),
                     bench=BenchConfig(train_scenes=2, val_scenes=1, test_scenes=2))


class TestVariants:
    def test_names(self):
        assert list(VARIANTS)[:2] == ['full', 'full*']
        assert {'supervised-only', 'unsupervised-only', 'gt50', 'gt1', 'no-skip', 'no-smoothing', 'l2'} <= set(VARIANTS)

    def test_lookup(self):
        assert [v.name for v in Ablation.get_variants(['gt1', 'full'])] == ['gt1', 'full']
        assert len(Ablation.get_variants()) == len(VARIANTS)
        with pytest.raises(UnknownVariantError, match='full'):
            Ablation.get_variants(['half'])

    def test_configs_change_only_their_fields(self, run_cfg):
        net, train, scene = Ablation.variant_configs(VARIANTS['no-skip+no-smoothing'], run_cfg)
        assert not net.use_long_skips and train.sigma == 0.0 and train.unsup_excludes_gt
        assert net.base_width == run_cfg.net.base_width and train.gamma == run_cfg.train.gamma
        assert scene is run_cfg.scene

    def test_density_scaling(self, run_cfg):
        _, train, scene = Ablation.variant_configs(VARIANTS['gt1'], run_cfg)
        assert scene.gt_density == pytest.approx(0.004)
        assert train.beta == run_cfg.train.beta

    @pytest.mark.parametrize('name, field, value', [('supervised-only', 'gamma', 0.0),
                                                    ('unsupervised-only', 'beta', 0.0),
                                                    ('l2', 'supervised_norm', 'l2'),
                                                    ('full', 'unsup_excludes_gt', False),
                                                    ('full*', 'unsup_excludes_gt', True),
                                                    ('supervised-only-gt1', 'unsup_excludes_gt', True)])
    def test_train_overrides(self, run_cfg, name, field, value):
        _, train, _ = Ablation.variant_configs(VARIANTS[name], run_cfg)
        assert getattr(train, field) == value

    def test_baselines(self):
        assert [name for name, v in VARIANTS.items() if v.baseline is None] == ['full']
        assert all(v.baseline in VARIANTS for v in VARIANTS.values() if v.baseline)

    @pytest.mark.parametrize('name', [name for name, v in VARIANTS.items() if v.baseline])
    def test_each_variant_differs_from_its_baseline_in_one_setting(self, run_cfg, name):
        variant = VARIANTS[name]
        mine = Ablation.variant_configs(variant, run_cfg)
        base = Ablation.variant_configs(VARIANTS[variant.baseline], run_cfg)
        changed = [key for a, b in zip(mine, base) for key, value in asdict(a).items() if asdict(b)[key] != value]
        assert len(changed) == 1, changed


def _result(name, rmse):
    metrics = EvalKit.Metrics(rmse=rmse, rmse_log=0.1, ard=0.1, srd=0.1, acc1=0.9, acc2=0.95, acc3=0.99, count=10)
    return Ablation.VariantResult(VARIANTS[name], metrics, [metrics])


class TestTrends:
    def test_ratios_and_verdicts(self):
        results = [_result('full*', 2.0), _result('gt50', 2.2), _result('gt1', 3.0),
                   _result('supervised-only-gt1', 2.9), _result('no-smoothing', 1.8)]
        trends = {t.variant: t for t in Ablation.check_trends(results)}
        assert trends['gt50'].ratio == pytest.approx(1.1) and trends['gt50'].passed
        assert trends['gt1'].reference == 'supervised-only-gt1' and not trends['gt1'].passed
        assert trends['no-smoothing'].ratio == pytest.approx(0.9) and not trends['no-smoothing'].passed

    def test_pairs_not_run_are_skipped(self):
        assert Ablation.check_trends([_result('full', 1.0), _result('gt50', 1.0)]) == []


def test_dense_truth(scene_cfg):
    sample = gen_scene(scene_cfg, 0)
    truth = Ablation.dense_truth(sample)
    assert truth.valid.all()
    np.testing.assert_allclose(truth.depth * sample.true_rho_l, 1.0)


@pytest.mark.slow
def test_run_ablation_writes_csv(tmp_path, run_cfg, capsys):
    results = Ablation.run_ablation(run_cfg, ['full', 'supervised-only'], seeds=1, out_dir=str(tmp_path))
    assert [r.variant.name for r in results] == ['full', 'supervised-only']
    assert all(0 < r.metrics.count <= 2 * 16 * 32 for r in results)
    assert '--> full' in capsys.readouterr().out
    with open(os.path.join(str(tmp_path), Ablation.ABLATION_CSV)) as f:
        lines = f.read().splitlines()
    assert lines[0].startswith('variant,rmse')
    assert [line.split(',')[0] for line in lines[1:]] == ['full', 'supervised-only']


def test_seed_count_checked(run_cfg):
    with pytest.raises(ValueError):
        Ablation.run_ablation(run_cfg, ['full'], seeds=0)


@pytest.mark.benchmark
def test_benchmark_follows_the_expected_directions():
    site_config = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'site_config')
    cfg = load_config(os.path.join(site_config, 'benchmark.cfg'))
    results = Ablation.run_ablation(cfg, ['full*', 'gt50', 'gt1', 'supervised-only-gt1', 'no-smoothing'], seeds=3)
    trends = Ablation.check_trends(results)
    assert len(trends) == len(Ablation.TRENDS)
    assert all(t.passed for t in trends), trends
