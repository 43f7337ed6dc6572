"""Ablation runs on the synthetic benchmark.

Each variant changes a few fields of the run configuration, is trained once
per seed on the same generated scenes as every other variant, and is scored
on a held-out split against the dense true depth under the ``ablation``
protocol. Variants marked as excluding ground truth evaluate the alignment
term only on pixels without a depth sample. Each variant names the baseline
it differs from in a single setting, and ``check_trends`` compares the mean
rmse of the pairs whose direction is known in advance.
"""
import csv
import logging
import math
import os
from collections import OrderedDict, namedtuple
from dataclasses import replace

import numpy as np

from kernel import EvalKit, Trainer
from kernel.DataFactory import DepthMap, SyntheticDataset
from kernel.Network import predict

logger = logging.getLogger(__name__)

ABLATION_CSV = 'ablation.csv'

Variant = namedtuple('Variant', 'name, description, train, net, gt_scale, baseline')


def _variant(name, description, train=None, net=None, gt_scale=1.0, baseline=None):
    return name, Variant(name, description, train or {}, net or {}, gt_scale, baseline)


_EXCL = {'unsup_excludes_gt': True}

# every variant but the first differs from its baseline in one setting
VARIANTS = OrderedDict((
    _variant('full', 'alignment term on every valid pixel'),
    _variant('full*', 'alignment term only where ground truth is missing', _EXCL, baseline='full'),
    _variant('supervised-only', 'gamma = 0', {'gamma': 0.0}, baseline='full'),
    _variant('supervised-only-gt1', 'gamma = 0 with 1% of the depth samples', dict(_EXCL, gamma=0.0),
             gt_scale=0.01, baseline='gt1'),
    _variant('unsupervised-only', 'beta = 0', {'beta': 0.0}, baseline='full'),
    _variant('gt50', '50% of the depth samples', _EXCL, gt_scale=0.5, baseline='full*'),
    _variant('gt1', '1% of the depth samples', _EXCL, gt_scale=0.01, baseline='full*'),
    _variant('no-skip', 'no long skip connections', _EXCL, {'use_long_skips': False}, baseline='full*'),
    _variant('no-smoothing', 'no Gaussian presmoothing in the alignment term', dict(_EXCL, sigma=0.0),
             baseline='full*'),
    _variant('no-skip+no-smoothing', 'neither long skips nor presmoothing', dict(_EXCL, sigma=0.0),
             {'use_long_skips': False}, baseline='no-skip'),
    _variant('l2', 'squared error instead of berHu in the supervised term', {'supervised_norm': 'l2'},
             baseline='full'),
))

# (description, variant, reference, lowest and highest allowed rmse ratio variant / reference)
TRENDS = (
    ('alignment term helps at 1% ground truth', 'gt1', 'supervised-only-gt1', 0.0, 1.0),
    ('half the ground truth costs at most 15%', 'gt50', 'full*', 0.85, 1.15),
    ('presmoothing removal gains at most 5%', 'no-smoothing', 'full*', 0.95, math.inf),
)


class UnknownVariantError(KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return 'unknown variant {!r}; choose from {}'.format(self.name, ', '.join(VARIANTS))


VariantResult = namedtuple('VariantResult', 'variant, metrics, per_seed')


def get_variants(names=None):
    if not names:
        return list(VARIANTS.values())
    try:
        return [VARIANTS[name] for name in names]
    except KeyError as e:
        raise UnknownVariantError(e.args[0])


def variant_configs(variant, run_cfg):
    """(net, train, scene) configs of one variant."""
    net = replace(run_cfg.net, **variant.net)
    train = replace(run_cfg.train, **variant.train)
    scene = run_cfg.scene
    if variant.gt_scale != 1.0:
        scene = replace(scene, gt_density=scene.gt_density * variant.gt_scale)
    return net, train, scene


def dense_truth(sample):
    return DepthMap.dense(1.0 / np.asarray(sample.true_rho_l))


def score(net, test_set, rho_min, protocol):
    preds, gts = [], []
    for sample in test_set:
        rho = predict(net, sample.I_l)
        preds.append(1.0 / np.maximum(rho[None], rho_min))
        gts.append(dense_truth(sample))
    return EvalKit.evaluate_dataset(preds, gts, protocol)


def run_variant(variant, run_cfg, seeds, threads=1, deterministic=True, dtype=np.float64):
    """Train and score one variant for seeds base, base + 1, ... base + seeds - 1."""
    net_cfg, train_cfg, scene = variant_configs(variant, run_cfg)
    bench = run_cfg.bench
    protocol = EvalKit.PROTOCOLS['ablation']
    test_set = SyntheticDataset(run_cfg.scene, bench.test_scenes, run_cfg.train.seed, 'test')

    per_seed = []
    for k in range(seeds):
        seed = run_cfg.train.seed + k
        cfg = replace(train_cfg, seed=seed)
        result = Trainer.train(SyntheticDataset(scene, bench.train_scenes, seed, 'train'),
                               SyntheticDataset(scene, bench.val_scenes, seed, 'val'),
                               net_cfg, cfg, threads=threads, deterministic=deterministic, dtype=dtype)
        metrics = score(result.net, test_set, cfg.rho_min, protocol)
        logger.info('%s seed %d: %s after %d epochs, rmse %.4f', variant.name, seed, result.stop_reason,
                    result.state.epoch, metrics.rmse)
        per_seed.append(metrics)
    return VariantResult(variant, EvalKit.mean_metrics(per_seed), per_seed)


def write_results(results, path):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['variant'] + EvalKit.METRIC_COLUMNS + ['log10'])
        for r in results:
            writer.writerow([r.variant.name] + ['{:.6f}'.format(v) for v in r.metrics.row(with_log10=True)])
    return path


Trend = namedtuple('Trend', 'description, variant, reference, ratio, passed')


def check_trends(results):
    """Mean test rmse ratios for the expected directions whose two variants are in ``results``."""
    rmse = {r.variant.name: r.metrics.rmse for r in results}
    trends = []
    for description, variant, reference, low, high in TRENDS:
        if variant not in rmse or reference not in rmse:
            continue
        ratio = rmse[variant] / rmse[reference]
        trends.append(Trend(description, variant, reference, ratio, bool(low <= ratio <= high)))
        if not trends[-1].passed:
            logger.warning('%s: %s / %s rmse ratio %.3f outside [%s, %s]', description, variant, reference, ratio,
                           low, high)
    return trends


def run_ablation(run_cfg, names=None, seeds=3, out_dir=None, threads=1, deterministic=True, dtype=np.float64):
    if seeds < 1:
        raise ValueError('seeds must be >= 1')
    results = []
    for variant in get_variants(names):
        print('--> {:<22} {}'.format(variant.name, variant.description))
        results.append(run_variant(variant, run_cfg, seeds, threads, deterministic, dtype))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_results(results, os.path.join(out_dir, ABLATION_CSV))
    return results


if __name__ == "__main__":
    pass
