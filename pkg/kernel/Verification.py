"""Oracle suites run by ``DepthForge.py verify``.

Every check compares the production code against an independently coded
reference (scalar loops, hand-evaluated values, finite differences) or a
property of the generated scenes. ``quick`` runs a reduced suite; ``full``
adds more scenes, the architecture shape grid and block-level gradient
checks. Faults can be injected to show the suites catch real defects.
"""
import logging
import math
import time
from collections import OrderedDict, namedtuple
from contextlib import ExitStack
from unittest import mock

import numpy as np

from kconfig import NetConfig, SceneConfig, TrainConfig
from kernel import Autodiff, EvalKit, Loss, StereoGeometry, Trainer
from kernel.DataFactory import DepthMap, gen_scene, stack_samples
from kernel.Network import Network, build_resblock, build_upproject, init_params
from kernel.StereoGeometry import Calib

logger = logging.getLogger(__name__)

LEVELS = ('quick', 'full')


def _swapped_berhu(d, delta):
    d = np.asarray(d, dtype=np.float64)
    a = np.abs(d)
    out = np.where(a <= delta, (d * d + delta * delta) / (2.0 * delta), a)
    return float(out) if out.ndim == 0 else out


def _flipped_warp(original):
    def warp_coord(x, rho, calib, sign):
        return original(x, rho, calib, -sign)
    return warp_coord


INJECTIONS = OrderedDict((
    ('warp-sign', ('kernel.StereoGeometry.warp_coord', lambda: _flipped_warp(StereoGeometry.warp_coord))),
    ('berhu-swap', ('kernel.Loss.berhu', lambda: _swapped_berhu)),
    ('no-weight-decay', ('kernel.Trainer.decay_gradient', lambda: (lambda grad, param, weight_decay: grad))),
))


class CheckFailed(AssertionError):
    pass


def expect(condition, message):
    if not condition:
        raise CheckFailed(message)


GradRow = namedtuple('GradRow', 'term, coords, max_abs_error, max_rel_error, passed')


class CheckDefinition:
    """One named invariant; ``run`` raises CheckFailed with a reason when it does not hold."""
    invariant = None

    def __init__(self, level):
        self.level = level
        self.passed = None
        self.detail = ''
        self.seconds = 0.0
        self.grad_rows = []

    @property
    def full(self):
        return self.level == 'full'

    def run(self):
        raise NotImplementedError()

    def summary(self):
        state = 'pending' if self.passed is None else 'ok' if self.passed else 'FAILED'
        return '{:<34} {:>7} {:6.2f}s {}'.format(self.invariant, state, self.seconds, self.detail)


# --- scalar oracles (never call the code under test) -----------------------------------------

def berhu_oracle(d, delta):
    a = abs(d)
    return a if a <= delta else (d * d + delta * delta) / (2.0 * delta)


def metrics_oracle(pred, gt):
    n = len(pred)
    se = sle = ard = srd = l10 = 0.0
    acc = [0, 0, 0]
    for p, z in zip(pred, gt):
        se += (p - z) ** 2
        sle += (math.log(p) - math.log(z)) ** 2
        ard += abs(p - z) / z
        srd += (p - z) ** 2 / z
        l10 += abs(math.log10(p) - math.log10(z))
        ratio = max(p / z, z / p)
        for k in range(3):
            if ratio < 1.25 ** (k + 1):
                acc[k] += 1
    return [math.sqrt(se / n), math.sqrt(sle / n), ard / n, srd / n, acc[0] / n, acc[1] / n, acc[2] / n, l10 / n]


def bilinear_oracle(image, cx, cy):
    """Nested-loop lookup of an H x W image at float coordinates; None when outside."""
    h, w = image.shape
    if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
        return None
    x0 = min(int(math.floor(cx)), max(w - 2, 0))
    y0 = min(int(math.floor(cy)), max(h - 2, 0))
    fx, fy = cx - x0, cy - y0
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    return ((1 - fy) * ((1 - fx) * image[y0, x0] + fx * image[y0, x1])
            + fy * ((1 - fx) * image[y1, x0] + fx * image[y1, x1]))


# --- checks -----------------------------------------------------------------------------------

class BerhuCheck(CheckDefinition):
    invariant = 'berhu properties'

    def run(self):
        rng = np.random.default_rng(11)
        cases = 1000 if self.full else 200
        for _ in range(cases):
            d, delta = rng.normal(0.0, 3.0), rng.uniform(0.05, 4.0)
            value = Loss.berhu(d, delta)
            expect(abs(value - berhu_oracle(d, delta)) <= 1e-12, 'berhu({:.4g}, {:.4g}) = {:.6g}, expected {:.6g}'.format(
                d, delta, value, berhu_oracle(d, delta)))
            expect(value >= abs(d) - 1e-15, 'berhu below |d| at d={:.4g}'.format(d))
            if abs(d) <= delta:
                expect(value == abs(d), 'berhu differs from |d| inside the threshold at d={:.4g}'.format(d))
        for delta in (0.3, 1.0, 2.5):
            h = 1e-7
            left = (Loss.berhu(delta, delta) - Loss.berhu(delta - h, delta)) / h
            right = (Loss.berhu(delta + h, delta) - Loss.berhu(delta, delta)) / h
            expect(abs(left - right) <= 1e-6, 'berhu slope jumps at the knee for delta={}'.format(delta))
        expect(Loss.berhu(2.0, 1.0) == 2.5, 'berhu(2, 1) != 2.5')
        self.detail = '{} cases'.format(cases)


class ScheduleCheck(CheckDefinition):
    invariant = 'fade-in schedule'

    def run(self):
        beta = 0.7
        for t in (1, 10, 100):
            expected = beta * math.exp(-10.0 / t)
            expect(abs(Loss.lambda_schedule(t, beta) - expected) <= 1e-12, 'lambda_t wrong at t={}'.format(t))
        values = np.array([Loss.lambda_schedule(t, beta) for t in range(1, 100001 if self.full else 10001, 97)])
        expect(np.all(np.diff(values) >= 0), 'lambda_t decreases somewhere')


class MetricOracleCheck(CheckDefinition):
    invariant = 'metric oracle'

    def run(self):
        rng = np.random.default_rng(5)
        sets = 100 if self.full else 20
        for _ in range(sets):
            n = int(rng.integers(1, 1001))
            gt = rng.uniform(1.0, 80.0, n)
            pred = gt * np.exp(rng.normal(0.0, 0.3, n))
            m = EvalKit.compute_metrics(EvalKit.Pairs(pred, gt))
            got = m.row() + [m.log10]
            want = metrics_oracle(pred.tolist(), gt.tolist())
            worst = max(abs(a - b) / max(1.0, abs(b)) for a, b in zip(got, want))
            expect(worst <= 1e-12, 'metrics differ from the scalar oracle by {:.3g}'.format(worst))
            expect(m.acc1 <= m.acc2 <= m.acc3, 'accuracies not monotone')
        self.detail = '{} pair sets'.format(sets)


class ProtocolCheck(CheckDefinition):
    invariant = 'protocol clamping'

    def run(self):
        gt = DepthMap(np.array([[1.0, 4.0], [10.0, 92.0]]), np.ones((2, 2), dtype=bool))
        pred = np.array([[0.4, 4.0], [60.0, 90.0]])
        garg = EvalKit.PROTOCOLS['garg50'].with_crop(None)
        pairs = EvalKit.apply_protocol(pred, gt, garg)
        expect(pairs.pred.tolist() == [1.0, 4.0, 50.0], 'garg50 clamping gave {}'.format(pairs.pred.tolist()))
        pairs = EvalKit.apply_protocol(pred, gt, EvalKit.PROTOCOLS['ablation'])
        expect(pairs.gt.tolist() == [10.0, 92.0], 'ablation floor kept {}'.format(pairs.gt.tolist()))
        pairs = EvalKit.apply_protocol(pred, gt, EvalKit.PROTOCOLS['eigen80'].with_crop(None))
        expect(92.0 not in pairs.gt.tolist(), 'eigen80 kept a ground-truth depth above 80 m')


class SamplingOracleCheck(CheckDefinition):
    invariant = 'bilinear sampling oracle'

    def run(self):
        rng = np.random.default_rng(3)
        image = rng.uniform(size=(1, 1, 6, 9))
        cx = rng.uniform(-1.0, 9.5, size=(1, 6, 9))
        cy = rng.uniform(-0.5, 6.0, size=(1, 6, 9))
        values, valid = StereoGeometry.sample_bilinear(image, (cx, cy))
        for y in range(6):
            for x in range(9):
                want = bilinear_oracle(image[0, 0], cx[0, y, x], cy[0, y, x])
                expect((want is not None) == bool(valid[0, y, x]), 'validity mismatch at ({}, {})'.format(x, y))
                if want is not None:
                    expect(abs(values[0, 0, y, x] - want) <= 1e-12, 'sample mismatch at ({}, {})'.format(x, y))


def _scene_cfg():
    return SceneConfig(width=64, height=32, num_layers=4)


class WarpRoundTripCheck(CheckDefinition):
    invariant = 'warping round trip'

    def run(self):
        scenes = 20 if self.full else 4
        worst = 0.0
        for seed in range(scenes):
            sample = gen_scene(_scene_cfg(), seed)
            batch = stack_samples([sample])
            for source, target, rho, mask, sign in (
                    (batch.I_r, batch.I_l, batch.true_rho_l, sample.nonoccluded_l, +1),
                    (batch.I_l, batch.I_r, batch.true_rho_r, sample.nonoccluded_r, -1)):
                rec, valid = StereoGeometry.reconstruct_view(source, rho, sample.calib, sign)
                keep = valid[0] & mask
                expect(keep.any(), 'scene {} has no valid non-disoccluded pixel'.format(seed))
                worst = max(worst, float(np.abs(rec[0, 0] - target[0, 0])[keep].max()))
        expect(worst < 1e-6, 'reconstruction at the true inverse depth is off by {:.3g}'.format(worst))
        self.detail = '{} scenes, max error {:.2g}'.format(scenes, worst)


class AlignmentWellPosedCheck(CheckDefinition):
    invariant = 'alignment well-posedness'

    def run(self):
        scenes = 20 if self.full else 4
        for seed in range(scenes):
            sample = gen_scene(_scene_cfg(), 100 + seed)
            batch = stack_samples([sample])
            masks = (sample.nonoccluded_l, sample.nonoccluded_r)

            def per_pixel(scale):
                errs, count = 0.0, 0
                residuals = Loss.alignment_residuals(batch.I_l, batch.I_r, scale * batch.true_rho_l,
                                                     scale * batch.true_rho_r, sample.calib, sigma=0.0)
                for (residual, valid), mask in zip(residuals, masks):
                    keep = valid[0] & mask
                    errs += float(residual[0, 0][keep].sum())
                    count += int(keep.sum())
                return errs / max(count, 1)

            at_truth = per_pixel(1.0)
            expect(at_truth < 1e-6, 'scene {}: alignment error at the truth is {:.3g} per pixel'.format(seed, at_truth))
            for scale in (0.9, 1.1):
                off = per_pixel(scale)
                expect(off >= 10.0 * at_truth and off > at_truth,
                       'scene {}: rho x{} does not raise the alignment error tenfold'.format(seed, scale))

            # smoothed images, every in-bounds pixel, occlusions included
            def smoothed(scale):
                return Loss.unsupervised_loss(batch.I_l, batch.I_r, scale * batch.true_rho_l,
                                              scale * batch.true_rho_r, sample.calib)

            lowest = smoothed(1.0)
            for scale in (0.8, 0.9, 1.1, 1.2):
                expect(smoothed(scale) > lowest,
                       'scene {}: smoothed alignment loss at rho x{} is not above the truth'.format(seed, scale))
        self.detail = '{} scenes'.format(scenes)


class SgdOracleCheck(CheckDefinition):
    invariant = 'sgd momentum with weight decay'

    def run(self):
        cfg = TrainConfig(batch_size=1, max_epochs=1, beta=1.0, gamma=0.5, seed=0,
                          lr=0.1, momentum=0.9, weight_decay=0.01)
        theta0 = {'conv.weight': np.array([1.0, -2.0]), 'conv.bias': np.array([0.5])}
        grad = {'conv.weight': np.array([0.2, 0.1]), 'conv.bias': np.array([-0.3])}
        params = {k: v.copy() for k, v in theta0.items()}
        state = Trainer.TrainState()
        for _ in range(3):
            Trainer.sgd_step(params, grad, state, cfg)

        for name, values in theta0.items():
            for i, theta in enumerate(values):
                v = 0.0
                for _ in range(3):
                    g = grad[name][i] + (cfg.weight_decay * theta if name.endswith('.weight') else 0.0)
                    v = cfg.momentum * v + g
                    theta -= cfg.lr * v
                expect(abs(params[name][i] - theta) <= 1e-12, '{}[{}] = {:.12g}, expected {:.12g}'.format(
                    name, i, params[name][i], theta))
        expect(state.t == 3, 'iteration counter is {} after 3 steps'.format(state.t))


def _grad_row(term, report):
    return GradRow(term, len(report.entries), report.max_abs_error, report.max_rel_error, report.passed)


def _random_maps(rng, n=1, h=8, w=16):
    images_l = rng.uniform(0.1, 0.9, size=(n, 1, h, w))
    images_r = rng.uniform(0.1, 0.9, size=(n, 1, h, w))
    rho = OrderedDict((('rho_l', rng.uniform(0.1, 0.4, size=(n, 1, h, w))),
                       ('rho_r', rng.uniform(0.1, 0.4, size=(n, 1, h, w)))))
    depth = rng.uniform(2.0, 12.0, size=(n, 1, h, w))
    gt = DepthMap(depth, rng.uniform(size=(n, 1, h, w)) < 0.4)
    return images_l, images_r, rho, gt


class LossGradientCheck(CheckDefinition):
    invariant = 'loss gradients'

    def run(self):
        rng = np.random.default_rng(17)
        I_l, I_r, rho, gt = _random_maps(rng)
        calib = Calib(10.0, 0.5)
        delta = Loss.adaptive_delta([1.0 / rho['rho_l'], 1.0 / rho['rho_r']], [gt, gt])
        terms = OrderedDict((
            ('supervised', lambda t, p: Loss.supervised_loss(p['rho_l'], p['rho_r'], gt, gt, delta=delta)[0]),
            ('unsupervised', lambda t, p: Loss.unsupervised_loss(I_l, I_r, p['rho_l'], p['rho_r'], calib)),
            ('regularizer', lambda t, p: Loss.regularization_loss(I_l, I_r, p['rho_l'], p['rho_r'])),
        ))
        failed = []
        for term, f in terms.items():
            report = Autodiff.grad_check(f, rho, eps=1e-6, tol=1e-4, atol=1e-9,
                                         max_coords=None if self.full else 40)
            self.grad_rows.append(_grad_row(term, report))
            if not report.passed:
                failed.append(term)
        expect(not failed, 'gradient mismatch in {}'.format(', '.join(failed)))


def tiny_net_config(**overrides):
    values = dict(base_width=8, blocks_per_stage=(1, 1), dropout_p=0.0, rho_init=0.1)
    values.update(overrides)
    return NetConfig(**values)


class EndToEndGradientCheck(CheckDefinition):
    invariant = 'end-to-end gradient'

    def run(self):
        scene = SceneConfig(width=32, height=16, num_layers=3, depth_range=(3.0, 30.0), f_px=12.0,
                            gt_density=0.3, gt_rows_band=1.0)
        batch = stack_samples([gen_scene(scene, 7)])
        cfg = TrainConfig(batch_size=1, max_epochs=1, beta=1.0, gamma=0.5, seed=0)
        net = Network(tiny_net_config())
        init_params(net, 3)
        t = 50
        delta = Trainer.step_loss(net, batch, cfg, t, mode='train', tape=Autodiff.Tape()).delta

        def f(tape, nodes):
            return Trainer.step_loss(net, batch, cfg, t, mode='train', tape=tape, delta=delta).graph

        rng = np.random.default_rng(0)
        names = list(net.params)
        if not self.full:
            names = [names[i] for i in sorted(rng.choice(len(names), size=min(8, len(names)), replace=False))]
        params = OrderedDict((name, net.params[name]) for name in names)
        report = Autodiff.grad_check(f, params, eps=1e-6, tol=1e-4, atol=1e-8, max_coords=4 if self.full else 2)
        self.grad_rows.append(_grad_row('total (network)', report))
        worst = report.worst
        expect(report.passed, 'worst coordinate {}{} rel error {:.3g}'.format(
            worst.param, list(worst.index), worst.rel_error) if worst else 'no coordinates checked')


class BlockGradientCheck(CheckDefinition):
    invariant = 'block gradients'

    def run(self):
        rng = np.random.default_rng(23)
        blocks = (('resblock type 1', build_resblock(1, 1, 8, 8), (2, 8, 6, 6)),
                  ('resblock type 2', build_resblock(2, 2, 8, 16), (2, 8, 6, 6)),
                  ('upprojection', build_upproject(8), (2, 8, 3, 3)))
        failed = []
        for term, block, shape in blocks:
            init_params(block, 1)
            x = rng.normal(size=shape)
            weights = rng.normal(size=block.forward(x, 'train').shape)

            def f(tape, nodes, block=block, x=x, weights=weights):
                return Autodiff.total(block.forward(x, 'train', tape=tape) * weights)

            report = Autodiff.grad_check(f, block.params, eps=1e-5, tol=1e-5, atol=1e-7, max_coords=6)
            self.grad_rows.append(_grad_row(term, report))
            if not report.passed:
                failed.append(term)
        expect(not failed, 'gradient mismatch in {}'.format(', '.join(failed)))


class ShapeGridCheck(CheckDefinition):
    invariant = 'architecture shapes'

    def run(self):
        sizes = [(32, 32), (32, 45), (33, 64), (40, 96), (47, 33), (64, 64), (71, 50), (96, 96)]
        grid = sizes if self.full else sizes[:3]
        for skips in (True, False):
            net = Network(NetConfig(base_width=8, blocks_per_stage=(1, 1, 1, 1), use_long_skips=skips))
            init_params(net, 0)
            for h, w in grid:
                shapes = net.trace(np.zeros((1, 1, h, w)))
                want = (math.ceil(h / 2), math.ceil(w / 2))
                expect(shapes['rho'][2:] == want, '{}x{} gave {} (skips={})'.format(w, h, shapes['rho'], skips))
                expect(shapes['bottleneck'][2:] == (math.ceil(h / 32), math.ceil(w / 32)),
                       'bottleneck of {}x{} is {}'.format(w, h, shapes['bottleneck']))
        self.detail = '{} sizes x 2'.format(len(grid))


class VerificationSuite:
    def __init__(self, level='quick'):
        if level not in LEVELS:
            raise ValueError('level must be one of {}'.format(LEVELS))
        self.level = level
        kinds = [BerhuCheck, ScheduleCheck, MetricOracleCheck, ProtocolCheck, SamplingOracleCheck,
                 WarpRoundTripCheck, AlignmentWellPosedCheck, SgdOracleCheck, LossGradientCheck,
                 EndToEndGradientCheck]
        if level == 'full':
            kinds += [BlockGradientCheck, ShapeGridCheck]
        self.checks = [kind(level) for kind in kinds]


Report = namedtuple('Report', 'passed, failures, grad_rows')


class SuiteRunner:
    def __init__(self, suite, inject=None):
        if inject is not None and inject not in INJECTIONS:
            raise ValueError('unknown fault {!r}; choose one of {}'.format(inject, ', '.join(INJECTIONS)))
        self.suite = suite
        self.inject = inject

    def print(self):
        print('--> Verification ({})'.format(self.suite.level))
        for k, check in enumerate(self.suite.checks, start=1):
            print(k, check.summary())

    def print_gradients(self):
        rows = [row for check in self.suite.checks for row in check.grad_rows]
        if not rows:
            return
        print('--> Max gradient errors')
        print('{:<18} {:>6} {:>12} {:>12} {:>6}'.format('term', 'coords', 'max_abs', 'max_rel', 'ok'))
        for row in rows:
            print('{:<18} {:>6} {:>12.3e} {:>12.3e} {:>6}'.format(
                row.term, row.coords, row.max_abs_error, row.max_rel_error, 'yes' if row.passed else 'NO'))

    def run(self):
        with ExitStack() as stack:
            if self.inject:
                target, factory = INJECTIONS[self.inject]
                stack.enter_context(mock.patch(target, factory()))
                logger.warning('fault injected: %s (%s)', self.inject, target)
            for check in self.suite.checks:
                start = time.perf_counter()
                try:
                    check.run()
                    check.passed = True
                except CheckFailed as e:
                    check.passed = False
                    check.detail = str(e)
                except Exception as e:
                    check.passed = False
                    check.detail = '{}: {}'.format(type(e).__name__, e)
                check.seconds = time.perf_counter() - start
                log = logger.info if check.passed else logger.error
                log('%s: %s %s', check.invariant, 'ok' if check.passed else 'FAILED', check.detail)

        failures = [check.invariant for check in self.suite.checks if not check.passed]
        return Report(not failures, failures, [row for c in self.suite.checks for row in c.grad_rows])


def run_verification(level='quick', inject=None, echo=True):
    runner = SuiteRunner(VerificationSuite(level), inject)
    report = runner.run()
    if echo:
        runner.print()
        runner.print_gradients()
    return report


if __name__ == "__main__":
    pass
