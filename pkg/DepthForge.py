"""Command-line entry point: gen, train, predict, eval, verify and ablate.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numerical divergence during training.
"""
import argparse
import glob
import logging
import os
import sys

import numpy as np

from kconfig import ConfigError, SceneConfig, SettingsError, load_config, record_snapshot, settings
from kernel import EvalKit, __version__
from kernel.Ablation import UnknownVariantError, VARIANTS, check_trends, run_ablation
from kernel.DataFactory import SceneConfigError, SyntheticDataset
from kernel.Manifest import RunManifest
from kernel.Network import ArchitectureError, InputTooSmallError, predict
from kernel.Storage import (SAMPLE_DIR, SAMPLE_FILES, CheckpointError, SampleDirectory, SampleFormatError,
                            materialize, read_depth_png, read_image, write_depth_png, write_pfm)
from kernel.Tensor import ShapeError, resize_bilinear
from kernel.Trainer import BEST_CHECKPOINT, LAST_CHECKPOINT, TrainingDiverged, load_network, train
from kernel.Verification import INJECTIONS, LEVELS, run_verification

logger = logging.getLogger('DepthForge')

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

INPUT_ERRORS = (ConfigError, SettingsError, SampleFormatError, CheckpointError, SceneConfigError,
                ArchitectureError, InputTooSmallError, ShapeError, EvalKit.UnknownProtocolError,
                EvalKit.EmptyEvaluationSetError, EvalKit.MetricDomainError, UnknownVariantError, OSError)


class UsageError(Exception):
    pass


def parse_size(text):
    try:
        width, height = (int(v) for v in text.lower().split('x'))
    except ValueError:
        raise argparse.ArgumentTypeError('size must look like WxH, got {!r}'.format(text))
    return width, height


def _sample_folders(path):
    if not os.path.isdir(path):
        return []
    return sorted(os.path.join(path, name) for name in os.listdir(path)
                  if SAMPLE_DIR.match(name) and os.path.isdir(os.path.join(path, name)))


def _image_files(path):
    """(name, left image path) for every input image: sample folders first, plain PNG files otherwise."""
    folders = _sample_folders(path)
    if folders:
        return [(os.path.basename(f), os.path.join(f, SAMPLE_FILES['left'])) for f in folders]
    files = sorted(glob.glob(os.path.join(path, '*.png')))
    return [(os.path.splitext(os.path.basename(f))[0], f) for f in files]


def _depth_files(path):
    folders = _sample_folders(path)
    if folders:
        return [os.path.join(f, SAMPLE_FILES['depth_left']) for f in folders]
    files = sorted(glob.glob(os.path.join(path, '*_depth.png')))
    return files or sorted(glob.glob(os.path.join(path, '*.png')))


def cmd_gen(args):
    width, height = args.size
    if not 0 < args.gt_density <= 1:
        raise UsageError('--gt-density must lie in (0, 1], got {}'.format(args.gt_density))
    if args.scenes < 1:
        raise UsageError('--scenes must be >= 1')
    scene = SceneConfig(width=width, height=height, gt_density=args.gt_density)
    folders = materialize(SyntheticDataset(scene, args.scenes, args.seed, 'train'), args.out)
    RunManifest('gen', config=record_snapshot(scene), seed=args.seed,
                outputs=[os.path.basename(f) for f in folders]).write(args.out)
    print('--> {} scenes written to {}'.format(len(folders), args.out))
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    try:
        result = train(SampleDirectory(args.data), SampleDirectory(args.val), cfg.net, cfg.train, out_dir=args.out,
                       resume=args.resume, threads=settings.threads, deterministic=settings.deterministic,
                       dtype=settings.dtype)
    except TrainingDiverged as e:
        print('--> training diverged at iteration {}'.format(e.iteration))
        if e.breakdown is not None:
            print(e.breakdown)
        logger.error('%s', e)
        return EXIT_DIVERGED

    RunManifest('train', config=cfg.snapshot(), seed=cfg.train.seed, inputs=[args.data, args.val, args.config],
                outputs=[BEST_CHECKPOINT, LAST_CHECKPOINT, 'train_log.csv'],
                extra={'stop_reason': result.stop_reason, 't': result.state.t,
                       'best_val': result.state.best_val}).write(args.out)
    print('--> training stopped ({}) after {} epochs, t={}, best validation loss {:.6g}'.format(
        result.stop_reason, result.state.epoch, result.state.t, result.state.best_val))
    return EXIT_OK


def cmd_predict(args):
    net, ckpt = load_network(args.checkpoint, settings.dtype)
    images = _image_files(args.images)
    if not images:
        raise UsageError('no input images under {}'.format(args.images))
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for name, path in images:
        image = read_image(path)
        rho = resize_bilinear(predict(net, image)[None], *image.shape[1:])[0][0, 0]
        depth = 1.0 / np.maximum(rho, args.rho_min)
        write_pfm(os.path.join(args.out, name + '_rho.pfm'), rho)
        write_depth_png(os.path.join(args.out, name + '_depth.png'), depth)
        outputs += [name + '_rho.pfm', name + '_depth.png']
        logger.debug('%s: depth %.3f..%.3f m', name, depth.min(), depth.max())
    RunManifest('predict', config=record_snapshot(ckpt.net_cfg), seed=ckpt.seed,
                inputs=[args.checkpoint, args.images], outputs=outputs).write(args.out)
    print('--> {} predictions written to {}'.format(len(images), args.out))
    return EXIT_OK


def cmd_eval(args):
    protocol = EvalKit.get_protocol(args.protocol)
    if args.no_crop:
        protocol = protocol.with_crop(None)
    preds, gts = _depth_files(args.pred), _depth_files(args.gt)
    if len(preds) != len(gts):
        raise UsageError('{} predictions for {} ground-truth maps'.format(len(preds), len(gts)))
    if not preds:
        raise UsageError('no depth maps under {}'.format(args.pred))
    metrics = EvalKit.evaluate_dataset([read_depth_png(p).depth[None, None] for p in preds],
                                       [read_depth_png(g) for g in gts], protocol)
    sys.stdout.write(metrics.csv_row(with_log10=args.log10, header=True))
    return EXIT_OK


def cmd_verify(args):
    report = run_verification(args.level, inject=args.inject)
    if report.passed:
        print('--> all {} checks passed'.format(args.level))
        return EXIT_OK
    for name in report.failures:
        print('--> FAILED: {}'.format(name))
    return EXIT_VERIFY


def cmd_ablate(args):
    cfg = load_config(args.config)
    results = run_ablation(cfg, args.variants, seeds=args.seeds, out_dir=args.out, threads=settings.threads,
                           deterministic=settings.deterministic, dtype=settings.dtype)
    print('variant,' + ','.join(EvalKit.METRIC_COLUMNS + ['log10']))
    for r in results:
        print(r.variant.name + ',' + ','.join('{:.6f}'.format(v) for v in r.metrics.row(with_log10=True)))
    for trend in check_trends(results):
        state = 'ok' if trend.passed else 'OFF'
        print('--> {} {}: {} / {} rmse {:.3f}'.format(state, trend.description, trend.variant, trend.reference,
                                                      trend.ratio))
    if args.out:
        RunManifest('ablate', config=cfg.snapshot(), seed=cfg.train.seed, inputs=[args.config],
                    outputs=['ablation.csv'], extra={'seeds': args.seeds}).write(args.out)
    return EXIT_OK


COMMANDS = {'gen': cmd_gen,
            'train': cmd_train,
            'predict': cmd_predict,
            'eval': cmd_eval,
            'verify': cmd_verify,
            'ablate': cmd_ablate}


def build_parser():
    parser = argparse.ArgumentParser(prog='DepthForge.py', description=__doc__.splitlines()[0])
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    parser.add_argument('--threads', type=int, default=None, help='worker threads (overrides DEPTHFORGE_THREADS)')
    mode = parser.add_mutually_exclusive_group()
    mode.add_argument('--deterministic', dest='deterministic', action='store_true', default=None,
                      help='double precision, ordered batch loading')
    mode.add_argument('--fast', dest='deterministic', action='store_false',
                      help='single precision, batches loaded as workers finish')
    noise = parser.add_mutually_exclusive_group()
    noise.add_argument('-v', '--verbose', action='store_true')
    noise.add_argument('-q', '--quiet', action='store_true')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('gen', help='materialize synthetic stereo scenes')
    p.add_argument('--out', required=True)
    p.add_argument('--scenes', type=int, default=16)
    p.add_argument('--size', type=parse_size, default=(64, 32), help='WxH')
    p.add_argument('--gt-density', type=float, default=0.3)
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('train', help='train a network on sample folders')
    p.add_argument('--data', required=True)
    p.add_argument('--val', required=True)
    p.add_argument('--config', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--resume', default=None, help='checkpoint to continue from')

    p = sub.add_parser('predict', help='predict inverse depth for a folder of images')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--images', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--rho-min', type=float, default=1e-4)

    p = sub.add_parser('eval', help='score depth maps against ground truth')
    p.add_argument('--pred', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--protocol', default='eigen80')
    p.add_argument('--no-crop', action='store_true')
    p.add_argument('--log10', action='store_true', help='append the log10 error column')

    p = sub.add_parser('verify', help='run the oracle suites')
    p.add_argument('--level', choices=LEVELS, default='quick')
    p.add_argument('--inject', choices=list(INJECTIONS), default=None)

    p = sub.add_parser('ablate', help='train and score the ablation variants')
    p.add_argument('--config', required=True)
    p.add_argument('--out', default=None)
    p.add_argument('--seeds', type=int, default=3)
    p.add_argument('--variants', nargs='*', default=None, metavar='NAME', help=', '.join(VARIANTS))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else settings.logLevel
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s', stream=sys.stderr)

    try:
        precision = None if args.deterministic is None else 'double' if args.deterministic else 'single'
        settings.override(threads=args.threads, deterministic=args.deterministic, precision=precision)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print('{}: error: {}'.format(args.command, e), file=sys.stderr)
        return EXIT_USAGE
    except INPUT_ERRORS as e:
        print('{}: error: {}'.format(args.command, e), file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
