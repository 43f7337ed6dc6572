"""SGD-with-momentum training under the semi-supervised loss.

Each step pushes the left and right images of a mini-batch through the
same network as one batch, upsamples the half-resolution inverse depth to
image size, evaluates the loss, back-propagates and updates the weights.
After every epoch the validation loss (eval mode, lambda frozen at the
current iteration) decides which parameters are kept and when to stop.
"""
import collections
import csv
import logging
import math
import os
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional

import numpy as np
from dateutil.relativedelta import relativedelta
from dateutil.tz import tzlocal

from kernel import Autodiff, Loss, Tensor
from kernel.DataFactory import augment, derive_seed, stack_samples
from kernel.Loss import LossOptions, LossWeights
from kernel.Network import Network, init_params
from kernel.Storage import Checkpoint, load_checkpoint, save_checkpoint
from kernel.Tensor import NonFiniteError

logger = logging.getLogger(__name__)

LOG_COLUMNS = ['epoch', 't', 'lambda_t', 'L_S', 'L_U', 'L_R', 'total', 'val_total', 'lr']
VALIDATION_NOTE = '# val_total: full loss in eval mode with lambda_t frozen at the epoch-end iteration'
BEST_CHECKPOINT = 'best.ckpt'
LAST_CHECKPOINT = 'last.ckpt'


class TrainingDiverged(ArithmeticError):
    def __init__(self, iteration, breakdown=None, reason='non-finite loss'):
        super().__init__('training diverged at iteration {}: {}{}'.format(
            iteration, reason, '' if breakdown is None else ' ({})'.format(breakdown)))
        self.iteration = iteration
        self.breakdown = breakdown


class ParameterKeyError(KeyError):
    pass


@dataclass
class TrainState:
    t: int = 0
    velocities: collections.OrderedDict = field(default_factory=collections.OrderedDict)
    best_val: float = math.inf
    epochs_since_improvement: int = 0
    epoch: int = 0
    rng: Optional[np.random.Generator] = None


@dataclass
class TrainResult:
    net: Network
    state: TrainState
    log: list
    stop_reason: str
    best_checkpoint: Optional[str] = None


def decay_gradient(grad, param, weight_decay):
    return grad + weight_decay * param


def sgd_step(params, grads, state, cfg, decayed=None):
    """v <- m v + (g + w_d theta); theta <- theta - lr v; t <- t + 1. Updates ``params`` in place."""
    if set(params) != set(grads):
        diff = sorted(set(params) ^ set(grads))
        raise ParameterKeyError('gradient keys do not match parameters: {}'.format(diff[:5]))
    decayed = decayed or (lambda name: name.endswith('.weight'))
    for name, theta in params.items():
        g = grads[name]
        if decayed(name):
            g = decay_gradient(g, theta, cfg.weight_decay)
        v = cfg.momentum * state.velocities.get(name, 0.0) + g
        state.velocities[name] = v
        params[name] = theta - cfg.lr * v
    state.t += 1
    return params, state


def _load_batch(dataset, indices, cfg, epoch, train):
    samples = []
    for i in indices:
        sample = dataset[int(i)]
        if train and cfg.augment:
            sample = augment(sample, derive_seed(cfg.seed, epoch, int(i)), cfg.alpha_range, cfg.gamma_range)
        samples.append(sample)
    return stack_samples(samples)


def iterate_batches(dataset, batches, cfg, epoch, train=True, threads=1, deterministic=True):
    """Yield stacked batches; loading runs ahead on a bounded thread pool."""
    if threads <= 1:
        for indices in batches:
            yield _load_batch(dataset, indices, cfg, epoch, train)
        return

    window = 2 * threads
    pending = collections.deque()
    todo = iter(batches)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for indices in todo:
            pending.append(pool.submit(_load_batch, dataset, indices, cfg, epoch, train))
            if len(pending) >= window:
                break
        while pending:
            if deterministic:
                future = pending.popleft()
            else:
                done, _ = wait(pending, return_when=FIRST_COMPLETED)
                future = next(iter(done))
                pending.remove(future)
            yield future.result()
            for indices in todo:
                pending.append(pool.submit(_load_batch, dataset, indices, cfg, epoch, train))
                break


def make_batches(count, batch_size, order=None):
    order = np.arange(count) if order is None else order
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def predict_pair(net, batch, mode, tape=None, rng=None):
    """Inverse depth at image resolution for both views of a batch (one shared forward pass)."""
    n, _, h, w = batch.I_l.shape
    images = np.concatenate([batch.I_l, batch.I_r], axis=0)
    rho = net.forward(images, mode=mode, tape=tape, rng=rng)
    if tape is None:
        rho = Tensor.resize_bilinear(rho, h, w)[0]
    else:
        rho = Autodiff.resize_bilinear(rho, h, w)
    return rho[:n], rho[n:]


def step_loss(net, batch, cfg, t, mode='train', tape=None, rng=None, delta=None):
    weights = LossWeights(beta=cfg.beta, gamma=cfg.gamma, t=t, reg_weight=cfg.reg_weight)
    rho_l, rho_r = predict_pair(net, batch, mode, tape=tape, rng=rng)
    return Loss.total_loss(batch, rho_l, rho_r, weights, LossOptions.from_train_config(cfg), delta=delta)


def validation_loss(net, dataset, cfg, t, threads=1, deterministic=True):
    """Mean full loss over ``dataset`` in eval mode with lambda at iteration ``t``."""
    total, count = 0.0, 0
    batches = make_batches(len(dataset), cfg.batch_size)
    for batch in iterate_batches(dataset, batches, cfg, 0, train=False, threads=threads, deterministic=deterministic):
        breakdown = step_loss(net, batch, cfg, max(t, 1), mode='eval')
        total += breakdown.total * len(batch)
        count += len(batch)
    return total / count


class EpochLog:
    """Append-only per-epoch CSV log."""

    def __init__(self, path):
        self.path = path
        self.rows = []
        if path is not None:
            fresh = not os.path.exists(path) or os.path.getsize(path) == 0
            if fresh:
                with open(path, 'a', newline='') as f:
                    f.write(VALIDATION_NOTE + '\n')
                    csv.writer(f).writerow(LOG_COLUMNS)

    def append(self, row):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, 'a', newline='') as f:
                csv.writer(f).writerow([_format_cell(row[c]) for c in LOG_COLUMNS])


def _format_cell(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def read_log(path):
    with open(path, newline='') as f:
        lines = [line for line in f if not line.startswith('#')]
    return [{k: (int(v) if k in ('epoch', 't') else float(v)) for k, v in row.items()}
            for row in csv.DictReader(lines)]


def _checkpoint(net, state, cfg):
    return Checkpoint(net_cfg=net.cfg, params=net.params, bn_states=net.bn_states, seed=cfg.seed, t=state.t,
                      velocities=state.velocities, rng_state=state.rng.bit_generator.state,
                      extra={'epoch': state.epoch, 'best_val': state.best_val,
                             'epochs_since_improvement': state.epochs_since_improvement})


def resume_state(net, path):
    """Restore parameters, BN statistics, velocities, t and RNG from a checkpoint."""
    ckpt = load_checkpoint(path)
    net.load_state(ckpt.params, ckpt.bn_states)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    state = TrainState(t=ckpt.t, velocities=collections.OrderedDict(ckpt.velocities),
                       best_val=ckpt.extra.get('best_val', math.inf),
                       epochs_since_improvement=ckpt.extra.get('epochs_since_improvement', 0),
                       epoch=ckpt.extra.get('epoch', 0), rng=rng)
    saved = datetime.fromtimestamp(os.path.getmtime(path), tzlocal())
    age = relativedelta(datetime.now(tzlocal()), saved)
    logger.info('resuming from %s at t=%d epoch=%d (checkpoint is %dd %dh %dm old)',
                path, state.t, state.epoch, age.days, age.hours, age.minutes)
    return state


def resumed_best(resume, state, current):
    """Best-epoch parameters of a resumed run, read from the best checkpoint next to ``resume``."""
    path = os.path.join(os.path.dirname(os.path.abspath(resume)), BEST_CHECKPOINT)
    if not math.isfinite(state.best_val):
        return current
    if not os.path.isfile(path):
        logger.warning('no %s next to %s; the resumed parameters stand in for the best epoch', BEST_CHECKPOINT, resume)
        return current
    ckpt = load_checkpoint(path)
    if ckpt.extra.get('best_val') != state.best_val:
        logger.warning('%s records validation loss %s, the resumed run %s; ignoring it', path,
                       ckpt.extra.get('best_val'), state.best_val)
        return current
    return ckpt.params, ckpt.bn_states


def train(dataset, val_dataset, net_cfg, train_cfg, out_dir=None, resume=None, threads=1, deterministic=True,
          dtype=np.float64):
    """Train until early stopping or ``max_epochs``; the returned net holds the best validation parameters."""
    if len(dataset) == 0 or len(val_dataset) == 0:
        raise ValueError('training and validation sets must be nonempty')
    cfg = train_cfg
    net = Network(net_cfg, dtype)
    init_params(net, cfg.seed)
    if resume:
        state = resume_state(net, resume)
    else:
        state = TrainState(rng=np.random.default_rng(cfg.seed))

    log = EpochLog(os.path.join(out_dir, 'train_log.csv') if out_dir else None)
    best_path = os.path.join(out_dir, BEST_CHECKPOINT) if out_dir else None
    best = net.state_copy()
    if resume:
        best = resumed_best(resume, state, best)
    stop_reason = 'max_epochs'

    while state.epoch < cfg.max_epochs:
        epoch = state.epoch + 1
        order = state.rng.permutation(len(dataset))
        sums = collections.Counter()
        steps = 0
        lambda_t = 0.0
        for batch in iterate_batches(dataset, make_batches(len(dataset), cfg.batch_size, order), cfg, epoch,
                                     threads=threads, deterministic=deterministic):
            tape = Autodiff.Tape(dtype)
            breakdown = None
            try:
                breakdown = step_loss(net, batch, cfg, state.t + 1, mode='train', tape=tape, rng=state.rng)
                if not math.isfinite(breakdown.total):
                    raise NonFiniteError('total loss')
                grads = Autodiff.backward(breakdown.graph)
            except NonFiniteError as e:
                raise TrainingDiverged(state.t + 1, breakdown, str(e))
            sgd_step(net.params, grads, state, cfg, decayed=net.decayed)
            lambda_t = breakdown.lambda_t
            sums.update({'L_S': breakdown.supervised, 'L_U': breakdown.unsupervised,
                         'L_R': breakdown.regularizer, 'total': breakdown.total})
            steps += 1
            logger.debug('t=%d %s', state.t, breakdown)

        state.epoch = epoch
        try:
            val_total = validation_loss(net, val_dataset, cfg, state.t, threads, deterministic)
        except NonFiniteError as e:
            raise TrainingDiverged(state.t, None, 'validation: {}'.format(e))
        row = {'epoch': epoch, 't': state.t, 'lambda_t': lambda_t, 'val_total': val_total, 'lr': cfg.lr}
        row.update({key: sums[key] / steps for key in ('L_S', 'L_U', 'L_R', 'total')})
        log.append(row)
        logger.info('epoch %d t=%d lambda_t=%.4g L_S=%.4g L_U=%.4g L_R=%.4g total=%.4g val=%.4g', epoch, state.t,
                    lambda_t, row['L_S'], row['L_U'], row['L_R'], row['total'], val_total)

        if val_total < state.best_val:
            state.best_val = val_total
            state.epochs_since_improvement = 0
            best = net.state_copy()
            if best_path:
                save_checkpoint(best_path, _checkpoint(net, state, cfg))
        else:
            state.epochs_since_improvement += 1
        if out_dir:
            save_checkpoint(os.path.join(out_dir, LAST_CHECKPOINT), _checkpoint(net, state, cfg))
        if state.epochs_since_improvement >= cfg.early_stop_patience:
            stop_reason = 'early_stop'
            logger.info('validation loss has not improved for %d epochs, stopping', state.epochs_since_improvement)
            break

    net.load_state(*best)
    return TrainResult(net=net, state=state, log=log.rows, stop_reason=stop_reason, best_checkpoint=best_path)


def load_network(path, dtype=np.float64):
    ckpt = load_checkpoint(path)
    net = Network(ckpt.net_cfg, dtype)
    net.load_state(ckpt.params, ckpt.bn_states)
    return net, ckpt


if __name__ == "__main__":
    pass
