"""Semi-supervised loss: supervised berHu, direct alignment, anisotropic smoothness.

The total is ``lambda_t * L_S + gamma * L_U + reg_weight * L_R`` with the
supervised term faded in as ``beta * exp(-10 / t)``. Every term accepts
tape nodes (differentiable) or plain arrays (plain float result).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from kernel import Autodiff, StereoGeometry
from kernel.Autodiff import Node, Tape
from kernel.DataFactory import DepthMap, as_batch

logger = logging.getLogger(__name__)

DELTA_FLOOR = 1e-6
DELTA_COEFF = 0.2


class EmptyPixelSetError(ValueError):
    pass


class LossDomainError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    beta: float
    gamma: float
    t: int
    reg_weight: float = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0 or self.reg_weight < 0:
            raise LossDomainError('loss weights must be >= 0')
        if self.t < 1:
            raise LossDomainError('iteration t must be >= 1, got {}'.format(self.t))


@dataclass(frozen=True)
class LossOptions:
    sigma: float = 1.0
    eta: float = 1.0 / 255.0
    unsup_excludes_gt: bool = False
    normalize_terms: bool = True
    supervised_norm: str = 'berhu'
    rho_min: float = 1e-4
    left_sign: int = 1

    @classmethod
    def from_train_config(cls, cfg):
        return cls(sigma=cfg.sigma, eta=cfg.eta, unsup_excludes_gt=cfg.unsup_excludes_gt,
                   normalize_terms=cfg.normalize_terms, supervised_norm=cfg.supervised_norm,
                   rho_min=cfg.rho_min)


@dataclass
class LossBreakdown:
    supervised: float
    unsupervised: float
    regularizer: float
    lambda_t: float
    gamma: float
    reg_weight: float
    delta: float
    total: float
    graph: Optional[Node] = field(default=None, repr=False, compare=False)

    def as_dict(self):
        return {'L_S': self.supervised, 'L_U': self.unsupervised, 'L_R': self.regularizer,
                'lambda_t': self.lambda_t, 'total': self.total}

    def __str__(self):
        return 'L_S={:.6g} L_U={:.6g} L_R={:.6g} lambda_t={:.6g} gamma={:.6g} delta={:.6g} total={:.6g}'.format(
            self.supervised, self.unsupervised, self.regularizer, self.lambda_t, self.gamma, self.delta, self.total)


def berhu(d, delta):
    """Reverse Huber: |d| up to delta, (d^2 + delta^2) / (2 delta) beyond."""
    if delta <= 0:
        raise LossDomainError('berHu threshold must be > 0, got {}'.format(delta))
    d = np.asarray(d, dtype=np.float64)
    a = np.abs(d)
    out = np.where(a <= delta, a, (d * d + delta * delta) / (2.0 * delta))
    return float(out) if out.ndim == 0 else out


def berhu_slope(d, delta):
    # |d| == delta takes the linear branch; both branches agree there
    d = np.asarray(d, dtype=np.float64)
    return np.where(np.abs(d) <= delta, np.sign(d), d / delta)


def _berhu_node(d, delta):
    return Autodiff.apply('berhu', lambda x: berhu(x, delta), lambda g, x, out: (g * berhu_slope(x, delta),), d)


def lambda_schedule(t, beta):
    if t < 1:
        raise LossDomainError('lambda_schedule needs t >= 1, got {}'.format(t))
    return beta * math.exp(-10.0 / t)


def adaptive_delta(pred_depth, gt):
    """0.2 times the largest absolute depth residual over the ground-truth pixels, floored at 1e-6.

    ``pred_depth`` and ``gt`` may be single maps or sequences of maps whose
    residuals are pooled (both views of a batch).
    """
    if isinstance(gt, DepthMap):
        preds, gts = [pred_depth], [gt]
    else:
        preds, gts = list(pred_depth), list(gt)
    residuals = [np.abs(np.asarray(p)[g.valid] - g.depth[g.valid]) for p, g in zip(preds, gts)]
    residuals = np.concatenate([r.ravel() for r in residuals]) if residuals else np.empty(0)
    if residuals.size == 0:
        raise EmptyPixelSetError('adaptive_delta needs at least one ground-truth pixel')
    return max(DELTA_COEFF * float(residuals.max()), DELTA_FLOOR)


def _lift(*items):
    """Return (tape, nodes, detached): arrays become constants on a fresh tape when no node is given."""
    for item in items:
        if isinstance(item, Node):
            return item.tape, items, False
    tape = Tape(np.float64)
    return tape, tuple(tape.constant(x) if x is not None else None for x in items), True


def _finish(node, detached):
    return float(node.value) if detached else node


def _pred_depth(rho, rho_min):
    return 1.0 / Autodiff.clamp_min(rho, rho_min)


def supervised_loss(rho_l, rho_r, Z_l, Z_r, delta=None, norm='berhu', rho_min=1e-4, normalize=True):
    """Sum (or mean) of berHu(1/rho - Z) over the ground-truth pixels of both views.

    Returns (loss, delta). ``delta`` defaults to the adaptive threshold and is
    never differentiated.
    """
    count = int(Z_l.valid.sum() + Z_r.valid.sum())
    if count == 0:
        raise EmptyPixelSetError('supervised loss needs ground truth in at least one view')
    tape, (rho_l, rho_r), detached = _lift(rho_l, rho_r)

    depth_l, depth_r = _pred_depth(rho_l, rho_min), _pred_depth(rho_r, rho_min)
    if delta is None:
        delta = adaptive_delta([depth_l.value, depth_r.value], [Z_l, Z_r])

    terms = []
    for depth, gt in ((depth_l, Z_l), (depth_r, Z_r)):
        mask = gt.valid.astype(np.float64)
        residual = (depth - gt.depth) * mask
        penalty = Autodiff.square(residual) if norm == 'l2' else _berhu_node(residual, delta)
        terms.append(Autodiff.total(penalty))
    loss = terms[0] + terms[1]
    if normalize:
        loss = loss * (1.0 / count)
    return _finish(loss, detached), delta


def _smoothed(image, sigma):
    image = np.asarray(image, dtype=np.float64)
    return StereoGeometry.gaussian_smooth(image, sigma) if sigma > 0 else image


def alignment_residuals(I_l, I_r, rho_l, rho_r, calib, sigma=1.0, left_sign=1):
    """Per-pixel |G*I_view - warped G*I_other| and validity for both views (arrays or nodes)."""
    S_l, S_r = _smoothed(I_l, sigma), _smoothed(I_r, sigma)
    out = []
    for target, source, rho, sign in ((S_l, S_r, rho_l, left_sign), (S_r, S_l, rho_r, -left_sign)):
        rec, valid = StereoGeometry.reconstruct_view(source, rho, calib, sign)
        residual = Autodiff.absolute(target - rec) if isinstance(rec, Node) else np.abs(target - rec)
        out.append((residual, valid))
    return out


def unsupervised_loss(I_l, I_r, rho_l, rho_r, calib, sigma=1.0, exclude_l=None, exclude_r=None,
                      normalize=True, left_sign=1):
    """Direct image alignment error in both directions over the valid warped pixels."""
    tape, (rho_l, rho_r), detached = _lift(rho_l, rho_r)
    n, c, h, w = np.shape(I_l)
    terms = []
    for (residual, valid), exclude in zip(alignment_residuals(I_l, I_r, rho_l, rho_r, calib, sigma, left_sign),
                                          (exclude_l, exclude_r)):
        keep = valid if exclude is None else valid & ~np.reshape(exclude, valid.shape)
        terms.append(Autodiff.total(residual * keep[:, None, :, :].astype(np.float64)))
    loss = terms[0] + terms[1]
    if normalize:
        loss = loss * (1.0 / (n * c * h * w))
    return _finish(loss, detached)


def _edge_weights(image, eta, axis):
    # intensities stored in [0, 1]; eta is expressed for 0..255 units
    scaled = 255.0 * np.asarray(image, dtype=np.float64).mean(axis=1, keepdims=True)
    grad = np.zeros_like(scaled)
    head = [slice(None)] * 4
    tail = [slice(None)] * 4
    head[axis], tail[axis] = slice(1, None), slice(None, -1)
    grad[tuple(tail)] = scaled[tuple(head)] - scaled[tuple(tail)]
    return np.exp(-eta * np.abs(grad))


def regularization_loss(I_l, I_r, rho_l, rho_r, eta=1.0 / 255.0, normalize=True):
    """Sum over both views of |phi(grad I)^T grad rho| with phi(g) = exp(-eta |g|)."""
    tape, (rho_l, rho_r), detached = _lift(rho_l, rho_r)
    n, _, h, w = rho_l.shape
    terms = []
    for image, rho in ((I_l, rho_l), (I_r, rho_r)):
        wx, wy = _edge_weights(image, eta, 3), _edge_weights(image, eta, 2)
        dx, dy = Autodiff.forward_diff(rho, axis=3), Autodiff.forward_diff(rho, axis=2)
        terms.append(Autodiff.total(Autodiff.absolute(dx * wx + dy * wy)))
    loss = terms[0] + terms[1]
    if normalize:
        loss = loss * (1.0 / (n * h * w))
    return _finish(loss, detached)


def total_loss(sample, rho_l, rho_r, weights, options=LossOptions(), delta=None):
    """Weighted semi-supervised total as a LossBreakdown; ``graph`` holds the tape node when rho is a node."""
    batch = as_batch(sample)
    tape, (rho_l, rho_r), detached = _lift(rho_l, rho_r)
    for name, rho in (('rho_l', rho_l), ('rho_r', rho_r)):
        if rho.shape != batch.I_l.shape[:1] + (1,) + batch.I_l.shape[2:]:
            raise ValueError('{} shape {} does not match images {}'.format(name, rho.shape, batch.I_l.shape))

    lambda_t = lambda_schedule(weights.t, weights.beta)
    has_gt = bool(batch.Z_l.valid.any() or batch.Z_r.valid.any())
    if has_gt:
        supervised, delta = supervised_loss(rho_l, rho_r, batch.Z_l, batch.Z_r, delta=delta,
                                            norm=options.supervised_norm, rho_min=options.rho_min,
                                            normalize=options.normalize_terms)
    elif lambda_t > 0:
        raise EmptyPixelSetError('supervised term is weighted but the batch has no ground truth')
    else:
        supervised, delta = tape.constant(0.0), float('nan') if delta is None else delta

    exclude_l = batch.Z_l.valid if options.unsup_excludes_gt else None
    exclude_r = batch.Z_r.valid if options.unsup_excludes_gt else None
    unsupervised = unsupervised_loss(batch.I_l, batch.I_r, rho_l, rho_r, batch.calib, options.sigma,
                                     exclude_l, exclude_r, options.normalize_terms, options.left_sign)
    regularizer = regularization_loss(batch.I_l, batch.I_r, rho_l, rho_r, options.eta, options.normalize_terms)

    graph = supervised * lambda_t + unsupervised * weights.gamma + regularizer * weights.reg_weight
    s, u, r = (float(x.value) for x in (supervised, unsupervised, regularizer))
    return LossBreakdown(supervised=s, unsupervised=u, regularizer=r, lambda_t=lambda_t, gamma=weights.gamma,
                         reg_weight=weights.reg_weight, delta=delta, total=float(graph.value),
                         graph=None if detached else graph)


if __name__ == "__main__":
    pass
