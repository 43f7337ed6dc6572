"""Depth error metrics and the evaluation protocols (depth caps, crop, clamping)."""
import csv
import io
import logging
import math
from collections import namedtuple
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from kernel import Tensor

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['rmse', 'rmse_log', 'ard', 'srd', 'acc1', 'acc2', 'acc3']
ACCURACY_BASE = 1.25
EIGEN_CROP = (0.40810811, 0.99189189, 0.03594771, 0.96405229)


class EmptyEvaluationSetError(ValueError):
    pass


class MetricDomainError(ValueError):
    pass


class UnknownProtocolError(KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return 'unknown protocol {!r}; choose one of {}'.format(self.name, ', '.join(sorted(PROTOCOLS)))


@dataclass(frozen=True)
class Protocol:
    """GT depth window, optional prediction clamp and fractional crop (top, bottom, left, right)."""
    name: str
    gt_min: float
    gt_max: float
    pred_clamp: Optional[Tuple[float, float]] = None
    crop: Optional[Tuple[float, float, float, float]] = None

    def __post_init__(self):
        if not self.gt_min < self.gt_max:
            raise ValueError('{}: gt_min must be below gt_max'.format(self.name))
        if self.pred_clamp is not None and not self.pred_clamp[0] <= self.pred_clamp[1]:
            raise ValueError('{}: clamp bounds must be ordered'.format(self.name))
        if self.crop is not None:
            top, bottom, left, right = self.crop
            if not (0 <= top < bottom <= 1 and 0 <= left < right <= 1):
                raise ValueError('{}: crop must be a fractional rectangle'.format(self.name))

    def with_crop(self, crop):
        return Protocol(self.name, self.gt_min, self.gt_max, self.pred_clamp, crop)

    def crop_mask(self, height, width):
        mask = np.zeros((height, width), dtype=bool)
        if self.crop is None:
            mask[:] = True
            return mask
        top, bottom, left, right = self.crop
        mask[int(top * height):int(bottom * height), int(left * width):int(right * width)] = True
        return mask


PROTOCOLS = {
    'eigen80': Protocol('eigen80', 1e-3, 80.0, (1e-3, 80.0), EIGEN_CROP),
    'garg50': Protocol('garg50', 1.0, 50.0, (1.0, 50.0), EIGEN_CROP),
    'ablation': Protocol('ablation', 5.0, math.inf),
}


def get_protocol(name):
    try:
        return PROTOCOLS[name]
    except KeyError:
        raise UnknownProtocolError(name)


Pairs = namedtuple('Pairs', 'pred, gt')


def as_image(values, what='map'):
    """View of one H x W map; leading axes must all have length 1."""
    values = np.asarray(values)
    if values.ndim < 2 or int(np.prod(values.shape[:-2])) != 1:
        raise Tensor.ShapeError('{} must hold a single H x W map, got shape {}'.format(what, values.shape))
    return values.reshape(values.shape[-2:])


def apply_protocol(pred_depth, gt, protocol):
    """Surviving (prediction, ground truth) value pairs of one image."""
    pred_depth = as_image(np.asarray(pred_depth, dtype=np.float64), 'prediction')
    depth = as_image(np.asarray(gt.depth, dtype=np.float64), 'ground truth')
    valid = as_image(np.asarray(gt.valid, dtype=bool), 'validity mask')
    if pred_depth.shape != depth.shape:
        raise Tensor.ShapeError('prediction {} and ground truth {} sizes differ'.format(pred_depth.shape, depth.shape))

    keep = valid & (depth >= protocol.gt_min) & (depth <= protocol.gt_max)
    keep &= protocol.crop_mask(*depth.shape[-2:])
    if not keep.any():
        raise EmptyEvaluationSetError('no ground-truth pixel survives the {} protocol'.format(protocol.name))
    pred = pred_depth[keep]
    if protocol.pred_clamp is not None:
        pred = np.clip(pred, *protocol.pred_clamp)
    return Pairs(pred, depth[keep])


@dataclass
class Metrics:
    rmse: float
    rmse_log: float
    ard: float
    srd: float
    acc1: float
    acc2: float
    acc3: float
    count: int
    log10: float = float('nan')

    def row(self, with_log10=False):
        values = [getattr(self, c) for c in METRIC_COLUMNS]
        return values + [self.log10] if with_log10 else values

    def csv_row(self, with_log10=False, header=False):
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        if header:
            writer.writerow(METRIC_COLUMNS + (['log10'] if with_log10 else []))
        writer.writerow(['{:.6f}'.format(v) for v in self.row(with_log10)])
        return out.getvalue()


def compute_metrics(pairs):
    pred, gt = (np.asarray(a, dtype=np.float64).ravel() for a in pairs)
    if pred.size == 0:
        raise EmptyEvaluationSetError('compute_metrics needs at least one pair')
    if pred.shape != gt.shape:
        raise Tensor.ShapeError('prediction and ground-truth lists differ in length')
    if np.any(pred <= 0) or np.any(gt <= 0) or not np.all(np.isfinite(pred)) or not np.all(np.isfinite(gt)):
        raise MetricDomainError('metrics need finite positive depths')

    diff = pred - gt
    ratio = np.maximum(pred / gt, gt / pred)
    return Metrics(
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        ard=float(np.mean(np.abs(diff) / gt)),
        srd=float(np.mean(diff ** 2 / gt)),
        acc1=float(np.mean(ratio < ACCURACY_BASE)),
        acc2=float(np.mean(ratio < ACCURACY_BASE ** 2)),
        acc3=float(np.mean(ratio < ACCURACY_BASE ** 3)),
        count=int(pred.size),
        log10=float(np.mean(np.abs(np.log10(pred) - np.log10(gt)))))


def upsample_to(pred_depth, height, width):
    """Bilinear resize of a prediction to the ground-truth resolution."""
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    if pred_depth.shape[-2:] == (height, width):
        return pred_depth
    return Tensor.resize_bilinear(pred_depth, height, width)[0]


def evaluate_dataset(predictions, ground_truths, protocol):
    """Metrics over every surviving pixel of a test set, pooled across images."""
    predictions, ground_truths = list(predictions), list(ground_truths)
    if len(predictions) != len(ground_truths):
        raise EmptyEvaluationSetError('{} predictions for {} ground-truth maps'.format(
            len(predictions), len(ground_truths)))
    if not predictions:
        raise EmptyEvaluationSetError('empty evaluation set')

    preds, gts = [], []
    for pred, gt in zip(predictions, ground_truths):
        pairs = apply_protocol(upsample_to(pred, *as_image(gt.depth, 'ground truth').shape), gt, protocol)
        preds.append(pairs.pred)
        gts.append(pairs.gt)
    metrics = compute_metrics(Pairs(np.concatenate(preds), np.concatenate(gts)))
    logger.debug('%s: %d images, %d pixels, rmse %.4f', protocol.name, len(predictions), metrics.count, metrics.rmse)
    return metrics


def mean_metrics(runs):
    """Column-wise mean of several Metrics (e.g. over seeds)."""
    runs = list(runs)
    fields = METRIC_COLUMNS + ['log10']
    means = {f: float(np.mean([getattr(m, f) for m in runs])) for f in fields}
    return Metrics(count=int(sum(m.count for m in runs)), **means)


if __name__ == "__main__":
    pass
