"""Synthetic rectified stereo scenes with exact ground truth.

A scene is a stack of fronto-parallel textured rectangles over a far
background plane. Foreground layers sit at whole-pixel disparities and
carry a triangle-wave texture with kinks on whole columns; the background
texture is linear along image rows. Either way a bilinear lookup at the
true disparity reproduces the other view exactly wherever both taps see
the same layer, while a wrong disparity on a foreground layer does not.
"""
import logging
import math
from collections import namedtuple
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from kernel.StereoGeometry import Calib

logger = logging.getLogger(__name__)


class SceneConfigError(ValueError):
    pass


class DepthMap(namedtuple('DepthMap', 'depth, valid')):
    """Metric depth with its validity mask; invalid pixels hold 0."""
    __slots__ = ()

    @classmethod
    def dense(cls, depth):
        depth = np.asarray(depth, dtype=np.float64)
        return cls(depth, np.ones(depth.shape, dtype=bool))

    @property
    def count(self):
        return int(self.valid.sum())


@dataclass
class StereoSample:
    I_l: np.ndarray
    I_r: np.ndarray
    Z_l: DepthMap
    Z_r: DepthMap
    calib: Calib
    true_rho_l: Optional[np.ndarray] = None
    true_rho_r: Optional[np.ndarray] = None
    nonoccluded_l: Optional[np.ndarray] = None
    nonoccluded_r: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = self.I_l.shape[-2:]
        for name in ('I_r', 'Z_l', 'Z_r'):
            value = getattr(self, name)
            extent = value.depth.shape[-2:] if isinstance(value, DepthMap) else value.shape[-2:]
            if extent != shape:
                raise SceneConfigError('{} has size {} but I_l has {}'.format(name, extent, shape))
        for gt in (self.Z_l, self.Z_r):
            if np.any(gt.depth[gt.valid] <= 0):
                raise SceneConfigError('ground-truth depth must be > 0 at valid pixels')

    @property
    def size(self):
        """(height, width)."""
        return self.I_l.shape[-2:]


@dataclass
class StereoBatch:
    """Samples stacked along a leading batch axis: images N x C x H x W, maps N x 1 x H x W."""
    I_l: np.ndarray
    I_r: np.ndarray
    Z_l: DepthMap
    Z_r: DepthMap
    calib: Calib
    true_rho_l: Optional[np.ndarray] = None
    true_rho_r: Optional[np.ndarray] = None

    def __len__(self):
        return self.I_l.shape[0]


def _image_chw(image):
    image = np.asarray(image, dtype=np.float64)
    return image[None] if image.ndim == 2 else image


def _map_1hw(values):
    return np.asarray(values)[None] if np.ndim(values) == 2 else np.asarray(values)


def stack_samples(samples):
    samples = list(samples)
    if not samples:
        raise SceneConfigError('cannot batch an empty sample list')
    calib = samples[0].calib
    if any(s.calib != calib for s in samples):
        raise SceneConfigError('all samples of a batch must share one calibration')

    def stack(get):
        return np.stack([get(s) for s in samples])

    def stack_gt(get):
        return DepthMap(stack(lambda s: _map_1hw(get(s).depth)), stack(lambda s: _map_1hw(get(s).valid)))

    has_truth = all(s.true_rho_l is not None and s.true_rho_r is not None for s in samples)
    return StereoBatch(
        I_l=stack(lambda s: _image_chw(s.I_l)),
        I_r=stack(lambda s: _image_chw(s.I_r)),
        Z_l=stack_gt(lambda s: s.Z_l),
        Z_r=stack_gt(lambda s: s.Z_r),
        calib=calib,
        true_rho_l=stack(lambda s: _map_1hw(s.true_rho_l)) if has_truth else None,
        true_rho_r=stack(lambda s: _map_1hw(s.true_rho_r)) if has_truth else None)


def as_batch(sample):
    if isinstance(sample, StereoBatch):
        return sample
    if isinstance(sample, StereoSample):
        return stack_samples([sample])
    return stack_samples(sample)


def derive_seed(*keys):
    """Stable 63-bit seed from integer keys (run seed, epoch, index ...)."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def _triangle(s):
    frac = s - np.floor(s)
    return 1.0 - 2.0 * np.abs(2.0 * frac - 1.0)


Layer = namedtuple('Layer', 'x0, x1, y0, y1, depth, disparity, base, period, phase, slope_period, slope_phase, '
                            'stripe_half, stripe_offset')


def _foreground_disparities(cfg, rng, fb):
    """Whole-pixel disparities of the foreground layers, farthest first.

    Falls back to uniform depths with fractional disparities when no whole
    pixel shift lies inside the depth range.
    """
    lo, hi = cfg.depth_range
    count = cfg.num_layers - 1
    d_min, d_max = max(1, math.ceil(fb / hi)), math.floor(fb / lo)
    if d_min > d_max:
        logger.debug('no whole-pixel disparity within %s m at fb %.3f; using fractional shifts', cfg.depth_range, fb)
        depths = sorted(rng.uniform(lo, hi, size=count).tolist(), reverse=True)
        return [fb / depth for depth in depths], False
    return sorted(float(d) for d in rng.integers(d_min, d_max + 1, size=count)), True


def _draw_layers(cfg, rng, fb):
    hi = cfg.depth_range[1]
    w, h = cfg.width, cfg.height
    contrast = cfg.texture_contrast
    disparities, whole = _foreground_disparities(cfg, rng, fb)

    layers = []
    for k, disparity in enumerate([fb / hi] + disparities):
        if k == 0:
            x0, x1, y0, y1 = -math.inf, math.inf, 0, h
        else:
            rw = int(rng.integers(max(w // 4, 1), max(w // 2, 1) + 1))
            rh = int(rng.integers(max(h // 4, 1), max(3 * h // 4, 1) + 1))
            x0 = int(rng.integers(0, w - rw + 1))
            y0 = int(rng.integers(0, h - rh + 1))
            x1, y1 = x0 + rw, y0 + rh
        stripe_half = int(rng.integers(3, 6)) if k > 0 and whole else 0
        layers.append(Layer(
            x0, x1, y0, y1, hi if k == 0 else fb / disparity, disparity,
            base=float(rng.uniform(contrast, 1.0 - contrast)),
            period=float(rng.uniform(3.0, 9.0)), phase=float(rng.uniform()),
            slope_period=float(rng.uniform(4.0, 12.0)), slope_phase=float(rng.uniform()),
            stripe_half=stripe_half, stripe_offset=int(rng.integers(0, 2 * stripe_half)) if stripe_half else 0))
    return layers


def _texture(layer, u, rows, contrast, center, half_span):
    offset = 0.5 * contrast * _triangle(rows / layer.period + layer.phase)
    if layer.stripe_half:
        # kinks on whole columns only, so whole-pixel shifts are exact
        return layer.base + offset + 0.5 * contrast * _triangle((u - layer.stripe_offset) / (2.0 * layer.stripe_half))
    # linear in u along each row, so horizontal bilinear lookups are exact
    slope = 0.5 * contrast * _triangle(rows / layer.slope_period + layer.slope_phase) / half_span
    return layer.base + offset + slope * (u - center)


def _render(layers, cfg, right):
    """Layer index, intensity and depth per pixel of one view."""
    h, w = cfg.height, cfg.width
    cols = np.broadcast_to(np.arange(w, dtype=np.float64), (h, w))
    rows = np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w))
    max_disp = max(layer.disparity for layer in layers)
    half_span = 0.5 * (w + 2.0 * math.ceil(max_disp) + 2.0)

    index = np.zeros((h, w), dtype=np.intp)
    image = np.zeros((h, w))
    depth = np.zeros((h, w))
    # nearer layers come later and overwrite farther ones
    for k, layer in enumerate(layers):
        u = cols + layer.disparity if right else cols
        covered = (u >= layer.x0) & (u < layer.x1) & (rows >= layer.y0) & (rows < layer.y1)
        index[covered] = k
        image[covered] = _texture(layer, u, rows, cfg.texture_contrast, 0.5 * w, half_span)[covered]
        depth[covered] = layer.depth
    return index, image, depth


def _nonoccluded(index_view, index_other, layers, sign):
    """Pixels whose both horizontal bilinear taps in the other view see the same layer."""
    h, w = index_view.shape
    disparity = np.array([layer.disparity for layer in layers])[index_view]
    cols = np.arange(w, dtype=np.float64)[None, :]
    sample = cols - sign * disparity
    inside = (sample >= 0) & (sample <= w - 1)
    x0 = np.clip(np.floor(sample), 0, max(w - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    same = (np.take_along_axis(index_other, x0, axis=1) == index_view) & \
        (np.take_along_axis(index_other, x1, axis=1) == index_view)
    return inside & same


def gen_scene(cfg, seed):
    """Render a layered stereo pair with dense truth and sparse simulated LiDAR."""
    calib = Calib(cfg.f_px, cfg.baseline_m)
    max_shift = calib.fb / cfg.depth_range[0]
    if max_shift >= cfg.width:
        raise SceneConfigError('nearest layer shift {:.3f} px is not below the image width {}'.format(
            max_shift, cfg.width))

    rng = np.random.default_rng(seed)
    layers = _draw_layers(cfg, rng, calib.fb)
    index_l, image_l, depth_l = _render(layers, cfg, right=False)
    index_r, image_r, depth_r = _render(layers, cfg, right=True)

    gt_seed_l, gt_seed_r = (int(s) for s in rng.integers(0, 2 ** 62, size=2))
    Z_l = sparsify_gt(DepthMap.dense(depth_l), cfg.gt_density, cfg.gt_rows_band, gt_seed_l)
    Z_r = sparsify_gt(DepthMap.dense(depth_r), cfg.gt_density, cfg.gt_rows_band, gt_seed_r)

    logger.debug('gen_scene seed=%s: %d layers, max disparity %.3f px', seed, len(layers), max_shift)
    return StereoSample(
        I_l=image_l[None], I_r=image_r[None], Z_l=Z_l, Z_r=Z_r, calib=calib,
        true_rho_l=1.0 / depth_l, true_rho_r=1.0 / depth_r,
        nonoccluded_l=_nonoccluded(index_l, index_r, layers, +1),
        nonoccluded_r=_nonoccluded(index_r, index_l, layers, -1))


def sparsify_gt(dense, density, rows_band, seed):
    """Keep round(density * eligible) random valid pixels from the lower ``rows_band`` of the rows."""
    if not 0 < density <= 1:
        raise SceneConfigError('density must lie in (0, 1], got {}'.format(density))
    if not 0 < rows_band <= 1:
        raise SceneConfigError('rows_band must lie in (0, 1], got {}'.format(rows_band))
    h = dense.depth.shape[-2]
    first_row = h - int(round(rows_band * h))
    eligible = dense.valid.copy()
    eligible[..., :first_row, :] = False

    candidates = np.flatnonzero(eligible)
    if candidates.size == 0:
        raise SceneConfigError('no eligible ground-truth pixels in the lower {:.0%} of the rows'.format(rows_band))
    keep_count = int(round(density * candidates.size))
    kept = np.random.default_rng(seed).choice(candidates, size=keep_count, replace=False)

    valid = np.zeros(dense.valid.size, dtype=bool)
    valid[kept] = True
    valid = valid.reshape(dense.valid.shape)
    return DepthMap(np.where(valid, dense.depth, 0.0), valid)


def photometric(image, alpha, gamma):
    return np.clip(np.power(image, gamma) * alpha, 0.0, 1.0)


def augment(sample, seed, alpha_range=(0.8, 1.2), gamma_range=(0.8, 1.2)):
    """Same gamma exponent and intensity gain on both views; depths untouched."""
    for name, (lo, hi) in (('alpha_range', alpha_range), ('gamma_range', gamma_range)):
        if not 0 < lo <= hi:
            raise ValueError('{} must be an ordered positive pair, got {}'.format(name, (lo, hi)))
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(*alpha_range)
    gamma = rng.uniform(*gamma_range)
    return replace(sample, I_l=photometric(sample.I_l, alpha, gamma), I_r=photometric(sample.I_r, alpha, gamma))


SPLITS = {'train': 0, 'val': 1, 'test': 2}


class SyntheticDataset:
    """Indexable generated benchmark split; scenes are rendered on first access."""

    def __init__(self, scene_cfg, count, seed, split='train'):
        if count < 1:
            raise SceneConfigError('a dataset needs at least one scene')
        if split not in SPLITS:
            raise SceneConfigError('unknown split {!r}'.format(split))
        self.scene_cfg = scene_cfg
        self.count = count
        self.seed = seed
        self.split = split
        self._cache = {}

    def scene_seed(self, index):
        return derive_seed(self.seed, SPLITS[self.split], index)

    def __len__(self):
        return self.count

    def __getitem__(self, index):
        if not 0 <= index < self.count:
            raise IndexError(index)
        if index not in self._cache:
            self._cache[index] = gen_scene(self.scene_cfg, self.scene_seed(index))
        return self._cache[index]

    def __iter__(self):
        return (self[i] for i in range(self.count))


if __name__ == "__main__":
    pass
