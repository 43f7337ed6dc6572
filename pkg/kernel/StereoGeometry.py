"""Rectified stereo warping, bilinear sampling with validity masks, presmoothing.

Conventions: images are N x C x H x W, inverse depth maps N x 1 x H x W in
1/m, coordinates are (column, row) pixel positions. Warping is horizontal:
sign +1 looks the left view up in the right image (x - fb*rho), sign -1
looks the right view up in the left image.
"""
import logging
import math
from collections import namedtuple

import numpy as np
from scipy import ndimage

from kernel import Autodiff
from kernel.Autodiff import Node

logger = logging.getLogger(__name__)


class Calib(namedtuple('Calib', 'f, b')):
    """Focal length f in pixels and baseline b in meters."""
    __slots__ = ()

    def __new__(cls, f, b):
        f, b = float(f), float(b)
        if not (f > 0 and b > 0):
            raise ValueError('calibration needs f > 0 and b > 0, got f={} b={}'.format(f, b))
        return super().__new__(cls, f, b)

    @property
    def fb(self):
        return self.f * self.b

    def scaled(self, factor):
        """Calibration of the same rig with images resampled by ``factor``."""
        return Calib(self.f * factor, self.b)


def warp_coord(x, rho, calib, sign):
    """Warp (column, row) by the disparity fb*rho; the row is untouched."""
    if sign not in (1, -1):
        raise ValueError('sign must be +1 or -1')
    col, row = x
    return col - sign * calib.fb * rho, row


def _footprint(cx, cy, height, width):
    valid = (cx >= 0) & (cx <= width - 1) & (cy >= 0) & (cy <= height - 1)
    # all four neighbours stay inside the image: x0 <= W-2 so x1 <= W-1
    x0 = np.clip(np.floor(cx), 0, max(width - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(cy), 0, max(height - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = np.where(valid, cx - x0, 0.0)
    fy = np.where(valid, cy - y0, 0.0)
    return valid, x0, x1, y0, y1, fx, fy


def _bilinear(image, cx, cy):
    n, c, h, w = image.shape
    valid, x0, x1, y0, y1, fx, fy = _footprint(cx, cy, h, w)
    batch = np.arange(n)[:, None, None]
    pixels = image.transpose(0, 2, 3, 1)
    i00, i01 = pixels[batch, y0, x0], pixels[batch, y0, x1]
    i10, i11 = pixels[batch, y1, x0], pixels[batch, y1, x1]
    fxc, fyc = fx[..., None], fy[..., None]
    top = (1.0 - fxc) * i00 + fxc * i01
    bottom = (1.0 - fxc) * i10 + fxc * i11
    out = ((1.0 - fyc) * top + fyc * bottom) * valid[..., None]
    cache = (valid, x0, x1, y0, y1, fx, fy, batch, (i00, i01, i10, i11))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def _bilinear_backward(g, image_shape, cache):
    valid, x0, x1, y0, y1, fx, fy, batch, (i00, i01, i10, i11) = cache
    gp = g.transpose(0, 2, 3, 1) * valid[..., None]
    fxc, fyc = fx[..., None], fy[..., None]

    n, c, h, w = image_shape
    dpixels = np.zeros((n, h, w, c), dtype=g.dtype)
    np.add.at(dpixels, (batch, y0, x0), gp * (1.0 - fxc) * (1.0 - fyc))
    np.add.at(dpixels, (batch, y0, x1), gp * fxc * (1.0 - fyc))
    np.add.at(dpixels, (batch, y1, x0), gp * (1.0 - fxc) * fyc)
    np.add.at(dpixels, (batch, y1, x1), gp * fxc * fyc)
    dimage = np.ascontiguousarray(dpixels.transpose(0, 3, 1, 2))

    dcx = (gp * ((1.0 - fyc) * (i01 - i00) + fyc * (i11 - i10))).sum(axis=-1)
    dcy = (gp * ((1.0 - fxc) * (i10 - i00) + fxc * (i11 - i01))).sum(axis=-1)
    return dimage, dcx, dcy


def sample_bilinear(image, coords):
    """Sample ``image`` (N x C x H x W) at per-pixel (cx, cy) coordinates of shape N x H' x W'.

    Returns (values, valid): values N x C x H' x W' (zero where invalid) and
    the boolean valid mask N x H' x W'. Any of image/cx/cy may be tape nodes;
    adjoints flow to the image and to both coordinates.
    """
    cx, cy = coords
    image_v, cx_v, cy_v = (Autodiff.value_of(v) for v in (image, cx, cy))
    if not (np.all(np.isfinite(cx_v)) and np.all(np.isfinite(cy_v))):
        raise ValueError('sampling coordinates must be finite')
    out, cache = _bilinear(image_v, cx_v, cy_v)
    valid = cache[0]

    inputs = (image, cx, cy)
    if not any(isinstance(v, Node) for v in inputs):
        return out, valid

    parents = [v for v in inputs if isinstance(v, Node)]
    flags = [isinstance(v, Node) for v in inputs]

    def vjp(g):
        grads = _bilinear_backward(g, image_v.shape, cache)
        return tuple(grad for grad, flag in zip(grads, flags) if flag)

    return Autodiff.tape_of(*inputs).record('sample_bilinear', out, parents, vjp), valid


def gaussian_kernel(sigma):
    """Normalized 1-D Gaussian taps truncated at radius ceil(3 sigma)."""
    if sigma <= 0:
        raise ValueError('sigma must be > 0, got {}'.format(sigma))
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-x ** 2 / (2.0 * sigma ** 2))
    return taps / taps.sum()


def gaussian_smooth(image, sigma=1.0):
    """Separable Gaussian smoothing of the two trailing axes with edge replication."""
    taps = gaussian_kernel(sigma)
    image = np.asarray(image, dtype=np.float64)
    out = ndimage.correlate1d(image, taps, axis=-1, mode='nearest')
    return ndimage.correlate1d(out, taps, axis=-2, mode='nearest')


def pixel_grid(batch, height, width):
    cols = np.broadcast_to(np.arange(width, dtype=np.float64), (batch, height, width))
    rows = np.broadcast_to(np.arange(height, dtype=np.float64)[:, None], (batch, height, width))
    return cols, rows


def reconstruct_view(source, rho, calib, sign):
    """Resample ``source`` at the warped grid of ``rho`` (N x 1 x H x W)."""
    source_shape = Autodiff.value_of(source).shape
    rho_shape = Autodiff.value_of(rho).shape
    if source_shape[0] != rho_shape[0] or source_shape[2:] != rho_shape[2:]:
        raise ValueError('source {} and rho {} must share batch and spatial size'.format(source_shape, rho_shape))
    n, _, h, w = rho_shape
    rho_plane = Autodiff.reshape(rho, (n, h, w)) if isinstance(rho, Node) else np.reshape(rho, (n, h, w))
    coords = warp_coord(pixel_grid(n, h, w), rho_plane, calib, sign)
    return sample_bilinear(source, coords)


if __name__ == "__main__":
    pass
