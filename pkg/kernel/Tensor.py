"""Dense N x C x H x W arrays and the primitive layer kernels.

Tensors are plain contiguous ``numpy.ndarray`` objects. Every kernel here
is a pure function: forward kernels return the output together with the
cache their backward counterpart needs, backward kernels map the output
adjoint to input adjoints. Spatial ops follow the same-ceil rule: a stride
``s`` maps an extent ``E`` to ``ceil(E / s)``.
"""
import logging
import struct
from collections import namedtuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BatchNormStateError(RuntimeError):
    pass


def check_finite(values, op):
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NonFiniteError('{} produced {} non-finite value(s)'.format(op, bad))
    return values


def out_extent(extent, stride):
    return -(-extent // stride)


def same_ceil_padding(extent, kernel, stride):
    """Zero padding (before, after) giving an output extent of ceil(extent / stride)."""
    total = max((out_extent(extent, stride) - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


class ConvSpec(namedtuple('ConvSpec', 'kernel, stride, in_channels, out_channels')):
    __slots__ = ()

    def __new__(cls, kernel, stride, in_channels, out_channels):
        if kernel < 1 or stride < 1:
            raise ShapeError('kernel and stride must be >= 1, got k={} s={}'.format(kernel, stride))
        if in_channels < 1 or out_channels < 1:
            raise ShapeError('channel counts must be >= 1')
        return super().__new__(cls, kernel, stride, in_channels, out_channels)

    def padding(self, height, width):
        return same_ceil_padding(height, self.kernel, self.stride), \
            same_ceil_padding(width, self.kernel, self.stride)

    @property
    def weight_shape(self):
        return self.out_channels, self.in_channels, self.kernel, self.kernel


def _windows(padded, kernel, stride, out_h, out_w):
    """Strided view of shape (N, C, out_h, out_w, k, k) over a padded input."""
    n, c = padded.shape[:2]
    s0, s1, s2, s3 = padded.strides
    return as_strided(padded, shape=(n, c, out_h, out_w, kernel, kernel),
                      strides=(s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)


def _scatter_windows(dwin, padded_shape, kernel, stride):
    """Adjoint of ``_windows``: sum window adjoints back onto the padded grid."""
    out_h, out_w = dwin.shape[2:4]
    dpad = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dpad[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += dwin[..., i, j]
    return dpad


def _unpad(padded, pads):
    (pt, pb), (pl, pr) = pads
    h, w = padded.shape[2:]
    return padded[:, :, pt:h - pb, pl:w - pr]


def conv2d(x, weights, bias, spec):
    """Same-ceil zero-padded cross-correlation. Returns (output, cache)."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError('conv2d expects N x {} x H x W input, got {}'.format(spec.in_channels, x.shape))
    if weights.shape != spec.weight_shape:
        raise ShapeError('conv2d weights must be {}, got {}'.format(spec.weight_shape, weights.shape))
    if bias.shape != (spec.out_channels,):
        raise ShapeError('conv2d bias must be ({},), got {}'.format(spec.out_channels, bias.shape))

    h, w = x.shape[2:]
    pads = spec.padding(h, w)
    padded = np.pad(x, ((0, 0), (0, 0)) + pads)
    out_h, out_w = out_extent(h, spec.stride), out_extent(w, spec.stride)
    win = _windows(padded, spec.kernel, spec.stride, out_h, out_w)
    out = np.tensordot(win, weights, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out + bias[None, :, None, None])
    return check_finite(out, 'conv2d'), (win, padded.shape, pads)


def conv2d_backward(dout, weights, spec, cache):
    win, padded_shape, pads = cache
    dbias = dout.sum(axis=(0, 2, 3))
    dweights = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    dwin = np.tensordot(dout, weights, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    dx = _unpad(_scatter_windows(dwin, padded_shape, spec.kernel, spec.stride), pads)
    return np.ascontiguousarray(dx), dweights, dbias


def max_pool2d(x, kernel, stride):
    """Max pooling over -inf padded same-ceil windows. Returns (output, cache)."""
    if kernel < 1 or stride < 1:
        raise ShapeError('max_pool2d needs kernel, stride >= 1')
    h, w = x.shape[2:]
    pads = same_ceil_padding(h, kernel, stride), same_ceil_padding(w, kernel, stride)
    padded = np.pad(x, ((0, 0), (0, 0)) + pads, constant_values=-np.inf)
    out_h, out_w = out_extent(h, stride), out_extent(w, stride)
    win = _windows(padded, kernel, stride, out_h, out_w).reshape(x.shape[:2] + (out_h, out_w, kernel * kernel))
    # argmax keeps the first maximum in row-major window order on ties
    index = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, index[..., None], axis=-1)[..., 0]
    return check_finite(np.ascontiguousarray(out), 'max_pool2d'), (index, padded.shape, pads, kernel, stride)


def max_pool2d_backward(dout, cache):
    index, padded_shape, pads, kernel, stride = cache
    n, c, out_h, out_w = dout.shape
    rows = np.arange(out_h)[:, None] * stride + index // kernel
    cols = np.arange(out_w)[None, :] * stride + index % kernel
    nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing='ij')
    dpad = np.zeros(padded_shape, dtype=dout.dtype)
    np.add.at(dpad, (nn[..., None, None], cc[..., None, None], rows, cols), dout)
    return np.ascontiguousarray(_unpad(dpad, pads))


class BNState:
    """Running per-channel statistics of one batch-normalization layer."""

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean = None
        self.running_var = None

    @property
    def populated(self):
        return self.running_mean is not None and self.running_var is not None

    def reset(self, dtype=np.float64):
        self.running_mean = np.zeros(self.channels, dtype=dtype)
        self.running_var = np.ones(self.channels, dtype=dtype)

    def copy(self):
        other = BNState(self.channels, self.momentum, self.eps)
        if self.populated:
            other.running_mean = self.running_mean.copy()
            other.running_var = self.running_var.copy()
        return other


def batch_norm(x, gamma, beta, state, mode):
    """Per-channel normalization. Train mode updates ``state``. Returns (output, cache)."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError('batch_norm expects gamma/beta of shape ({},)'.format(c))
    if mode == 'train':
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if not state.populated:
            state.reset(x.dtype)
        state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mean
        state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var
    elif mode == 'eval':
        if not state.populated:
            raise BatchNormStateError('batch_norm in eval mode needs populated running statistics')
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError('mode must be train or eval, got {!r}'.format(mode))

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return check_finite(out, 'batch_norm'), (xhat, inv_std, mode)


def batch_norm_backward(dout, gamma, cache):
    xhat, inv_std, mode = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == 'eval':
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return dx, dgamma, dbeta


def unpool2x(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=x.dtype)
    out[:, :, ::2, ::2] = x
    return out


def unpool2x_backward(dout):
    return np.ascontiguousarray(dout[:, :, ::2, ::2])


def resize_matrix(n_out, n_in, dtype=np.float64):
    """Linear interpolation weights (n_out x n_in) with half-pixel centers, border clamped."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(x, height, width):
    """Separable bilinear resize of the two trailing axes. Returns (output, cache)."""
    ry = resize_matrix(height, x.shape[-2], x.dtype)
    rx = resize_matrix(width, x.shape[-1], x.dtype)
    out = np.einsum('hi,...ij,wj->...hw', ry, x, rx)
    return out, (ry, rx)


def resize_bilinear_backward(dout, cache):
    ry, rx = cache
    return np.einsum('hi,...hw,wj->...ij', ry, dout, rx)


# Tensor blob: little-endian u64 rank, u64 extents, float64 values.

def write_tensor(f, values):
    values = np.ascontiguousarray(values, dtype='<f8')
    f.write(struct.pack('<Q', values.ndim))
    f.write(struct.pack('<{}Q'.format(values.ndim), *values.shape))
    f.write(values.tobytes(order='C'))


def read_tensor(f):
    header = f.read(8)
    if len(header) != 8:
        raise ShapeError('truncated tensor blob header')
    rank, = struct.unpack('<Q', header)
    raw = f.read(8 * rank)
    if len(raw) != 8 * rank:
        raise ShapeError('truncated tensor blob extents')
    extents = struct.unpack('<{}Q'.format(rank), raw)
    count = int(np.prod(extents, dtype=np.int64)) if rank else 1
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise ShapeError('truncated tensor blob: expected {} values'.format(count))
    return np.frombuffer(raw, dtype='<f8').reshape(extents).astype(np.float64)


if __name__ == "__main__":
    pass
