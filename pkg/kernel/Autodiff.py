"""Reverse-mode differentiation on a per-step tape.

A ``Tape`` records ``Node`` objects in creation order, which is a valid
topological order of the computation DAG; ``backward`` walks it in reverse
so a node's adjoint is complete before its vector-Jacobian product runs.
"""
import logging
from collections import OrderedDict, namedtuple

import numpy as np
from scipy.special import expit

from kernel import Tensor

logger = logging.getLogger(__name__)


class NonScalarLossError(ValueError):
    pass


class GradientCheckError(ArithmeticError):
    pass


class Node:
    """A recorded value: op name, input nodes, forward value, adjoint accumulator."""

    __slots__ = ('tape', 'index', 'op', 'value', 'parents', 'vjp', 'name', 'adjoint')
    # numpy defers mixed arithmetic to the Node operators
    __array_ufunc__ = None

    def __init__(self, tape, index, op, value, parents=(), vjp=None, name=None):
        self.tape = tape
        self.index = index
        self.op = op
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.adjoint = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_param(self):
        return self.op == 'param'

    def __repr__(self):
        return 'Node({}, op={}, shape={})'.format(self.index, self.op, self.shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """One tape per training step; confined to the thread that owns it."""

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self.nodes = []
        self.params = OrderedDict()

    def _append(self, op, value, parents=(), vjp=None, name=None):
        node = Node(self, len(self.nodes), op, value, tuple(parents), vjp, name)
        self.nodes.append(node)
        return node

    def param(self, name, value):
        if name in self.params:
            return self.params[name]
        node = self._append('param', np.asarray(value, dtype=self.dtype), name=name)
        self.params[name] = node
        return node

    def constant(self, value):
        return self._append('const', np.asarray(value, dtype=self.dtype))

    def record(self, op, value, parents, vjp):
        """Append a differentiable result; ``vjp(g)`` returns one adjoint (or None) per parent."""
        value = np.asarray(value, dtype=self.dtype)
        Tensor.check_finite(value, op)
        return self._append(op, value, parents, vjp)


def tape_of(*items):
    for item in items:
        if isinstance(item, Node):
            return item.tape
    raise TypeError('at least one operand must be a tape Node')


def value_of(item):
    return item.value if isinstance(item, Node) else np.asarray(item)


def unbroadcast(grad, shape):
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def apply(op, forward, derivative, *inputs):
    """Record an elementwise op given forward(values...) and derivative(g, values..., out) -> grads."""
    tape = tape_of(*inputs)
    values = [value_of(x) for x in inputs]
    out = forward(*values)
    parents = [x for x in inputs if isinstance(x, Node)]
    positions = [i for i, x in enumerate(inputs) if isinstance(x, Node)]

    def vjp(g):
        grads = derivative(g, *values, out)
        return tuple(None if grads[i] is None else unbroadcast(grads[i], values[i].shape) for i in positions)

    return tape.record(op, out, parents, vjp)


def add(a, b):
    return apply('add', np.add, lambda g, x, y, out: (g, g), a, b)


def sub(a, b):
    return apply('sub', np.subtract, lambda g, x, y, out: (g, -g), a, b)


def mul(a, b):
    return apply('mul', np.multiply, lambda g, x, y, out: (g * y, g * x), a, b)


def div(a, b):
    return apply('div', np.divide, lambda g, x, y, out: (g / y, -g * out / y), a, b)


def square(a):
    return apply('square', np.square, lambda g, x, out: (2.0 * x * g,), a)


def absolute(a):
    # sign(0) == 0 is the subgradient convention at the kink
    return apply('abs', np.abs, lambda g, x, out: (g * np.sign(x),), a)


def exp(a):
    return apply('exp', np.exp, lambda g, x, out: (g * out,), a)


def log(a):
    return apply('log', np.log, lambda g, x, out: (g / x,), a)


def relu(a):
    return apply('relu', lambda x: np.maximum(x, 0.0), lambda g, x, out: (g * (x > 0),), a)


def softplus(a):
    return apply('softplus', lambda x: np.logaddexp(0.0, x), lambda g, x, out: (g * expit(x),), a)


def clamp_min(a, lo):
    return apply('clamp_min', lambda x: np.maximum(x, lo), lambda g, x, out: (g * (x > lo),), a)


def total(a):
    """Sum of all elements as a 0-d node."""
    shape = a.shape
    return a.tape.record('sum', np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    return mul(total(a), 1.0 / a.value.size)


def getitem(a, key):
    shape = a.shape

    def vjp(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(grad, key, g)
        return grad,

    return a.tape.record('getitem', a.value[key], (a,), vjp)


def reshape(a, shape):
    old = a.shape
    return a.tape.record('reshape', a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def crop(a, height, width):
    """Top-left crop of the two trailing axes."""
    if a.shape[-2] < height or a.shape[-1] < width:
        raise Tensor.ShapeError('cannot crop {} to {}x{}'.format(a.shape, height, width))
    if a.shape[-2:] == (height, width):
        return a
    return getitem(a, (Ellipsis, slice(0, height), slice(0, width)))


def concat(items, axis=1):
    tape = tape_of(*items)
    values = [value_of(x) for x in items]
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    parents = [x for x in items if isinstance(x, Node)]

    def vjp(g):
        grads = []
        for x, lo, hi in zip(items, bounds[:-1], bounds[1:]):
            if isinstance(x, Node):
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                grads.append(g[tuple(index)])
        return tuple(grads)

    return tape.record('concat', np.concatenate(values, axis=axis), parents, vjp)


def forward_diff(a, axis):
    """x[i+1] - x[i] along ``axis``, zero at the last index."""
    axis = axis % a.value.ndim
    x = a.value
    head = [slice(None)] * x.ndim
    tail = [slice(None)] * x.ndim
    head[axis] = slice(1, None)
    tail[axis] = slice(None, -1)
    head, tail = tuple(head), tuple(tail)
    out = np.zeros_like(x)
    out[tail] = x[head] - x[tail]

    def vjp(g):
        grad = np.zeros_like(g)
        grad[head] += g[tail]
        grad[tail] -= g[tail]
        return grad,

    return a.tape.record('forward_diff', out, (a,), vjp)


def conv2d(x, weights, bias, spec):
    out, cache = Tensor.conv2d(x.value, weights.value, bias.value, spec)

    def vjp(g):
        return Tensor.conv2d_backward(g, weights.value, spec, cache)

    return x.tape.record('conv2d', out, (x, weights, bias), vjp)


def max_pool2d(x, kernel, stride):
    out, cache = Tensor.max_pool2d(x.value, kernel, stride)
    return x.tape.record('max_pool2d', out, (x,), lambda g: (Tensor.max_pool2d_backward(g, cache),))


def batch_norm(x, gamma, beta, state, mode):
    out, cache = Tensor.batch_norm(x.value, gamma.value, beta.value, state, mode)
    return x.tape.record('batch_norm', out, (x, gamma, beta),
                         lambda g: Tensor.batch_norm_backward(g, gamma.value, cache))


def unpool2x(x):
    return x.tape.record('unpool2x', Tensor.unpool2x(x.value), (x,), lambda g: (Tensor.unpool2x_backward(g),))


def resize_bilinear(x, height, width):
    out, cache = Tensor.resize_bilinear(x.value, height, width)
    return x.tape.record('resize_bilinear', out, (x,), lambda g: (Tensor.resize_bilinear_backward(g, cache),))


def dropout(x, p, rng):
    """Inverted dropout with a keep mask drawn from ``rng``."""
    if p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.value.dtype) / (1.0 - p)
    return mul(x, keep)


def backward(loss):
    """Adjoints of every parameter on the loss's tape; unreachable parameters get zeros."""
    if not isinstance(loss, Node):
        raise TypeError('backward expects a tape Node')
    if loss.value.size != 1:
        raise NonScalarLossError('backward needs a scalar loss, got shape {}'.format(loss.shape))

    tape = loss.tape
    for node in tape.nodes:
        node.adjoint = None
    loss.adjoint = np.ones_like(loss.value)

    for node in reversed(tape.nodes[:loss.index + 1]):
        if node.adjoint is None or node.vjp is None:
            continue
        for parent, grad in zip(node.parents, node.vjp(node.adjoint)):
            if grad is None:
                continue
            grad = np.asarray(grad, dtype=tape.dtype).reshape(parent.shape)
            parent.adjoint = grad.copy() if parent.adjoint is None else parent.adjoint + grad

    grads = OrderedDict()
    for name, node in tape.params.items():
        grads[name] = node.adjoint if node.adjoint is not None else np.zeros_like(node.value)
    return grads


GradReport = namedtuple('GradReport', 'passed, max_abs_error, max_rel_error, worst, entries')
GradEntry = namedtuple('GradEntry', 'param, index, analytic, numeric, abs_error, rel_error')


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(f, params, eps=1e-3, tol=1e-4, atol=1e-9, max_coords=None, seed=0):
    """Compare ``backward`` against central differences.

    ``f(tape, nodes)`` builds a scalar loss from parameter nodes keyed like
    ``params`` (a mapping of name to float64 array). A coordinate passes when
    its relative error is within ``tol`` or its absolute error within
    ``atol``. ``max_coords`` samples that many coordinates per parameter.
    """
    for name, value in params.items():
        if np.asarray(value).dtype != np.float64:
            raise GradientCheckError('grad_check needs double precision, {} is {}'.format(name, np.asarray(value).dtype))
    params = OrderedDict((name, np.array(value, dtype=np.float64)) for name, value in params.items())

    def evaluate(values):
        tape = Tape(np.float64)
        nodes = OrderedDict((name, tape.param(name, v)) for name, v in values.items())
        return f(tape, nodes)

    loss = evaluate(params)
    analytic = backward(loss)
    rng = np.random.default_rng(seed)

    entries = []
    for name, value in params.items():
        coords = list(np.ndindex(value.shape))
        if max_coords is not None and len(coords) > max_coords:
            picked = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picked)]
        for index in coords:
            original = value[index]
            try:
                value[index] = original + eps
                plus = float(evaluate(params).value)
                value[index] = original - eps
                minus = float(evaluate(params).value)
            except Tensor.NonFiniteError as e:
                raise GradientCheckError('non-finite loss while perturbing {}{}: {}'.format(name, list(index), e))
            finally:
                value[index] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise GradientCheckError('non-finite loss while perturbing {}{}'.format(name, list(index)))
            numeric = (plus - minus) / (2.0 * eps)
            a = float(analytic[name][index])
            entries.append(GradEntry(name, index, a, numeric, abs(a - numeric), relative_error(a, numeric)))

    if not entries:
        return GradReport(True, 0.0, 0.0, None, entries)
    failing = [e for e in entries if e.rel_error > tol and e.abs_error > atol]
    worst = max(failing or entries, key=lambda e: (e.rel_error, e.abs_error))
    report = GradReport(not failing, max(e.abs_error for e in entries), max(e.rel_error for e in entries), worst, entries)
    logger.debug('grad_check: %d coordinates, max rel %.3g, passed=%s', len(entries), report.max_rel_error, report.passed)
    return report


def summarize(report):
    """Max errors per parameter: name -> (max_abs, max_rel)."""
    table = OrderedDict()
    for e in report.entries:
        abs_err, rel_err = table.get(e.param, (0.0, 0.0))
        table[e.param] = (max(abs_err, e.abs_error), max(rel_err, e.rel_error))
    return table


if __name__ == "__main__":
    pass
