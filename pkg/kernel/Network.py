"""Residual encoder-decoder predicting inverse depth at half the input resolution.

Layout for ``n`` stages (full scale: 4 stages of 3, 4, 6, 3 bottlenecks):

    conv1 7x7/2 + BN + ReLU, max pool 3x3/2        scale 4
    stage k: bottleneck blocks, stride 2 for k > 1  scale 2^(k+1)
    conv2 1x1 halving channels + BN                 scale 2^(n+1)
    up_1 .. up_n upprojections, up_j (j > 1) merging the output of
    stage n-j+1 through concatenation and a 1x1 conv
    dropout, conv3 3x3 -> 1 channel, softplus       scale 2

Parameters live in one ordered store keyed ``<layer>.weight|bias|gamma|beta``.
"""
import copy
import logging
import math
from collections import OrderedDict

import numpy as np

from kernel import Autodiff
from kernel.Autodiff import Node, Tape
from kernel.Tensor import BNState, ConvSpec, out_extent

logger = logging.getLogger(__name__)


class ArchitectureError(ValueError):
    pass


class InputTooSmallError(ValueError):
    pass


OUTPUT_WEIGHT_SCALE = 1e-3


class _Pass:
    """One forward evaluation: tape, mode and the module whose parameters are bound."""

    def __init__(self, module, tape, mode, rng):
        if mode not in ('train', 'eval'):
            raise ValueError('mode must be train or eval, got {!r}'.format(mode))
        self.module = module
        self.tape = tape
        self.mode = mode
        self.rng = rng

    def param(self, name):
        return self.tape.param(name, self.module.params[name])

    def conv(self, x, name):
        spec = self.module.convs[name]
        return Autodiff.conv2d(x, self.param(name + '.weight'), self.param(name + '.bias'), spec)

    def bn(self, x, name):
        return Autodiff.batch_norm(x, self.param(name + '.gamma'), self.param(name + '.beta'),
                                   self.module.bn_states[name], self.mode)


class Module:
    """Owner of a parameter store, BN statistics and a forward graph."""

    def __init__(self, dtype=np.float64, bn_momentum=0.9, bn_eps=1e-5):
        self.dtype = dtype
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.params = OrderedDict()
        self.convs = OrderedDict()
        self.bn_states = OrderedDict()
        self.rng = np.random.default_rng(0)

    def add_conv(self, name, kernel, stride, in_ch, out_ch):
        spec = ConvSpec(kernel, stride, in_ch, out_ch)
        self.convs[name] = spec
        self.params[name + '.weight'] = np.zeros(spec.weight_shape, dtype=self.dtype)
        self.params[name + '.bias'] = np.zeros(out_ch, dtype=self.dtype)

    def add_bn(self, name, channels):
        self.params[name + '.gamma'] = np.ones(channels, dtype=self.dtype)
        self.params[name + '.beta'] = np.zeros(channels, dtype=self.dtype)
        self.bn_states[name] = BNState(channels, self.bn_momentum, self.bn_eps)

    def decayed(self, name):
        """Weight decay applies to convolution weights only."""
        return name.endswith('.weight') and name[:-len('.weight')] in self.convs

    def graph(self, ctx, x):
        raise NotImplementedError

    def forward(self, image, mode='eval', tape=None, rng=None):
        """Array in, array out; with a ``tape`` the result is a node recorded on it."""
        own = tape is None
        tape = Tape(self.dtype) if own else tape
        x = image if isinstance(image, Node) else tape.constant(image)
        out = self.graph(_Pass(self, tape, mode, rng if rng is not None else self.rng), x)
        return out.value if own else out

    def state_copy(self):
        """Deep copy of parameters and BN statistics."""
        return OrderedDict((k, v.copy()) for k, v in self.params.items()), \
            OrderedDict((k, s.copy()) for k, s in self.bn_states.items())

    def load_state(self, params, bn_states=None):
        if set(params) != set(self.params):
            missing = sorted(set(self.params) ^ set(params))
            raise ArchitectureError('parameter names differ from the architecture: {}'.format(missing[:5]))
        for name, value in params.items():
            if value.shape != self.params[name].shape:
                raise ArchitectureError('{} has shape {}, expected {}'.format(name, value.shape, self.params[name].shape))
            self.params[name] = np.array(value, dtype=self.dtype)
        if bn_states is not None:
            for name, state in bn_states.items():
                self.bn_states[name] = state.copy()


class ResBlock:
    """Bottleneck residual block: 1x1, 3x3, 1x1 convolutions with BN; type 2 projects the shortcut."""

    def __init__(self, owner, name, block_type, stride, in_ch, out_ch):
        if block_type not in (1, 2):
            raise ArchitectureError('block type must be 1 or 2, got {}'.format(block_type))
        if block_type == 1 and (stride != 1 or in_ch != out_ch):
            raise ArchitectureError('{}: type 1 blocks cannot change shape (stride {}, {} -> {} channels)'.format(
                name, stride, in_ch, out_ch))
        if out_ch % 4:
            raise ArchitectureError('{}: output channels {} are not divisible by 4'.format(name, out_ch))
        self.name = name
        self.block_type = block_type
        self.stride = stride
        mid = out_ch // 4
        owner.add_conv(name + '.conv_a', 1, stride, in_ch, mid)
        owner.add_bn(name + '.bn_a', mid)
        owner.add_conv(name + '.conv_b', 3, 1, mid, mid)
        owner.add_bn(name + '.bn_b', mid)
        owner.add_conv(name + '.conv_c', 1, 1, mid, out_ch)
        owner.add_bn(name + '.bn_c', out_ch)
        if block_type == 2:
            owner.add_conv(name + '.conv_s', 1, stride, in_ch, out_ch)
            owner.add_bn(name + '.bn_s', out_ch)

    def __call__(self, ctx, x):
        n = self.name
        y = Autodiff.relu(ctx.bn(ctx.conv(x, n + '.conv_a'), n + '.bn_a'))
        y = Autodiff.relu(ctx.bn(ctx.conv(y, n + '.conv_b'), n + '.bn_b'))
        y = ctx.bn(ctx.conv(y, n + '.conv_c'), n + '.bn_c')
        shortcut = ctx.bn(ctx.conv(x, n + '.conv_s'), n + '.bn_s') if self.block_type == 2 else x
        return Autodiff.relu(y + shortcut)


class UpProjection:
    """Unpool by 2, then a residual block halving channels; an optional skip is concatenated first."""

    def __init__(self, owner, name, in_ch, skip_ch=None, kernel=5):
        if in_ch % 2:
            raise ArchitectureError('{}: upprojection needs an even channel count, got {}'.format(name, in_ch))
        self.name = name
        self.merge = skip_ch is not None
        out_ch = in_ch // 2
        if self.merge:
            owner.add_conv(name + '.merge', 1, 1, in_ch + skip_ch, in_ch)
            owner.add_bn(name + '.bn_merge', in_ch)
        owner.add_conv(name + '.conv_a', kernel, 1, in_ch, out_ch)
        owner.add_bn(name + '.bn_a', out_ch)
        owner.add_conv(name + '.conv_b', 3, 1, out_ch, out_ch)
        owner.add_bn(name + '.bn_b', out_ch)
        owner.add_conv(name + '.conv_s', kernel, 1, in_ch, out_ch)
        owner.add_bn(name + '.bn_s', out_ch)

    def __call__(self, ctx, x, skip=None, target=None):
        n = self.name
        if self.merge:
            if skip is not None:
                x = Autodiff.concat([x, skip], axis=1)
            x = Autodiff.relu(ctx.bn(ctx.conv(x, n + '.merge'), n + '.bn_merge'))
        x = Autodiff.unpool2x(x)
        if target is not None:
            x = Autodiff.crop(x, *target)
        y = Autodiff.relu(ctx.bn(ctx.conv(x, n + '.conv_a'), n + '.bn_a'))
        y = ctx.bn(ctx.conv(y, n + '.conv_b'), n + '.bn_b')
        shortcut = ctx.bn(ctx.conv(x, n + '.conv_s'), n + '.bn_s')
        return Autodiff.relu(y + shortcut)


class Subnet(Module):
    """A single block wrapped as a standalone module."""

    def __init__(self, factory, **kwargs):
        super().__init__(**kwargs)
        self.body = factory(self)

    def graph(self, ctx, x):
        return self.body(ctx, x)


def build_resblock(block_type, stride, in_ch, out_ch, **kwargs):
    return Subnet(lambda owner: ResBlock(owner, 'block', block_type, stride, in_ch, out_ch), **kwargs)


def build_upproject(in_ch, kernel=5, **kwargs):
    return Subnet(lambda owner: UpProjection(owner, 'up', in_ch, None, kernel), **kwargs)


class Network(Module):
    def __init__(self, cfg, dtype=np.float64):
        super().__init__(dtype, cfg.bn_momentum, cfg.bn_eps)
        self.cfg = cfg
        n, width = cfg.num_stages, cfg.width

        self.add_conv('conv1', 7, 2, cfg.in_channels, width)
        self.add_bn('bn1', width)

        self.stages = []
        in_ch = width
        self.stage_channels = []
        for k, blocks in enumerate(cfg.blocks_per_stage, start=1):
            out_ch = 4 * width * 2 ** (k - 1)
            stage = []
            for b in range(1, blocks + 1):
                name = 'stage{}.block{}'.format(k, b)
                if b == 1:
                    stage.append(ResBlock(self, name, 2, 1 if k == 1 else 2, in_ch, out_ch))
                else:
                    stage.append(ResBlock(self, name, 1, 1, out_ch, out_ch))
                in_ch = out_ch
            self.stages.append(stage)
            self.stage_channels.append(out_ch)

        self.add_conv('conv2', 1, 1, in_ch, in_ch // 2)
        self.add_bn('bn2', in_ch // 2)
        in_ch //= 2

        self.ups = []
        for j in range(1, n + 1):
            skip_ch = None
            if j > 1:
                skip_ch = self.stage_channels[n - j] if cfg.use_long_skips else 0
            self.ups.append(UpProjection(self, 'up{}'.format(j), in_ch, skip_ch, cfg.upproject_kernel))
            in_ch //= 2

        self.add_conv('conv3', 3, 1, in_ch, 1)
        logger.debug('network: %d stages, width %d, %d parameter tensors', n, width, len(self.params))

    @property
    def min_size(self):
        return 2 ** (self.cfg.num_stages + 1)

    def scale_sizes(self, height, width):
        """Spatial size after each halving: index s is the size at scale 2^s."""
        sizes = [(height, width)]
        for _ in range(self.cfg.num_stages + 1):
            h, w = sizes[-1]
            sizes.append((out_extent(h, 2), out_extent(w, 2)))
        return sizes

    def output_size(self, height, width):
        return self.scale_sizes(height, width)[1]

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] != self.cfg.in_channels:
            raise ArchitectureError('expected N x {} x H x W input, got {}'.format(self.cfg.in_channels, shape))
        h, w = shape[2:]
        if h < self.min_size or w < self.min_size:
            raise InputTooSmallError('input {}x{} is smaller than the minimum {}x{}'.format(
                w, h, self.min_size, self.min_size))

    def features(self, ctx, x):
        """Forward pass returning (rho, named intermediate nodes)."""
        self.check_input(x.shape)
        cfg, n = self.cfg, self.cfg.num_stages
        sizes = self.scale_sizes(*x.shape[2:])
        feats = OrderedDict()

        y = Autodiff.relu(ctx.bn(ctx.conv(x, 'conv1'), 'bn1'))
        y = Autodiff.max_pool2d(y, 3, 2)
        for k, stage in enumerate(self.stages, start=1):
            for block in stage:
                y = block(ctx, y)
            feats['stage{}'.format(k)] = y

        y = ctx.bn(ctx.conv(y, 'conv2'), 'bn2')
        feats['bottleneck'] = y
        for j, up in enumerate(self.ups, start=1):
            skip = None
            if j > 1 and cfg.use_long_skips:
                skip = feats['stage{}'.format(n - j + 1)]
            y = up(ctx, y, skip=skip, target=sizes[n + 1 - j])
            feats['up{}'.format(j)] = y

        if ctx.mode == 'train' and cfg.dropout_p > 0:
            y = Autodiff.dropout(y, cfg.dropout_p, ctx.rng)
        rho = Autodiff.softplus(ctx.conv(y, 'conv3'))
        feats['rho'] = rho
        return rho, feats

    def graph(self, ctx, x):
        return self.features(ctx, x)[0]

    def trace(self, image, mode='eval'):
        """Shapes of the named intermediate activations for one forward pass."""
        tape = Tape(self.dtype)
        _, feats = self.features(_Pass(self, tape, mode, self.rng), tape.constant(image))
        return OrderedDict((name, node.shape) for name, node in feats.items())


def glorot_bound(spec):
    fan_in = spec.in_channels * spec.kernel ** 2
    fan_out = spec.out_channels * spec.kernel ** 2
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(module, seed):
    """Glorot-uniform convolutions, zero biases, unit BN scale; the output map starts near rho_init."""
    rng = np.random.default_rng(seed)
    for name, spec in module.convs.items():
        bound = glorot_bound(spec)
        module.params[name + '.weight'] = rng.uniform(-bound, bound, size=spec.weight_shape).astype(module.dtype)
        module.params[name + '.bias'] = np.zeros(spec.out_channels, dtype=module.dtype)
    for name, state in module.bn_states.items():
        module.params[name + '.gamma'] = np.ones(state.channels, dtype=module.dtype)
        module.params[name + '.beta'] = np.zeros(state.channels, dtype=module.dtype)
        state.reset(module.dtype)

    if isinstance(module, Network):
        module.params['conv3.weight'] *= OUTPUT_WEIGHT_SCALE
        # inverse of softplus
        module.params['conv3.bias'][:] = math.log(math.expm1(module.cfg.rho_init))
    module.rng = np.random.default_rng(seed)
    return module.params


def build_network(cfg, seed, dtype=np.float64):
    net = Network(cfg, dtype)
    init_params(net, seed)
    return net


def predict(net, images):
    """Eval-mode inverse depth for N x C x H x W (or C x H x W) images."""
    images = np.asarray(images, dtype=net.dtype)
    single = images.ndim == 3
    rho = net.forward(images[None] if single else images, mode='eval')
    return rho[0] if single else rho


def clone(net):
    return copy.deepcopy(net)


if __name__ == "__main__":
    pass
