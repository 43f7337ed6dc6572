"""On-disk formats: sample folders, depth PNG/PFM maps, calibration text, checkpoints.

Sample folder layout (one numbered folder per sample)::

    0000/left.png  right.png          8-bit grayscale
         depth_left.png  depth_right.png  16-bit, meters = raw / 256, raw 0 = no measurement
         calib.txt                    f_px=<float> / baseline_m=<float>
         true_rho.pfm  true_rho_right.pfm  synthetic scenes only
"""
import json
import logging
import os
import re
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from kconfig import NetConfig
from kernel.DataFactory import DepthMap, StereoSample
from kernel.StereoGeometry import Calib
from kernel.Tensor import BNState, ShapeError, read_tensor, write_tensor

logger = logging.getLogger(__name__)

DEPTH_SCALE = 256.0
SAMPLE_FILES = {
    'left': 'left.png',
    'right': 'right.png',
    'depth_left': 'depth_left.png',
    'depth_right': 'depth_right.png',
    'calib': 'calib.txt',
    'true_rho': 'true_rho.pfm',
    'true_rho_right': 'true_rho_right.pfm',
}
SAMPLE_DIR = re.compile(r'^\d{4,}$')


class SampleFormatError(Exception):
    def __init__(self, message, path=None):
        super().__init__('{}: {}'.format(path, message) if path else message)
        self.path = path


class CheckpointError(Exception):
    pass


def _open_image(path):
    try:
        with Image.open(path) as img:
            img.load()
            return img.copy()
    except FileNotFoundError:
        raise SampleFormatError('file not found', path)
    except (UnidentifiedImageError, OSError) as e:
        raise SampleFormatError('cannot decode image ({})'.format(e), path)


def read_image(path):
    """8-bit grayscale or RGB file as a 1 x H x W luma array in [0, 1]."""
    img = _open_image(path)
    if img.mode in ('RGB', 'RGBA', 'P', 'LA'):
        img = img.convert('L')
    if img.mode != 'L':
        raise SampleFormatError('expected an 8-bit grayscale or RGB image, got mode {}'.format(img.mode), path)
    return (np.asarray(img, dtype=np.float64) / 255.0)[None]


def write_image(path, image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    raw = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(raw).save(path)


def read_depth_png(path):
    """16-bit depth PNG: meters = raw / 256, raw 0 is invalid."""
    img = _open_image(path)
    if img.mode not in ('I;16', 'I;16B', 'I;16L', 'I'):
        raise SampleFormatError('expected a 16-bit depth image, got mode {}'.format(img.mode), path)
    raw = np.asarray(img).astype(np.int64)
    if raw.min() < 0 or raw.max() > 65535:
        raise SampleFormatError('depth values outside the 16-bit range', path)
    valid = raw > 0
    return DepthMap(np.where(valid, raw / DEPTH_SCALE, 0.0), valid)


def write_depth_png(path, depth, valid=None):
    """Inverse of ``read_depth_png``; depths beyond 255.996 m saturate."""
    if isinstance(depth, DepthMap):
        depth, valid = depth
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[0]
    valid = np.ones(depth.shape, dtype=bool) if valid is None else np.reshape(valid, depth.shape)
    raw = np.clip(np.round(depth * DEPTH_SCALE), 1, 65535)
    raw = np.where(valid & np.isfinite(depth) & (depth > 0), raw, 0).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_pfm(path):
    """Single-channel PFM (``Pf``) as a float64 H x W array, top row first."""
    try:
        with open(path, 'rb') as f:
            magic = f.readline().strip()
            if magic != b'Pf':
                raise SampleFormatError('not a single-channel PFM (magic {!r})'.format(magic), path)
            dims = f.readline().split()
            width, height = int(dims[0]), int(dims[1])
            scale = float(f.readline().strip())
            data = f.read()
    except FileNotFoundError:
        raise SampleFormatError('file not found', path)
    except (ValueError, IndexError):
        raise SampleFormatError('malformed PFM header', path)

    endian = '<' if scale < 0 else '>'
    if len(data) != 4 * width * height:
        raise SampleFormatError('expected {} float samples, found {} bytes'.format(width * height, len(data)), path)
    values = np.frombuffer(data, dtype=endian + 'f4').reshape(height, width)
    # PFM stores rows bottom-up
    return np.flipud(values).astype(np.float64)


def write_pfm(path, values):
    values = np.asarray(values)
    if values.ndim == 3:
        values = values[0]
    if values.ndim != 2:
        raise ShapeError('write_pfm expects an H x W map, got {}'.format(values.shape))
    height, width = values.shape
    with open(path, 'wb') as f:
        f.write(b'Pf\n')
        f.write('{} {}\n'.format(width, height).encode('ascii'))
        f.write(b'-1.0\n')
        f.write(np.ascontiguousarray(np.flipud(values), dtype='<f4').tobytes())


def read_calib(path):
    entries = {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                line = line.strip()
                if line and '=' in line:
                    key, value = line.split('=', 1)
                    entries[key.strip()] = value.strip()
    except FileNotFoundError:
        raise SampleFormatError('file not found', path)

    try:
        return Calib(float(entries['f_px']), float(entries['baseline_m']))
    except KeyError as e:
        raise SampleFormatError('missing calibration key {}'.format(e.args[0]), path)
    except ValueError as e:
        raise SampleFormatError(str(e), path)


def write_calib(path, calib):
    with open(path, 'w', encoding='utf-8') as f:
        f.write('f_px={!r}\n'.format(calib.f))
        f.write('baseline_m={!r}\n'.format(calib.b))


def load_kitti_sample(left_path, right_path, depth_l_path, depth_r_path, calib_path):
    I_l, I_r = read_image(left_path), read_image(right_path)
    Z_l, Z_r = read_depth_png(depth_l_path), read_depth_png(depth_r_path)
    calib = read_calib(calib_path)
    for path, extent in ((right_path, I_r.shape[1:]), (depth_l_path, Z_l.depth.shape),
                         (depth_r_path, Z_r.depth.shape)):
        if extent != I_l.shape[1:]:
            raise SampleFormatError('size {} does not match the left image {}'.format(extent, I_l.shape[1:]), path)
    return StereoSample(I_l=I_l, I_r=I_r, Z_l=Z_l, Z_r=Z_r, calib=calib)


def write_sample(folder, sample):
    os.makedirs(folder, exist_ok=True)
    paths = {key: os.path.join(folder, name) for key, name in SAMPLE_FILES.items()}
    write_image(paths['left'], sample.I_l)
    write_image(paths['right'], sample.I_r)
    write_depth_png(paths['depth_left'], sample.Z_l)
    write_depth_png(paths['depth_right'], sample.Z_r)
    write_calib(paths['calib'], sample.calib)
    if sample.true_rho_l is not None:
        write_pfm(paths['true_rho'], sample.true_rho_l)
    if sample.true_rho_r is not None:
        write_pfm(paths['true_rho_right'], sample.true_rho_r)
    return folder


def read_sample(folder):
    path = lambda key: os.path.join(folder, SAMPLE_FILES[key])
    sample = load_kitti_sample(path('left'), path('right'), path('depth_left'), path('depth_right'), path('calib'))
    if os.path.isfile(path('true_rho')):
        sample.true_rho_l = read_pfm(path('true_rho'))
    if os.path.isfile(path('true_rho_right')):
        sample.true_rho_r = read_pfm(path('true_rho_right'))
    return sample


def materialize(samples, out_dir):
    """Write samples as numbered folders 0000, 0001, ...; returns the folder paths."""
    os.makedirs(out_dir, exist_ok=True)
    folders = []
    for index, sample in enumerate(samples):
        folders.append(write_sample(os.path.join(out_dir, '{:04d}'.format(index)), sample))
    logger.debug('materialized %d samples under %s', len(folders), out_dir)
    return folders


class SampleDirectory:
    """Indexable view of a materialized dataset directory."""

    def __init__(self, path):
        if not os.path.isdir(path):
            raise SampleFormatError('not a dataset directory', path)
        self.path = path
        self.names = sorted(name for name in os.listdir(path)
                            if SAMPLE_DIR.match(name) and os.path.isdir(os.path.join(path, name)))
        if not self.names:
            raise SampleFormatError('no numbered sample folders', path)

    def __len__(self):
        return len(self.names)

    def __getitem__(self, index):
        return read_sample(os.path.join(self.path, self.names[index]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass
class Checkpoint:
    net_cfg: NetConfig
    params: OrderedDict
    bn_states: OrderedDict
    seed: int
    t: int
    velocities: OrderedDict = field(default_factory=OrderedDict)
    rng_state: dict = None
    extra: dict = field(default_factory=dict)


def _atomic_write(path, write):
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix='.tmp-', dir=folder)
    try:
        with os.fdopen(fd, 'wb') as f:
            write(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _checkpoint_tensors(ckpt):
    tensors = OrderedDict()
    for name, value in ckpt.params.items():
        tensors['param/' + name] = value
    for name, state in ckpt.bn_states.items():
        if state.populated:
            tensors['bn_mean/' + name] = state.running_mean
            tensors['bn_var/' + name] = state.running_var
    for name, value in ckpt.velocities.items():
        tensors['velocity/' + name] = value
    return tensors


def save_checkpoint(path, ckpt):
    """u64 manifest length, JSON manifest, then the tensor blobs in manifest order; written atomically."""
    tensors = _checkpoint_tensors(ckpt)
    manifest = OrderedDict((
        ('format', 'depthforge-checkpoint/1'),
        ('net', asdict(ckpt.net_cfg)),
        ('seed', ckpt.seed),
        ('t', ckpt.t),
        ('rng_state', ckpt.rng_state),
        ('bn', {name: [state.momentum, state.eps] for name, state in ckpt.bn_states.items()}),
        ('extra', ckpt.extra),
        ('tensors', [[name, list(value.shape)] for name, value in tensors.items()]),
    ))
    header = json.dumps(manifest, sort_keys=False).encode('utf-8')

    def write(f):
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        for value in tensors.values():
            write_tensor(f, value)

    _atomic_write(path, write)
    logger.debug('checkpoint t=%d written to %s', ckpt.t, path)


def load_checkpoint(path):
    try:
        with open(path, 'rb') as f:
            raw = f.read(8)
            if len(raw) != 8:
                raise CheckpointError('{}: truncated checkpoint'.format(path))
            length, = struct.unpack('<Q', raw)
            manifest = json.loads(f.read(length).decode('utf-8'), object_pairs_hook=OrderedDict)
            blobs = OrderedDict()
            for name, shape in manifest['tensors']:
                value = read_tensor(f)
                if list(value.shape) != shape:
                    raise CheckpointError('{}: tensor {} has shape {}, manifest says {}'.format(
                        path, name, value.shape, shape))
                blobs[name] = value
    except FileNotFoundError:
        raise CheckpointError('{}: no such checkpoint'.format(path))
    except (ValueError, KeyError, ShapeError) as e:
        raise CheckpointError('{}: corrupt checkpoint ({})'.format(path, e))

    params, velocities, bn_states = OrderedDict(), OrderedDict(), OrderedDict()
    for name, (momentum, eps) in manifest['bn'].items():
        state = BNState(len(blobs['param/{}.gamma'.format(name)]), momentum, eps)
        if 'bn_mean/' + name in blobs:
            state.running_mean = blobs['bn_mean/' + name]
            state.running_var = blobs['bn_var/' + name]
        bn_states[name] = state
    for key, value in blobs.items():
        kind, name = key.split('/', 1)
        if kind == 'param':
            params[name] = value
        elif kind == 'velocity':
            velocities[name] = value

    return Checkpoint(net_cfg=NetConfig(**manifest['net']), params=params, bn_states=bn_states,
                      seed=manifest['seed'], t=manifest['t'], velocities=velocities,
                      rng_state=manifest['rng_state'], extra=manifest['extra'])


if __name__ == "__main__":
    pass
