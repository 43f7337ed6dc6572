"""Run configuration records and the flat ``key = value`` config format.

A run config file is a flat list of ``key = value`` lines shared by the
network, training, scene and benchmark records; every key belongs to
exactly one record. Lines starting with ``#`` are comments.
"""
from collections import OrderedDict
from dataclasses import MISSING, asdict, dataclass, field, fields
from fractions import Fraction
from typing import Tuple, get_type_hints, get_origin, get_args


class ConfigError(Exception):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass
class NetConfig:
    in_channels: int = 1
    base_width: int = 64
    blocks_per_stage: Tuple[int, ...] = (3, 4, 6, 3)
    width_multiplier: float = 1.0
    use_long_skips: bool = True
    dropout_p: float = 0.5
    rho_init: float = 5e-4
    upproject_kernel: int = 5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        self.blocks_per_stage = tuple(self.blocks_per_stage)
        if self.in_channels < 1:
            raise ConfigError('in_channels must be >= 1', 'in_channels')
        if not self.blocks_per_stage or min(self.blocks_per_stage) < 1:
            raise ConfigError('blocks_per_stage needs at least one stage of at least one block', 'blocks_per_stage')
        if not 0 < self.width_multiplier <= 1:
            raise ConfigError('width_multiplier must lie in (0, 1]', 'width_multiplier')
        if self.width < 1:
            raise ConfigError('base_width * width_multiplier rounds to zero channels', 'width_multiplier')
        if not 0 <= self.dropout_p < 1:
            raise ConfigError('dropout_p must lie in [0, 1)', 'dropout_p')
        if self.rho_init <= 0:
            raise ConfigError('rho_init must be > 0', 'rho_init')
        if self.upproject_kernel < 1 or self.upproject_kernel % 2 == 0:
            raise ConfigError('upproject_kernel must be odd and >= 1', 'upproject_kernel')

    @property
    def width(self):
        """Channels of the first stage after scaling."""
        return int(round(self.base_width * self.width_multiplier))

    @property
    def num_stages(self):
        return len(self.blocks_per_stage)

    @property
    def bottleneck_scale(self):
        return 2 ** (self.num_stages + 1)


@dataclass
class TrainConfig:
    batch_size: int
    max_epochs: int
    beta: float
    gamma: float
    seed: int
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 4e-5
    reg_weight: float = 1.0
    sigma: float = 1.0
    eta: float = 1.0 / 255.0
    unsup_excludes_gt: bool = False
    normalize_terms: bool = True
    early_stop_patience: int = 3
    supervised_norm: str = 'berhu'
    rho_min: float = 1e-4
    augment: bool = True
    alpha_range: Tuple[float, float] = (0.8, 1.2)
    gamma_range: Tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        self.alpha_range = tuple(self.alpha_range)
        self.gamma_range = tuple(self.gamma_range)
        if self.lr <= 0:
            raise ConfigError('lr must be > 0', 'lr')
        if not 0 <= self.momentum < 1:
            raise ConfigError('momentum must lie in [0, 1)', 'momentum')
        if self.weight_decay < 0:
            raise ConfigError('weight_decay must be >= 0', 'weight_decay')
        if self.batch_size < 1:
            raise ConfigError('batch_size must be >= 1', 'batch_size')
        if self.max_epochs < 1:
            raise ConfigError('max_epochs must be >= 1', 'max_epochs')
        for key in ('beta', 'gamma', 'reg_weight', 'sigma', 'eta'):
            if getattr(self, key) < 0:
                raise ConfigError('{} must be >= 0'.format(key), key)
        if self.early_stop_patience < 1:
            raise ConfigError('early_stop_patience must be >= 1', 'early_stop_patience')
        if self.supervised_norm not in ('berhu', 'l2'):
            raise ConfigError('supervised_norm must be berhu or l2', 'supervised_norm')
        if self.rho_min <= 0:
            raise ConfigError('rho_min must be > 0', 'rho_min')
        for key in ('alpha_range', 'gamma_range'):
            lo, hi = getattr(self, key)
            if not 0 < lo <= hi:
                raise ConfigError('{} must be an ordered positive pair'.format(key), key)


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 32
    num_layers: int = 4
    depth_range: Tuple[float, float] = (3.0, 60.0)
    f_px: float = 37.0
    baseline_m: float = 0.54
    texture_contrast: float = 0.35
    gt_density: float = 0.3
    gt_rows_band: float = 0.6

    def __post_init__(self):
        self.depth_range = tuple(self.depth_range)
        if self.width < 1 or self.height < 1:
            raise ConfigError('scene size must be positive', 'width')
        if self.num_layers < 1:
            raise ConfigError('num_layers must be >= 1', 'num_layers')
        lo, hi = self.depth_range
        if not 1 < lo < hi < 80:
            raise ConfigError('depth_range must lie within (1, 80) m and be ordered', 'depth_range')
        if self.f_px <= 0 or self.baseline_m <= 0:
            raise ConfigError('f_px and baseline_m must be > 0', 'f_px')
        if not 0 < self.texture_contrast < 0.5:
            raise ConfigError('texture_contrast must lie in (0, 0.5)', 'texture_contrast')
        if not 0 < self.gt_density <= 1:
            raise ConfigError('gt_density must lie in (0, 1]', 'gt_density')
        if not 0 < self.gt_rows_band <= 1:
            raise ConfigError('gt_rows_band must lie in (0, 1]', 'gt_rows_band')


@dataclass
class BenchConfig:
    train_scenes: int = 64
    val_scenes: int = 16
    test_scenes: int = 16

    def __post_init__(self):
        for key in ('train_scenes', 'val_scenes', 'test_scenes'):
            if getattr(self, key) < 1:
                raise ConfigError('{} must be >= 1'.format(key), key)


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = None
    scene: SceneConfig = field(default_factory=SceneConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def snapshot(self):
        """Flat key/value view of every record, in file order."""
        flat = OrderedDict()
        for record in (self.net, self.train, self.scene, self.bench):
            if record is not None:
                flat.update(record_snapshot(record))
        return flat


def record_snapshot(record):
    return OrderedDict((key, _format_value(value)) for key, value in asdict(record).items())


_RECORDS = OrderedDict((('net', NetConfig), ('train', TrainConfig), ('scene', SceneConfig), ('bench', BenchConfig)))


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ','.join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_scalar(tp, raw, key):
    try:
        if tp is bool:
            lowered = raw.lower()
            if lowered not in ('true', 'false'):
                raise ValueError(raw)
            return lowered == 'true'
        if tp is int:
            return int(raw)
        if tp is float:
            return float(Fraction(raw)) if '/' in raw else float(raw)
        return raw
    except (ValueError, ZeroDivisionError):
        raise ConfigError('cannot parse {} = {!r} as {}'.format(key, raw, tp.__name__), key)


def _parse_value(tp, raw, key):
    if get_origin(tp) is tuple:
        args = get_args(tp)
        parts = [p.strip() for p in raw.split(',') if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(args[0], p, key) for p in parts)
        if len(parts) != len(args):
            raise ConfigError('{} expects {} comma separated values'.format(key, len(args)), key)
        return tuple(_parse_scalar(a, p, key) for a, p in zip(args, parts))
    return _parse_scalar(tp, raw, key)


def read_flat_config(path):
    """Read ``key = value`` lines into an ordered dict of raw strings."""
    entries = OrderedDict()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError('cannot read config file {}: {}'.format(path, e.strerror))

    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError('{}:{}: expected "key = value"'.format(path, number))
        key, value = (part.strip() for part in line.split('=', 1))
        if key in entries:
            raise ConfigError('{}:{}: duplicate key {}'.format(path, number, key), key)
        entries[key] = value
    return entries


def write_flat_config(flat, path):
    with open(path, 'w', encoding='utf-8') as f:
        for key, value in flat.items():
            f.write('{} = {}\n'.format(key, value))


def build_config(entries, require_train=True):
    """Build a RunConfig from raw flat entries, reporting the first bad key."""
    owners = {}
    for name, cls in _RECORDS.items():
        for f in fields(cls):
            owners[f.name] = name

    for key in entries:
        if key not in owners:
            raise ConfigError('unknown config key: {}'.format(key), key)

    records = {}
    for name, cls in _RECORDS.items():
        hints = get_type_hints(cls)
        kwargs = {}
        for f in fields(cls):
            if f.name in entries:
                kwargs[f.name] = _parse_value(hints[f.name], entries[f.name], f.name)
        if name == 'train':
            missing = [f.name for f in fields(cls) if f.name not in kwargs and _is_required(f)]
            if missing:
                if not require_train and len(missing) == len([f for f in fields(cls) if _is_required(f)]):
                    records[name] = None
                    continue
                raise ConfigError('missing config key: {}'.format(missing[0]), missing[0])
        records[name] = cls(**kwargs)
    return RunConfig(**records)


def _is_required(f):
    return f.default is MISSING and f.default_factory is MISSING


def load_config(path, require_train=True):
    return build_config(read_flat_config(path), require_train=require_train)


if __name__ == "__main__":
    pass
