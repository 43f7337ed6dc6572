from .Settings import Settings, SettingsError

# Get Settings values
settings = Settings()

from .RunConfig import ConfigError, NetConfig, TrainConfig, SceneConfig, BenchConfig, RunConfig
from .RunConfig import build_config, load_config, read_flat_config, record_snapshot, write_flat_config
