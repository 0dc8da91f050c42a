import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type

from dotenv import dotenv_values

from app.models import CACHED_STEPS
from app.services.engine import EngineSettings, LatencyModel, Mode, PricingModel, StepBins
from app.services.replacement_policies import PolicyName
from app.services.workload import LatentSpec
from app.utils.validation import (
    ValidationError, parse_byte_size, validate_bool, validate_float, validate_float_list,
    validate_integer, validate_positive_integer
)

basedir = Path(__file__).parent.parent
logger = logging.getLogger(__name__)

CONFIG_PATH_ENV = 'LATENT_CACHE_CONFIG'
CONFIG_NAME_ENV = 'LATENT_CACHE_ENV'
LOG_LEVEL_ENV = 'LATENT_CACHE_LOG_LEVEL'


class Config:
    """Base configuration."""
    APP_VERSION = '1.0.0'

    # Latent geometry: a 64-frame 320x512 video downscaled 8x by the VAE
    FRAMES = 64
    HEIGHT = 40
    WIDTH = 64
    CHANNELS = 4
    EMBED_DIM = 512

    # A prompt pair counts as similar from a cosine score of 0.65
    HIT_THRESHOLD = 0.65
    # Frames at least this similar to an earlier key frame are dropped
    COMPRESS_THRESHOLD = 0.99
    # Lower score edges of the bins that map to steps 5, 10, 15, 20, 25
    STEP_BINS = (0.65, 0.72, 0.79, 0.86, 0.93)

    # 242 s for a 50-step generation on one A100
    SECONDS_PER_STEP = 4.84
    TOTAL_STEPS = 50
    # Vector lookup and object/background extraction times per request
    LOOKUP_SECONDS = 0.14
    EXTRACT_SECONDS = 3.6
    STITCH_SECONDS = 0.0

    # On-demand A100 price in dollars per hour; storage has no default price
    GPU_RATE = 3.67
    STORAGE_RATE = None
    PROVISIONED_STORAGE_GB = 0.0

    CAPACITY_BYTES = 1024 ** 3
    POLICY = 'lrbu'
    MODE = 'flexcache'
    STRICT_ADMISSION = False
    CHECK_INVARIANTS = False

    NOISE_SIGMA = 0.01
    REDUNDANCY_BY_STEP = (0.9, 0.8, 0.6, 0.4, 0.25)
    ALPHA_SCHEDULE = (1.0, 0.9, 0.8, 0.7, 0.6)

    WARMUP_REQUESTS = 0
    WINDOW = 1000
    SEED = 0


class DevelopmentConfig(Config):
    """Development configuration."""
    pass


class TestingConfig(Config):
    """Testing configuration: tiny latents, bookkeeping verified after every mutation."""
    FRAMES = 8
    HEIGHT = 4
    WIDTH = 4
    CHANNELS = 2
    EMBED_DIM = 64
    CAPACITY_BYTES = 1024 ** 2
    CHECK_INVARIANTS = True
    WINDOW = 10


class BenchmarkConfig(Config):
    """Policy sweeps: reduced latent geometry so long traces replay quickly."""
    FRAMES = 16
    HEIGHT = 8
    WIDTH = 8
    CHANNELS = 4
    EMBED_DIM = 128


config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'benchmark': BenchmarkConfig,
    'default': DevelopmentConfig
}

CONFIG_KEYS = (
    'CAPACITY_BYTES', 'POLICY', 'MODE', 'HIT_THRESHOLD', 'COMPRESS_THRESHOLD', 'STEP_BINS',
    'SECONDS_PER_STEP', 'TOTAL_STEPS', 'LOOKUP_SECONDS', 'EXTRACT_SECONDS', 'STITCH_SECONDS',
    'GPU_RATE', 'STORAGE_RATE', 'PROVISIONED_STORAGE_GB', 'FRAMES', 'HEIGHT', 'WIDTH',
    'CHANNELS', 'EMBED_DIM', 'NOISE_SIGMA', 'REDUNDANCY_BY_STEP', 'ALPHA_SCHEDULE',
    'WARMUP_REQUESTS', 'WINDOW', 'SEED', 'STRICT_ADMISSION', 'CHECK_INVARIANTS',
)


@dataclass(frozen=True)
class RunConfig:
    """Everything one simulation run needs, fully validated."""
    capacity_bytes: int
    policy: PolicyName
    engine: EngineSettings
    pricing: PricingModel
    latent_spec: LatentSpec
    embed_dim: int
    warmup_requests: int = 0
    window: int = 1000
    seed: int = 0
    check_invariants: bool = False
    trace: Optional[Path] = None
    out_dir: Optional[Path] = None

    @property
    def mode(self) -> Mode:
        return self.engine.mode

    @property
    def latency(self) -> LatencyModel:
        return self.engine.latency

    def to_dict(self) -> Dict[str, Any]:
        return {
            'capacity_bytes': self.capacity_bytes,
            'policy': self.policy.value,
            'mode': self.engine.mode.value,
            'hit_threshold': self.engine.hit_threshold,
            'compress_threshold': self.engine.compress_threshold,
            'step_bins': list(self.engine.bins.edges),
            'seconds_per_step': self.latency.t_per_step,
            'total_steps': self.latency.total_steps,
            'lookup_seconds': self.latency.t_lookup,
            'extract_seconds': self.latency.t_extract,
            'stitch_seconds': self.latency.t_stitch,
            'gpu_rate': self.pricing.gpu_rate,
            'storage_rate': self.pricing.storage_rate,
            'provisioned_storage_gb': self.pricing.provisioned_storage,
            'strict_admission': self.engine.strict_admission,
            'latent_spec': self.latent_spec.to_dict(),
            'embed_dim': self.embed_dim,
            'warmup_requests': self.warmup_requests,
            'window': self.window,
            'seed': self.seed,
        }


def get_config_class(config_name: Optional[str] = None) -> Type[Config]:
    name = config_name or os.environ.get(CONFIG_NAME_ENV, 'default')
    if name not in config:
        raise ValidationError(f"Unknown configuration '{name}', expected one of: "
                              f"{', '.join(sorted(config))}", CONFIG_NAME_ENV)
    return config[name]


def read_config_file(path) -> Dict[str, str]:
    """
    Read a KEY=VALUE file (comments and blank lines allowed).

    Raises:
        ValidationError: if the file is missing or holds an unknown key
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Config file does not exist: {path}", 'config')
    raw = dotenv_values(path)
    values = {}
    for key, value in raw.items():
        upper = key.strip().upper()
        if upper not in CONFIG_KEYS:
            raise ValidationError(f"Unknown config key '{key}' in {path}", key)
        values[upper] = value
    logger.info(f"Loaded {len(values)} settings from {path}")
    return values


def _per_step(value: Any, field_name: str) -> Dict[int, float]:
    numbers = validate_float_list(value, field_name, min_value=0.0, length=len(CACHED_STEPS))
    return dict(zip(CACHED_STEPS, numbers))


def _optional_float(value: Any, field_name: str) -> Optional[float]:
    if value is None or (isinstance(value, str) and value.strip().lower() in ('', 'none')):
        return None
    return validate_float(value, field_name, min_value=0.0)


def build_run_config(values: Mapping[str, Any], trace=None, out_dir=None) -> RunConfig:
    """Validate a complete KEY -> value mapping into a RunConfig."""
    latency = LatencyModel(
        t_per_step=validate_float(values['SECONDS_PER_STEP'], 'SECONDS_PER_STEP', min_value=0.0),
        total_steps=validate_integer(values['TOTAL_STEPS'], 'TOTAL_STEPS',
                                     min_value=max(CACHED_STEPS)),
        t_lookup=validate_float(values['LOOKUP_SECONDS'], 'LOOKUP_SECONDS', min_value=0.0),
        t_extract=validate_float(values['EXTRACT_SECONDS'], 'EXTRACT_SECONDS', min_value=0.0),
        t_stitch=validate_float(values['STITCH_SECONDS'], 'STITCH_SECONDS', min_value=0.0),
    )
    edges = validate_float_list(values['STEP_BINS'], 'STEP_BINS', min_value=-1.0, max_value=1.0,
                                length=len(CACHED_STEPS))
    engine = EngineSettings(
        mode=Mode.parse(values['MODE']),
        hit_threshold=validate_float(values['HIT_THRESHOLD'], 'HIT_THRESHOLD',
                                     min_value=-1.0, max_value=1.0),
        compress_threshold=validate_float(values['COMPRESS_THRESHOLD'], 'COMPRESS_THRESHOLD',
                                          min_value=0.0, max_value=1.0, min_exclusive=True),
        bins=StepBins(edges=tuple(edges)),
        latency=latency,
        strict_admission=validate_bool(values['STRICT_ADMISSION'], 'STRICT_ADMISSION'),
    )
    pricing = PricingModel(
        gpu_rate=validate_float(values['GPU_RATE'], 'GPU_RATE', min_value=0.0),
        storage_rate=_optional_float(values['STORAGE_RATE'], 'STORAGE_RATE'),
        provisioned_storage=validate_float(values['PROVISIONED_STORAGE_GB'],
                                           'PROVISIONED_STORAGE_GB', min_value=0.0),
    )
    redundancy = _per_step(values['REDUNDANCY_BY_STEP'], 'REDUNDANCY_BY_STEP')
    if any(r > 1.0 for r in redundancy.values()):
        raise ValidationError("REDUNDANCY_BY_STEP values must be in [0, 1]", 'REDUNDANCY_BY_STEP')
    seed = validate_integer(values['SEED'], 'SEED', min_value=0)
    latent_spec = LatentSpec(
        frames=validate_positive_integer(values['FRAMES'], 'FRAMES', max_value=0xFFFF),
        height=validate_positive_integer(values['HEIGHT'], 'HEIGHT', max_value=0xFFFF),
        width=validate_positive_integer(values['WIDTH'], 'WIDTH', max_value=0xFFFF),
        channels=validate_positive_integer(values['CHANNELS'], 'CHANNELS', max_value=0xFFFF),
        redundancy_by_step=redundancy,
        alpha_schedule=_per_step(values['ALPHA_SCHEDULE'], 'ALPHA_SCHEDULE'),
        noise_sigma=validate_float(values['NOISE_SIGMA'], 'NOISE_SIGMA', min_value=0.0),
        seed=seed,
    )
    return RunConfig(
        capacity_bytes=parse_byte_size(values['CAPACITY_BYTES'], 'CAPACITY_BYTES'),
        policy=PolicyName.parse(values['POLICY']),
        engine=engine,
        pricing=pricing,
        latent_spec=latent_spec,
        embed_dim=validate_positive_integer(values['EMBED_DIM'], 'EMBED_DIM', max_value=0xFFFF),
        warmup_requests=validate_integer(values['WARMUP_REQUESTS'], 'WARMUP_REQUESTS', min_value=0),
        window=validate_positive_integer(values['WINDOW'], 'WINDOW'),
        seed=seed,
        check_invariants=validate_bool(values['CHECK_INVARIANTS'], 'CHECK_INVARIANTS'),
        trace=Path(trace) if trace is not None else None,
        out_dir=Path(out_dir) if out_dir is not None else None,
    )


def load_run_config(config_name: Optional[str] = None, config_file=None,
                    overrides: Optional[Mapping[str, Any]] = None,
                    trace=None, out_dir=None) -> RunConfig:
    """
    Class defaults, then the KEY=VALUE file, then explicit overrides (None values are skipped).

    The file path falls back to the LATENT_CACHE_CONFIG environment variable. Nirvana runs
    use LCBFU unless a policy is set explicitly.
    """
    cls = get_config_class(config_name)
    values: Dict[str, Any] = {key: getattr(cls, key) for key in CONFIG_KEYS}
    explicit = set()

    path = config_file or os.environ.get(CONFIG_PATH_ENV)
    if path:
        from_file = read_config_file(path)
        values.update(from_file)
        explicit.update(from_file)

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        upper = key.upper()
        if upper not in CONFIG_KEYS:
            raise ValidationError(f"Unknown setting '{key}'", key)
        values[upper] = value
        explicit.add(upper)

    if 'POLICY' not in explicit and Mode.parse(values['MODE']) == Mode.NIRVANA:
        values['POLICY'] = PolicyName.LCBFU.value

    return build_run_config(values, trace=trace, out_dir=out_dir)
