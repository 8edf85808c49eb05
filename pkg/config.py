import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from errors import ConfigError


# --- run configuration -----------------------------------------------------------------

@dataclass
class DataConfig:
    seed: int = 0
    species_count: int = 8
    records_per_gait: int = 25
    min_length: int = 40
    max_length: int = 120
    holdout_species: list = field(default_factory=list)
    split_seed: int = 0
    container: str = 'data/toy.umo4'
    manifest: str = 'data/toy_split.json'
    workers: int = 1


@dataclass
class CgaeConfig:
    latent_dim: int = 16
    hidden: int = 64
    beta: float = 1e-3
    lr: float = 1e-3
    steps: int = 2000


@dataclass
class AeConfig:
    width: int = 128
    latent_dim: int = 64
    res_blocks: int = 2
    lambda_morph_recon: float = 1.0
    normalize_features: bool = True
    lr: float = 2e-4
    steps: int = 2000
    batch_size: int = 16


@dataclass
class McmConfig:
    hidden: int = 128
    lr: float = 1e-3
    steps: int = 1500
    batch_size: int = 32


@dataclass
class GenConfig:
    num_blocks: int = 4
    num_heads: int = 4
    velocity_hidden: int = 128
    velocity_blocks: int = 2
    lambda_morph_guide: float = 0.1
    cond_drop_prob: float = 0.1
    use_word_features: bool = True
    use_tpose_prior: bool = True
    lr: float = 2e-4
    steps: int = 3000
    batch_size: int = 16
    rounds: int = 8
    ode_steps: int = 16
    omega: float = 3.0


@dataclass
class MatcherConfig:
    hidden: int = 128
    feature_dim: int = 64
    temperature: float = 0.07
    lr: float = 1e-3
    steps: int = 1000
    batch_size: int = 32


@dataclass
class EvalConfig:
    pool_size: int = 32
    top_k: int = 3
    diversity_pairs: int = 100
    samples: int = 64
    repeats: int = 1
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = 'runs/default'
    embedding_dim: int = 64
    embedding_seed: int = 0
    species_sidecar: str = ''
    text_sidecar: str = ''
    data: DataConfig = field(default_factory=DataConfig)
    cgae: CgaeConfig = field(default_factory=CgaeConfig)
    ae: AeConfig = field(default_factory=AeConfig)
    mcm: McmConfig = field(default_factory=McmConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        for section in (self.cgae, self.ae, self.mcm, self.gen, self.matcher):
            name = type(section).__name__
            if not section.lr > 0:
                raise ConfigError(f'{name}.lr must be > 0, got {section.lr}')
            if section.steps < 0:
                raise ConfigError(f'{name}.steps must be >= 0, got {section.steps}')
            if getattr(section, 'batch_size', 1) < 1:
                raise ConfigError(f'{name}.batch_size must be >= 1, got {section.batch_size}')
        if self.gen.rounds < 1 or self.gen.ode_steps < 1:
            raise ConfigError('gen.rounds and gen.ode_steps must be >= 1')
        if not 0 <= self.gen.cond_drop_prob < 1:
            raise ConfigError(f'gen.cond_drop_prob must be in [0, 1), got {self.gen.cond_drop_prob}')
        if self.ae.latent_dim % self.gen.num_heads:
            raise ConfigError('ae.latent_dim must be divisible by gen.num_heads')
        if self.data.species_count < 2:
            raise ConfigError('data.species_count must be >= 2')
        if not 18 < self.data.min_length <= self.data.max_length < 300:
            raise ConfigError('data lengths must satisfy 18 < min_length <= max_length < 300')
        return self

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, values, path):
    if not isinstance(values, dict):
        raise ConfigError(f'{path or "config"} must be a JSON object')
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f'unknown config key(s) at {path or "top level"}: {unknown}')
    kwargs = {}
    for name, value in values.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f'{path}{name}.')
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _merge(base, overrides):
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def run_config_from_dict(values, overrides=None):
    values = _merge(values or {}, overrides or {})
    cfg = _build(RunConfig, values, '')
    if os.environ.get('CROSSMOTION_RUN_DIR'):
        cfg.run_dir = os.environ['CROSSMOTION_RUN_DIR']
    return cfg.validate()


def load_run_config(path=None, overrides=None):
    values = {}
    if path:
        try:
            with open(path) as f:
                values = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f'{path} is not valid JSON: {exc}') from exc
    return run_config_from_dict(values, overrides)


# --- service profiles ------------------------------------------------------------------

class Config:
    SECRET_KEY = os.environ.get('SECRET_KEY') or 'dev-secret-key-change-in-production'
    MAX_CONTENT_LENGTH = 64 * 1024  # generation requests are small JSON bodies
    CHECKPOINT_PATH = os.environ.get('CROSSMOTION_CHECKPOINT') or 'runs/default/model.umck'
    RUN_DIR = os.environ.get('CROSSMOTION_RUN_DIR') or 'runs/default'
    MAX_GENERATE_LENGTH = 296
    RUN_OVERRIDES = {}


class DevelopmentConfig(Config):
    DEBUG = True


class TestingConfig(Config):
    TESTING = True
    CHECKPOINT_PATH = None
    RUN_OVERRIDES = {
        'cgae': {'latent_dim': 4, 'hidden': 8, 'steps': 3},
        'ae': {'width': 16, 'latent_dim': 8, 'res_blocks': 1, 'steps': 3, 'batch_size': 4},
        'mcm': {'hidden': 16, 'steps': 3, 'batch_size': 4},
        'gen': {'num_blocks': 1, 'num_heads': 2, 'velocity_hidden': 16, 'velocity_blocks': 1,
                'rounds': 2, 'ode_steps': 2, 'steps': 3, 'batch_size': 4},
        'matcher': {'hidden': 16, 'feature_dim': 8, 'steps': 3, 'batch_size': 4},
        'eval': {'samples': 8, 'pool_size': 4, 'diversity_pairs': 2},
        'embedding_dim': 16,
    }


class ProductionConfig(Config):
    DEBUG = False


config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'production': ProductionConfig,
    'default': DevelopmentConfig
}
