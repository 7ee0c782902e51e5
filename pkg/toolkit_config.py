#!/usr/bin/env python3
"""
Toolkit Configuration
Loads config.yaml (plus .env overrides), configures logging, and turns the
named presets and per-command sections into typed settings. Every rejection
is a ConfigError naming the offending field.
"""

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

from complementarity import NORMALIZER_FLOOR, NORMALIZER_MODES, EstimatorSettings, SubsetSpec
from datagen import (MultiModalConfig, MultiModalDataset, PoolConfig, RemixConfig, TwoModalConfig,
                     gen_multi_modal, gen_remix, gen_two_modal)
from errors import ConfigError, ToolkitError
from mine_estimator import MineTrainConfig
from missing_harness import STRATEGIES, StrategyConfig
from numeric_core import OptimizerSettings


DEFAULT_CONFIG_PATH = 'config.yaml'
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')
OUTPUT_FORMATS = ('json', 'csv', 'excel', 'html')
GENERATORS = ('two_modal', 'multi_modal', 'remix')
SWEEP_PARAMETERS = ('alpha', 'sigma')


# ============================================================================
# Loading And Logging
# ============================================================================

def setup_logging(config: dict) -> logging.Logger:
    """Configure a file handler and an optional console handler from the logging section."""
    log_config = config.get('logging', {}) or {}
    log_level = getattr(logging, str(log_config.get('level', 'INFO')).upper())

    log_file = log_config.get('file', './logs/complementarity.log')
    os.makedirs(os.path.dirname(log_file) or '.', exist_ok=True)

    handlers = []
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(log_level)
    file_handler.setFormatter(logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    ))
    handlers.append(file_handler)

    if log_config.get('console', True):
        console_handler = logging.StreamHandler()
        console_handler.setLevel(log_level)
        console_handler.setFormatter(logging.Formatter('%(levelname)s: %(message)s'))
        handlers.append(console_handler)

    logging.basicConfig(level=log_level, handlers=handlers, force=True)
    return logging.getLogger('complementarity')


def load_configuration(path: Optional[str] = None) -> dict:
    """
    Load YAML configuration and apply environment overrides.

    The file is `path`, else $COMPLEMENTARITY_CONFIG, else ./config.yaml.
    A missing default file yields an empty config; a missing explicit one is
    an error.
    """
    load_dotenv()

    explicit = path or os.getenv('COMPLEMENTARITY_CONFIG')
    config_path = Path(explicit or DEFAULT_CONFIG_PATH)
    if config_path.exists():
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError('config', f"{config_path} is not valid YAML: {e}")
    elif explicit:
        raise ConfigError('config', f"config file not found: {config_path}")
    else:
        config = {}
    if not isinstance(config, dict):
        raise ConfigError('config', f"{config_path} must contain a mapping")

    config['output'] = config.get('output') or {}
    config['output']['output_dir'] = os.getenv('COMPLEMENTARITY_OUTPUT_ROOT',
                                               config['output'].get('output_dir', './runs'))
    config['logging'] = config.get('logging') or {}
    level = os.getenv('COMPLEMENTARITY_LOG_LEVEL', config['logging'].get('level', 'INFO'))
    if str(level).upper() not in LOG_LEVELS:
        raise ConfigError('logging.level', f"must be one of {LOG_LEVELS}, got {level!r}")
    config['logging']['level'] = str(level).upper()

    formats = config['output'].get('formats', ['json', 'csv'])
    for fmt in formats:
        if fmt not in OUTPUT_FORMATS:
            raise ConfigError('output.formats', f"unknown format '{fmt}', expected {OUTPUT_FORMATS}")
    config['output']['formats'] = list(formats)
    return config


def _section(config: dict, name: str) -> dict:
    section = config.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigError(name, "must be a mapping")
    return section


def _typed(path: str, build, *args, **kwargs):
    """Run a constructor and report its rejection against a config path."""
    try:
        return build(*args, **kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path}.{e.field}", e.message)
    except (ToolkitError, TypeError, ValueError) as e:
        raise ConfigError(path, str(e))


# ============================================================================
# Presets
# ============================================================================

@dataclass
class Preset:
    name: str
    generator: str
    gen: Dict[str, Any]
    estimator: EstimatorSettings
    model: Dict[str, Any]
    remix: Dict[str, Any] = field(default_factory=dict)

    @property
    def model_optimizer(self) -> OptimizerSettings:
        return _typed(f"presets.{self.name}.model.optimizer", OptimizerSettings.from_dict,
                      self.model.get('optimizer') or {})


def _estimator_settings(path: str, data: dict, run: dict) -> EstimatorSettings:
    train = _typed(path, MineTrainConfig,
                   epochs=int(data.get('epochs', 500)),
                   batch_size=int(data.get('batch_size', 100)),
                   optimizer=_typed(f"{path}.optimizer", OptimizerSettings.from_dict,
                                    data.get('optimizer') or {}),
                   eval_window_frac=float(data.get('eval_window_frac', 0.1)),
                   clamp_nonnegative=bool(data.get('clamp_nonnegative', False)),
                   replicates=int(data.get('replicates', 3)),
                   seed=int(run.get('seed', 0)),
                   ema_rate=data.get('ema_rate'))
    hidden = tuple(int(h) for h in data.get('hidden', (1000, 500, 100)))
    label_hidden = tuple(int(h) for h in data.get('label_hidden', (1000, 200, 10, 12)))
    if not hidden:
        raise ConfigError(f"{path}.hidden", "critic layouts need at least one hidden layer")
    if len(label_hidden) < 2:
        raise ConfigError(f"{path}.label_hidden", "label critics need a hidden layer after the label slot")
    expected = data.get('expected_dims')
    return EstimatorSettings(
        hidden=hidden,
        label_hidden=label_hidden,
        label_concat_after=data.get('label_concat_after'),
        train=train,
        expected_dims=None if expected is None else tuple(int(d) for d in expected),
        parallel=int(run.get('parallel', 1)),
        show_progress=bool(run.get('show_progress', False)),
    )


def resolve_preset(config: dict, name: str) -> Preset:
    presets = _section(config, 'presets')
    if name not in presets:
        raise ConfigError('preset', f"unknown preset '{name}', available: {sorted(presets)}")
    data = presets[name] or {}
    path = f"presets.{name}"
    generator = data.get('generator', 'two_modal')
    if generator not in GENERATORS:
        raise ConfigError(f"{path}.generator", f"must be one of {GENERATORS}, got '{generator}'")
    run = _section(config, 'run')
    preset = Preset(
        name=name,
        generator=generator,
        gen=dict(data.get('gen') or {}),
        estimator=_estimator_settings(f"{path}.estimator", data.get('estimator') or {}, run),
        model=dict(data.get('model') or {}),
        remix=dict(data.get('remix') or {}),
    )
    if preset.estimator.expected_dims is None:
        preset.estimator = replace(preset.estimator, expected_dims=preset_dims(preset))
    return preset


def preset_dims(preset: Preset) -> Tuple[int, ...]:
    """Modality widths the preset's generator emits."""
    cfg = generator_configs(preset, seed=0)
    if preset.generator == 'two_modal':
        return cfg.d1, cfg.d2
    if preset.generator == 'multi_modal':
        return (cfg.d1,) * cfg.m
    pool, _ = cfg
    return pool.dim_a, pool.dim_b


def generator_configs(preset: Preset, seed: int, alpha: Optional[float] = None,
                      sigma: Optional[float] = None):
    """Typed generator config(s) for a preset with per-run overrides."""
    path = f"presets.{preset.name}.gen"
    gen = dict(preset.gen, seed=seed)
    if preset.generator == 'two_modal':
        if alpha is not None:
            gen['alpha'] = alpha
        return _typed(path, TwoModalConfig.from_dict, gen)
    if preset.generator == 'multi_modal':
        if alpha is not None:
            gen['alpha'] = alpha
        return _typed(path, MultiModalConfig.from_dict, gen)
    remix = dict(preset.remix, seed=seed, num_classes=gen.get('num_classes', 10))
    if sigma is not None:
        remix['sigma'] = sigma
    return (_typed(path, PoolConfig.from_dict, gen),
            _typed(f"presets.{preset.name}.remix", RemixConfig.from_dict, remix))


def generate(preset: Preset, seed: int, alpha: Optional[float] = None, sigma: Optional[float] = None,
             show_progress: bool = False) -> Tuple[MultiModalDataset, MultiModalDataset]:
    cfg = generator_configs(preset, seed, alpha, sigma)
    if preset.generator == 'two_modal':
        return gen_two_modal(cfg, show_progress=show_progress)
    if preset.generator == 'multi_modal':
        return gen_multi_modal(cfg, show_progress=show_progress)
    return gen_remix(*cfg)


def strategy_config(preset: Preset, section: dict, strategy: str, seed: int,
                    drop_probs: Optional[Tuple[float, ...]] = None) -> StrategyConfig:
    model = preset.model
    probs = drop_probs if drop_probs is not None else section.get('drop_probs')
    return _typed(f"train_missing.{strategy}", StrategyConfig,
                  strategy=strategy,
                  drop_probs=None if probs is None else tuple(float(p) for p in probs),
                  multitask_weight=float(section.get('multitask_weight', 1.0)),
                  phase1=preset.model_optimizer,
                  freeze_encoders_in_phase2=bool(section.get('freeze_encoders_in_phase2', False)),
                  epochs=int(model.get('epochs', 50)),
                  phase2_epochs=int(model.get('phase2_epochs', 20)),
                  batch_size=int(model.get('batch_size', 64)),
                  hidden=int(model.get('hidden', 200)),
                  train_missing_frac=float(section.get('train_missing_frac', 0.0)),
                  seed=seed)


def _strategies(path: str, values) -> List[str]:
    values = list(values or [])
    for name in values:
        if name not in STRATEGIES:
            raise ConfigError(path, f"unknown strategy '{name}', expected one of {STRATEGIES}")
    return values


def _subset(path: str, text) -> SubsetSpec:
    return _typed(path, SubsetSpec.parse, str(text))


# ============================================================================
# Command Sections
# ============================================================================

@dataclass
class GenSettings:
    preset: Preset
    alpha: Optional[float]
    sigma: Optional[float]
    seed: int


@dataclass
class EstimateSettings:
    preset: Preset
    subset: SubsetSpec
    normalizer_mode: str
    normalizer_floor: float
    shuffle_labels: bool
    seed: int


@dataclass
class SweepSettings:
    preset: Preset
    parameter: str
    values: List[float]
    seeds: List[int]
    subset: SubsetSpec
    strategies: List[str]
    table: str
    replicates: int


@dataclass
class VerifySettings:
    count: int
    cap: int
    seed: int
    with_y_values: bool


@dataclass
class TrainMissingSettings:
    preset: Preset
    strategies: List[str]
    section: dict
    drop_probs_grid: List[float]
    seed: int


def _seed(config: dict, section: dict, override: Optional[int]) -> int:
    seed = override if override is not None else section.get('seed', _section(config, 'run').get('seed', 0))
    if int(seed) < 0:
        raise ConfigError('seed', f"must be nonnegative, got {seed}")
    return int(seed)


def _preset(config: dict, section: dict, override: Optional[str]) -> Preset:
    return resolve_preset(config, override or section.get('preset', 'synthetic-2mod'))


def gen_settings(config: dict, preset: Optional[str] = None, seed: Optional[int] = None) -> GenSettings:
    section = _section(config, 'gen')
    settings = GenSettings(_preset(config, section, preset), section.get('alpha'),
                           section.get('sigma'), _seed(config, section, seed))
    # Build once so a bad alpha or sigma is rejected before any work starts
    generator_configs(settings.preset, settings.seed, settings.alpha, settings.sigma)
    return settings


def estimate_settings(config: dict, preset: Optional[str] = None, seed: Optional[int] = None,
                      subset: Optional[str] = None) -> EstimateSettings:
    section = _section(config, 'estimate')
    mode = section.get('normalizer_mode', 'direct')
    if mode not in NORMALIZER_MODES:
        raise ConfigError('estimate.normalizer_mode', f"must be one of {NORMALIZER_MODES}")
    floor = float(section.get('normalizer_floor', NORMALIZER_FLOOR))
    if floor < 0:
        raise ConfigError('estimate.normalizer_floor', "must be nonnegative")
    return EstimateSettings(
        preset=_preset(config, section, preset),
        subset=_subset('estimate.subset', subset or section.get('subset', '1')),
        normalizer_mode=mode,
        normalizer_floor=floor,
        shuffle_labels=bool(section.get('shuffle_labels', False)),
        seed=_seed(config, section, seed),
    )


def sweep_settings(config: dict, preset: Optional[str] = None, seed: Optional[int] = None) -> SweepSettings:
    section = _section(config, 'sweep')
    parameter = section.get('parameter', 'alpha')
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError('sweep.parameter', f"must be one of {SWEEP_PARAMETERS}")
    values = [float(v) for v in section.get('values') or []]
    if not values:
        raise ConfigError('sweep.values', "grid must be nonempty")
    seeds = [int(s) for s in section.get('seeds') or []]
    if seed is not None:
        seeds = [seed]
    if not seeds:
        raise ConfigError('sweep.seeds', "seed list must be nonempty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError('sweep.seeds', f"seeds must be distinct, got {seeds}")
    settings = SweepSettings(
        preset=_preset(config, section, preset),
        parameter=parameter,
        values=values,
        seeds=seeds,
        subset=_subset('sweep.subset', section.get('subset', '1')),
        strategies=_strategies('sweep.strategies', section.get('strategies', [])),
        table=str(section.get('table', 'sweep.csv')),
        replicates=int(section.get('replicates', 1)),
    )
    if parameter == 'sigma' and settings.preset.generator != 'remix':
        raise ConfigError('sweep.parameter', "sigma sweeps need a remix preset")
    if parameter == 'alpha' and settings.preset.generator == 'remix':
        raise ConfigError('sweep.parameter', "alpha sweeps need a two_modal or multi_modal preset")
    for value in values:
        generator_configs(settings.preset, seeds[0],
                          alpha=value if parameter == 'alpha' else None,
                          sigma=value if parameter == 'sigma' else None)
    if settings.replicates < 1:
        raise ConfigError('sweep.replicates', "must be positive")
    return settings


def verify_settings(config: dict, seed: Optional[int] = None) -> VerifySettings:
    section = _section(config, 'verify_bounds')
    count = int(section.get('count', 10000))
    cap = int(section.get('cap', 6))
    if count < 0:
        raise ConfigError('verify_bounds.count', "must be nonnegative")
    if not 2 <= cap <= 16:
        raise ConfigError('verify_bounds.cap', "must lie in [2, 16]")
    return VerifySettings(count, cap, _seed(config, section, seed),
                          bool(section.get('with_y_values', True)))


def train_missing_settings(config: dict, preset: Optional[str] = None,
                           seed: Optional[int] = None) -> TrainMissingSettings:
    section = _section(config, 'train_missing')
    strategies = _strategies('train_missing.strategies', section.get('strategies'))
    if not strategies:
        raise ConfigError('train_missing.strategies', "strategy list must be nonempty")
    grid = [float(p) for p in section.get('drop_probs_grid') or []]
    if any(not 0 <= p < 1 for p in grid):
        raise ConfigError('train_missing.drop_probs_grid', "probabilities must lie in [0, 1)")
    settings = TrainMissingSettings(_preset(config, section, preset), strategies, section, grid,
                                    _seed(config, section, seed))
    for name in strategies:
        strategy_config(settings.preset, section, name, settings.seed)
    return settings
