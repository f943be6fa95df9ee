"""Reading, validating and writing run configuration files.

The file format is flat `key = value`, one entry per line:

* `#` starts a comment (outside quotes) and blank lines are ignored
* numbers: `50`, `1e-4`, `0.7`
* booleans: `true`/`false`/`on`/`off`/`yes`/`no`
* identifiers: `beta`, `gradient`
* quoted strings: `"my run"` or `'my run'`
* comma lists: `16, 32, 64`

Environment variables (a local `.env` file is loaded first):

* `MURAL_SEED` overrides the `seed` of the file.

"""
import dataclasses
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from dotenv import find_dotenv, load_dotenv

from mural_restoration.path import atomic_write_text
from mural_restoration.serialize import stable_hash

__all__ = ['ConfigError', 'Config', 'read_config', 'write_config',
           'load_config', 'config_hash', 'SIGMA_MODES', 'ECON_MODES']

SIGMA_MODES = ('beta', 'posterior')
ECON_MODES = ('gradient', 'edge')
DTYPES = ('float32', 'float64')

_TRUE = ('true', 'on', 'yes')
_FALSE = ('false', 'off', 'no')
_NUMBER = re.compile(r'^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$')
_IDENTIFIER = re.compile(r'^[A-Za-z_][A-Za-z0-9_./-]*$')
_KEY = re.compile(r'^[A-Za-z_][A-Za-z0-9_]*$')

_log = logging.getLogger(__name__)


class ConfigError(Exception):
    """An invalid configuration key or value.

    Attributes:
        key (str): The offending key, if known.

    """
    def __init__(self, message: str, key: 'str|None' = None) -> None:
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class Config:
    """Every tunable of a run, with desk-scale defaults."""
    name: str = 'desk'
    seed: int = 0
    # noise schedule
    T: int = 50
    beta_start: 'float|None' = None
    beta_end: 'float|None' = None
    sigma_mode: str = 'beta'
    # reward consistency
    lambda_reward: float = 1.0
    reward_temperature: float = 0.05
    reward_t_fraction: float = 0.2
    reward_rollout_every: int = 0
    # data
    scales: 'tuple[int, ...]' = (16, 32, 64)
    canvas_size: int = 96
    overlap: float = 0.7
    black_threshold: float = 0.02
    black_fraction_max: float = 0.05
    train_count: int = 64
    test_count: int = 4
    # denoiser
    base_channels: int = 32
    depth: int = 2
    heads: int = 4
    head_dim: int = 0
    time_embed_dim: int = 32
    tag_vocab: int = 4
    # dynamic diffusers
    diffuser_channels: int = 16
    canonical_prior: float = 2.0
    # optimization
    lr: float = 1e-4
    diffuser_lr: float = 1e-3
    batch_size: int = 8
    train_steps: int = 200
    diffuser_steps: int = 100
    # frequency-domain post-processing
    fdp: bool = True
    fdp_bands: int = 8
    fdp_steps: int = 50
    # metrics
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    histogram_bins: int = 32
    econ_mode: str = 'gradient'
    # restoration
    known_guidance: bool = True
    condition_guidance: bool = True
    clip_x0: bool = True
    restore_samples: int = 1
    # runtime
    dtype: str = 'float32'
    num_threads: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Checks every field, naming the first offending key.

        Raises:
            `ConfigError` with the offending key.

        """
        def check(key: str, ok: bool, reason: str):
            if not ok:
                raise ConfigError(f'Invalid {key}={getattr(self, key)!r}:'
                                  f' {reason}', key)

        check('name', bool(self.name), 'must be non-empty')
        check('seed', self.seed >= 0, 'must be >= 0')
        check('T', self.T >= 1, 'must be >= 1')
        if self.beta_start is not None:
            check('beta_start', 0 < self.beta_start < 1, 'must be in (0,1)')
        if self.beta_end is not None:
            check('beta_end', 0 < self.beta_end < 1, 'must be in (0,1)')
            if self.beta_start is not None:
                check('beta_end', self.beta_start <= self.beta_end,
                      'must be >= beta_start')
        check('sigma_mode', self.sigma_mode in SIGMA_MODES,
              f'must be one of {SIGMA_MODES}')
        check('lambda_reward', self.lambda_reward >= 0, 'must be >= 0')
        check('reward_temperature', self.reward_temperature > 0,
              'must be > 0')
        check('reward_t_fraction', 0 < self.reward_t_fraction <= 1,
              'must be in (0,1]')
        check('reward_rollout_every', self.reward_rollout_every >= 0,
              'must be >= 0')
        check('scales', len(self.scales) >= 1 and
              all(s >= 1 for s in self.scales) and
              all(a < b for a, b in zip(self.scales, self.scales[1:])),
              'must be strictly increasing positive sizes')
        unit = 2 ** (self.depth + 1)
        check('scales', all(s % unit == 0 for s in self.scales),
              f'each scale must be divisible by {unit} for depth'
              f' {self.depth}')
        check('canvas_size', self.canvas_size >= self.scales[-1],
              'must be >= the finest scale')
        check('overlap', 0 <= self.overlap < 1, 'must be in [0,1)')
        check('black_threshold', 0 <= self.black_threshold <= 1,
              'must be in [0,1]')
        check('black_fraction_max', 0 <= self.black_fraction_max <= 1,
              'must be in [0,1]')
        check('train_count', self.train_count >= 1, 'must be >= 1')
        check('test_count', self.test_count >= 1, 'must be >= 1')
        check('depth', self.depth >= 1, 'must be >= 1')
        check('heads', self.heads >= 1, 'must be >= 1')
        attn_channels = self.base_channels * 2 ** self.depth
        check('base_channels', self.base_channels >= 1 and
              attn_channels % self.heads == 0,
              f'attention channels {attn_channels} must divide by heads')
        check('head_dim', self.head_dim >= 0, 'must be >= 0 (0 derives it)')
        check('time_embed_dim', self.time_embed_dim >= 2 and
              self.time_embed_dim % 2 == 0, 'must be even and >= 2')
        check('tag_vocab', self.tag_vocab >= 1, 'must be >= 1')
        check('diffuser_channels', self.diffuser_channels >= 1,
              'must be >= 1')
        check('canonical_prior', math.isfinite(self.canonical_prior),
              'must be finite')
        check('lr', self.lr > 0, 'must be > 0')
        check('diffuser_lr', self.diffuser_lr > 0, 'must be > 0')
        check('batch_size', self.batch_size >= 1, 'must be >= 1')
        check('train_steps', self.train_steps >= 0, 'must be >= 0')
        check('diffuser_steps', self.diffuser_steps >= 0, 'must be >= 0')
        check('fdp_bands', self.fdp_bands >= 1, 'must be >= 1')
        check('fdp_steps', self.fdp_steps >= 0, 'must be >= 0')
        check('ssim_window', self.ssim_window >= 1 and
              self.ssim_window % 2 == 1, 'must be odd and >= 1')
        check('ssim_sigma', self.ssim_sigma > 0, 'must be > 0')
        check('histogram_bins', self.histogram_bins >= 1, 'must be >= 1')
        check('econ_mode', self.econ_mode in ECON_MODES,
              f'must be one of {ECON_MODES}')
        check('restore_samples', self.restore_samples >= 1, 'must be >= 1')
        check('dtype', self.dtype in DTYPES, f'must be one of {DTYPES}')
        check('num_threads', self.num_threads >= 0, 'must be >= 0')

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> 'Config':
        """Returns a validated copy with fields changed."""
        return from_dict({**self.to_dict(), **changes})


def _field_types() -> 'dict[str, Any]':
    return {f.name: f.default for f in dataclasses.fields(Config)}


def _strip_comment(line: str) -> str:
    quote = None
    for i, char in enumerate(line):
        if char in ('"', "'"):
            if quote is None:
                quote = char
            elif quote == char:
                quote = None
        elif char == '#' and quote is None:
            return line[:i]
    return line


def _split_list(text: str) -> 'list[str]':
    items, current, quote = [], '', None
    for char in text:
        if char in ('"', "'"):
            quote = char if quote is None else (None if quote == char
                                                else quote)
        if char == ',' and quote is None:
            items.append(current.strip())
            current = ''
        else:
            current += char
    items.append(current.strip())
    return items


def _parse_scalar(text: str, key: str) -> Any:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in ('"', "'"):
        return text[1:-1]
    lowered = text.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    if lowered == 'none':
        return None
    if _NUMBER.match(text):
        if re.match(r'^[+-]?\d+$', text):
            return int(text)
        return float(text)
    if _IDENTIFIER.match(text):
        return text
    raise ConfigError(f'Unparseable value {text!r} for {key}', key)


def _parse_value(text: str, key: str) -> Any:
    text = text.strip()
    if not text:
        raise ConfigError(f'Missing value for {key}', key)
    items = _split_list(text)
    if len(items) > 1:
        return [_parse_scalar(item, key) for item in items]
    return _parse_scalar(text, key)


def read_config(filename: 'str|Path') -> dict:
    """Reads raw settings from a flat `key = value` file.

    Args:
        filename: The full path/filename.

    Returns:
        A dictionary of parsed (not yet validated) settings.

    Raises:
        `FileNotFoundError` if the file does not exist.
        `ConfigError` for malformed lines or duplicate keys.

    """
    settings = {}
    with open(filename) as file:
        for lineno, raw in enumerate(file.readlines(), start=1):
            line = _strip_comment(raw).strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f'{filename}:{lineno} expected key = value')
            key, value = line.split('=', 1)
            key = key.strip()
            if not _KEY.match(key):
                raise ConfigError(f'{filename}:{lineno} invalid key {key!r}',
                                  key)
            if key in settings:
                raise ConfigError(f'{filename}:{lineno} duplicate key {key}',
                                  key)
            settings[key] = _parse_value(value, key)
    return settings


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if value is None:
        return 'none'
    if isinstance(value, (list, tuple)):
        return ', '.join(_format_value(v) for v in value)
    if isinstance(value, str):
        if _IDENTIFIER.match(value) and value.lower() not in (
                _TRUE + _FALSE + ('none',)):
            return value
        return f'"{value}"'
    return repr(value)


def write_config(config: 'Config|dict', filename: 'str|Path') -> None:
    """Writes settings so that `read_config` returns the same values.

    Args:
        config: A `Config` or a dictionary of settings.
        filename: The full file path/name to store into.

    """
    settings = config.to_dict() if isinstance(config, Config) else config
    lines = [f'{key} = {_format_value(value)}'
             for key, value in settings.items()]
    atomic_write_text(filename, '\n'.join(lines) + '\n')


def _coerce(key: str, value: Any, default: Any) -> Any:
    if key in ('beta_start', 'beta_end'):
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'{key} must be a number', key)
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f'{key} must be a boolean', key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'{key} must be an integer', key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'{key} must be a number', key)
        return float(value)
    if isinstance(default, tuple):
        values = value if isinstance(value, (list, tuple)) else [value]
        if not all(isinstance(v, int) and not isinstance(v, bool)
                   for v in values):
            raise ConfigError(f'{key} must be a list of integers', key)
        return tuple(values)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f'{key} must be a string', key)
        return value
    return value


def from_dict(settings: dict) -> Config:
    """Builds a validated `Config`, rejecting unknown keys.

    Raises:
        `ConfigError` naming the first unknown or invalid key.

    """
    defaults = _field_types()
    coerced = {}
    for key, value in settings.items():
        if key not in defaults:
            raise ConfigError(f'Unknown config key {key}', key)
        coerced[key] = _coerce(key, value, defaults[key])
    return Config(**coerced)


def load_config(filename: 'str|Path|None' = None, **overrides) -> Config:
    """Loads a configuration file with environment and explicit overrides.

    Precedence, lowest first: defaults, file, `MURAL_SEED`, `overrides`.

    Args:
        filename: Optional path to a `key = value` file.
        **overrides: Settings that replace file values (`None` is ignored).

    Returns:
        A validated `Config`.

    Raises:
        `ConfigError` for unknown keys or invalid values.

    """
    load_dotenv(find_dotenv(usecwd=True), override=False)
    settings = read_config(filename) if filename else {}
    env_seed = os.getenv('MURAL_SEED')
    if env_seed is not None:
        if not re.match(r'^\d+$', env_seed.strip()):
            raise ConfigError(f'MURAL_SEED={env_seed!r} must be an integer',
                              'seed')
        settings['seed'] = int(env_seed)
        _log.info('Seed %d taken from MURAL_SEED', settings['seed'])
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(settings)


def config_hash(config: Config) -> str:
    """SHA-256 of the canonical JSON of every field."""
    return stable_hash(config.to_dict())
