"""Domain types, configuration loading and keyed random streams."""

from __future__ import annotations

import dataclasses
import enum
import json
import os
from typing import Any, Mapping

import numpy as np


class ConfigError(ValueError):
    """Raised when a parameter set or config file violates an invariant."""


@dataclasses.dataclass(frozen=True)
class MechanismParams:
    """One audited configuration of the batched mechanism.

    Attributes:
      batch_size: Records per batch (B).
      steps_per_epoch: Batches per epoch (T).
      epochs: Number of passes over the data (E).
      noise_multiplier: Noise standard deviation in units of the clip norm.
      clip_norm: Gradient clipping norm (C).
      delta: Target delta of the (epsilon, delta) guarantee.
    """

    batch_size: int
    steps_per_epoch: int
    epochs: int = 1
    noise_multiplier: float = 1.0
    clip_norm: float = 1.0
    delta: float = 1e-5

    def __post_init__(self):
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f'batch_size must be a positive integer, got {self.batch_size}')
        if int(self.steps_per_epoch) != self.steps_per_epoch or self.steps_per_epoch < 1:
            raise ConfigError(
                f'steps_per_epoch must be a positive integer, got {self.steps_per_epoch}')
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f'epochs must be a positive integer, got {self.epochs}')
        if not self.noise_multiplier >= 0:
            raise ConfigError(f'noise_multiplier must be >= 0, got {self.noise_multiplier}')
        if not self.clip_norm > 0:
            raise ConfigError(f'clip_norm must be > 0, got {self.clip_norm}')
        if not 0 < self.delta < 1:
            raise ConfigError(f'delta must be in (0, 1), got {self.delta}')

    @property
    def dataset_size(self) -> int:
        return self.batch_size * self.steps_per_epoch

    @property
    def sampling_rate(self) -> float:
        """Poisson sampling rate matching this shuffle configuration."""
        return 1.0 / self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs


class SamplerKind(str, enum.Enum):
    FULL_SHUFFLE = 'full_shuffle'
    PARTIAL_SHUFFLE = 'partial_shuffle'
    BATCH_THEN_SHUFFLE = 'batch_then_shuffle'


@dataclasses.dataclass(frozen=True)
class SamplerSpec:
    """A batch-forming procedure; ``buffer`` is only used by partial shuffling."""

    kind: SamplerKind = SamplerKind.FULL_SHUFFLE
    buffer: int | None = None

    def __post_init__(self):
        object.__setattr__(self, 'kind', SamplerKind(self.kind))
        if self.kind is SamplerKind.PARTIAL_SHUFFLE:
            if self.buffer is None or int(self.buffer) != self.buffer or self.buffer < 1:
                raise ConfigError('partial shuffle needs a positive integer buffer size')
        elif self.buffer is not None:
            raise ConfigError(f'buffer is only meaningful for partial shuffling, not {self.kind.value}')

    @classmethod
    def full_shuffle(cls) -> SamplerSpec:
        return cls(SamplerKind.FULL_SHUFFLE)

    @classmethod
    def partial_shuffle(cls, buffer: int) -> SamplerSpec:
        return cls(SamplerKind.PARTIAL_SHUFFLE, int(buffer))

    @classmethod
    def batch_then_shuffle(cls) -> SamplerSpec:
        return cls(SamplerKind.BATCH_THEN_SHUFFLE)

    def validate(self, n: int, batch_size: int) -> None:
        """Checks the divisibility requirements against a dataset of ``n`` records."""
        if batch_size < 1 or n < 1 or n % batch_size:
            raise ConfigError(f'batch size {batch_size} must divide dataset size {n}')
        if self.kind is SamplerKind.PARTIAL_SHUFFLE:
            if self.buffer % batch_size:
                raise ConfigError(f'batch size {batch_size} must divide buffer {self.buffer}')
            if self.buffer > n:
                raise ConfigError(f'buffer {self.buffer} exceeds dataset size {n}')

    def label(self) -> str:
        if self.kind is SamplerKind.PARTIAL_SHUFFLE:
            return f'partial_shuffle(K={self.buffer})'
        return self.kind.value


class ThreatModel(str, enum.Enum):
    NATURAL = 'natural'
    PARTIALLY_INFORMED = 'partially_informed'
    WORST_CASE = 'worst_case'
    # Worst-case layout with +canary on the first B records, used for the
    # batch-then-shuffle audit.
    BTS_AUDIT = 'bts_audit'


@dataclasses.dataclass(frozen=True)
class ObservationMatrix:
    """E x T observations released by one run, with the world it came from."""

    values: np.ndarray
    world_bit: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f'observations must be a 2-D (epochs x steps) array, got shape {values.shape}')
        if not np.all(np.isfinite(values)):
            raise ValueError('observations contain non-finite entries')
        if self.world_bit not in (0, 1):
            raise ValueError(f'world_bit must be 0 or 1, got {self.world_bit}')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def epochs(self) -> int:
        return self.values.shape[0]

    @property
    def steps(self) -> int:
        return self.values.shape[1]

    def check_shape(self, params: MechanismParams) -> None:
        if self.values.shape != (params.epochs, params.steps_per_epoch):
            raise ValueError(
                f'observation shape {self.values.shape} does not match '
                f'(E={params.epochs}, T={params.steps_per_epoch})')


_U64 = (1 << 64) - 1


@dataclasses.dataclass(frozen=True)
class RngStreamKey:
    master_seed: int
    stream_index: int

    def __post_init__(self):
        for name in ('master_seed', 'stream_index'):
            value = getattr(self, name)
            if not 0 <= value <= _U64:
                raise ValueError(f'{name} must fit in an unsigned 64-bit integer, got {value}')


class RandomStream:
    """Deterministic stream for one key, backed by a counter-based Philox generator."""

    def __init__(self, key: RngStreamKey):
        self.key = key
        bitgen = np.random.Philox(key=np.array([key.master_seed, key.stream_index], dtype=np.uint64))
        self._gen = np.random.Generator(bitgen)

    def uint64(self, size=None):
        return self._gen.integers(0, _U64, size=size, dtype=np.uint64, endpoint=True)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        # numpy shuffles in place with Fisher-Yates.
        return self._gen.permutation(n)

    def hypergeometric_counts(self, colors, nsample: int, size=None) -> np.ndarray:
        return self._gen.multivariate_hypergeometric(colors, nsample, size=size, method='marginals')


def derive_stream(key: RngStreamKey) -> RandomStream:
    """Returns the random stream for ``key``; a pure function of the key."""
    return RandomStream(key)


# ---------------------------------------------------------------------------
# Flat key-value configuration.

CONFIG_KEYS = {
    'batch_size': int,
    'steps_per_epoch': int,
    'epochs': int,
    'noise_multiplier': float,
    'clip_norm': float,
    'delta': float,
    'sampler': str,
    'buffer': int,
    'threat': str,
    'observations': int,
    'repeats': int,
    'confidence': float,
    'seed': int,
    'eps_target': float,
    'buffer_guesses': str,
    'plan_id': str,
    'chunk_size': int,
}


def _coerce(key: str, value: Any) -> Any:
    kind = CONFIG_KEYS[key]
    if value is None:
        return None
    if kind is int:
        if isinstance(value, str):
            value = float(value) if any(c in value for c in '.eE') else int(value)
        if isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f'{key} must be an integer, got {value}')
            value = int(value)
        return int(value)
    if kind is float:
        return float(value)
    return str(value)


def parse_overrides(pairs) -> dict:
    """Parses ``key=value`` strings into a dict (values stay strings)."""
    out = {}
    for pair in pairs or ():
        if '=' not in pair:
            raise ConfigError(f'override {pair!r} is not of the form key=value')
        key, value = pair.split('=', 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> dict:
    """Reads a flat JSON config and applies overrides.

    A ``run_manifest.json`` written by the CLI is accepted too: its ``config``
    entry is used. Unknown keys are rejected.
    """
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f'cannot read config {path}: {e}') from e
        if not isinstance(raw, dict):
            raise ConfigError(f'config {path} must hold a JSON object')
        if 'config' in raw and isinstance(raw['config'], dict):
            raw = raw['config']
    merged = dict(raw)
    merged.update(overrides or {})
    unknown = sorted(set(merged) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f'unknown config keys: {", ".join(unknown)}')
    return {k: _coerce(k, v) for k, v in merged.items()}
