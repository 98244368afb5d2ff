"""Observation generators.

``bgm_run`` simulates the batched Gaussian mechanism over explicit record
values. The surrogate generators draw the same observation law directly from
the target's batch index, which is what the audits use at scale.

Observations are in normalized units: a canary dot product scaled by B/C, so
one inserted canary contributes +1 and the noise has standard deviation sigma.
"""

from __future__ import annotations

import dataclasses
import struct
from typing import BinaryIO, Iterator

import numpy as np

from . import sampler
from .core import (MechanismParams, ObservationMatrix, RandomStream, SamplerSpec,
                   ThreatModel)


@dataclasses.dataclass(frozen=True)
class RecordValues:
    values: np.ndarray
    world_bit: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or not np.all((values >= -1) & (values <= 1)):
            raise ValueError('record values must be a 1-D vector in [-1, 1]')
        if self.world_bit not in (0, 1):
            raise ValueError(f'world_bit must be 0 or 1, got {self.world_bit}')
        object.__setattr__(self, 'values', values)

    @classmethod
    def worst_case(cls, n: int, world_bit: int) -> RecordValues:
        """(+1, -1, ..., -1) with the target replaced by 0 in world 0."""
        values = -np.ones(n)
        values[0] = 1.0 if world_bit else 0.0
        return cls(values, world_bit)

    @classmethod
    def bts_layout(cls, n: int, batch_size: int, world_bit: int) -> RecordValues:
        """First B records carry +1 (the target 0 in world 0), the rest -1."""
        values = -np.ones(n)
        values[:batch_size] = 1.0
        values[0] = 1.0 if world_bit else 0.0
        return cls(values, world_bit)


def bgm_run(records: RecordValues, params: MechanismParams, spec: SamplerSpec,
            stream: RandomStream) -> ObservationMatrix:
    """Per-batch noisy sums of the records, with fresh batches every epoch."""
    n, b = params.dataset_size, params.batch_size
    if len(records.values) != n:
        raise ValueError(f'{len(records.values)} records given but B*T = {n}')
    rows = np.empty((params.epochs, params.steps_per_epoch))
    for e in range(params.epochs):
        batches = sampler.assign_batches(n, b, spec, stream).batches()
        rows[e] = records.values[batches].sum(axis=1)
    rows += params.noise_multiplier * stream.normal(rows.shape)
    return ObservationMatrix(rows, records.world_bit)


def cell_means(threat: ThreatModel, batch_size: int) -> tuple[float, float, float]:
    """(target mean in world 1, target mean in world 0, background mean)."""
    if threat is ThreatModel.NATURAL:
        return 1.0, 0.0, 0.0
    if threat is ThreatModel.PARTIALLY_INFORMED:
        return 1.0, 0.0, -1.0
    if threat is ThreatModel.WORST_CASE:
        return -batch_size + 2.0, -batch_size + 1.0, -float(batch_size)
    if threat is ThreatModel.BTS_AUDIT:
        return float(batch_size), batch_size - 1.0, -float(batch_size)
    raise ValueError(f'unknown threat model {threat!r}')


def surrogate_batch(threat: ThreatModel, params: MechanismParams, spec: SamplerSpec,
                    world_bit: int, stream: RandomStream, count: int) -> np.ndarray:
    """``count`` observation matrices at once, shape (count, E, T)."""
    threat = ThreatModel(threat)
    n, b = params.dataset_size, params.batch_size
    mu1, mu0, mu_bg = cell_means(threat, b)
    shape = (count, params.epochs, params.steps_per_epoch)
    t_star = sampler.target_batch_index(n, b, spec, stream, size=shape[:2])
    out = params.noise_multiplier * stream.normal(shape)
    out += mu_bg
    rows = out.reshape(-1, shape[2])
    rows[np.arange(rows.shape[0]), t_star.ravel()] += (mu1 if world_bit else mu0) - mu_bg
    return out


def surrogate_observations(threat: ThreatModel, params: MechanismParams, spec: SamplerSpec,
                           world_bit: int, stream: RandomStream) -> ObservationMatrix:
    """One observation matrix under the given threat model.

    Every epoch the target lands in batch t* drawn from the sampler's marginal;
    that cell has the target mean, all others the background mean.
    """
    values = surrogate_batch(threat, params, spec, world_bit, stream, 1)[0]
    return ObservationMatrix(values, world_bit)


def bts_batch(params: MechanismParams, world_bit: int, bug: bool, stream: RandomStream,
              count: int) -> np.ndarray:
    """Batch sums of the +1/-1 layout used by the batch-then-shuffle audit, (count, E, T).

    With the bug, the first block stays intact and only batch order is random.
    Without it, the other B-1 "+1" records spread over the shuffled batches
    following a multivariate hypergeometric law.
    """
    b, t = params.batch_size, params.steps_per_epoch
    shape = (count, params.epochs, t)
    target = 1.0 if world_bit else 0.0
    if bug:
        return surrogate_batch(ThreatModel.BTS_AUDIT, params, SamplerSpec.batch_then_shuffle(),
                               world_bit, stream, count)
    m = count * params.epochs
    t_star = stream.integers(0, t, size=m)
    # Target occupies a slot of batch 0 here; columns are swapped to t* below.
    colors = [b - 1] + [b] * (t - 1)
    plus = stream.hypergeometric_counts(colors, b - 1, size=m).astype(np.float64)
    free = np.array(colors, dtype=np.float64)
    sums = 2 * plus - free[None, :]
    sums[:, 0] += target
    rows = np.arange(m)
    first = sums[:, 0].copy()
    sums[:, 0] = sums[rows, t_star]
    sums[rows, t_star] = first
    out = sums.reshape(shape)
    out += params.noise_multiplier * stream.normal(shape)
    return out


def bts_observations(params: MechanismParams, world_bit: int, bug: bool,
                     stream: RandomStream) -> ObservationMatrix:
    """One batch-then-shuffle audit observation (``bug`` selects the sampler)."""
    return ObservationMatrix(bts_batch(params, world_bit, bug, stream, 1)[0], world_bit)


# ---------------------------------------------------------------------------
# Binary dump: 24-byte header (E, T, world_bit as little-endian int64), then
# float64 values row-major.

_HEADER = struct.Struct('<qqq')


def write_observations(f: BinaryIO, obs: ObservationMatrix) -> None:
    f.write(_HEADER.pack(obs.epochs, obs.steps, obs.world_bit))
    f.write(np.ascontiguousarray(obs.values, dtype='<f8').tobytes())


def read_observations(f: BinaryIO) -> Iterator[ObservationMatrix]:
    """Yields every matrix in a stream of concatenated dumps."""
    while True:
        header = f.read(_HEADER.size)
        if not header:
            return
        if len(header) != _HEADER.size:
            raise ValueError('truncated observation header')
        epochs, steps, bit = _HEADER.unpack(header)
        if epochs < 1 or steps < 1:
            raise ValueError(f'bad observation header (E={epochs}, T={steps})')
        payload = f.read(8 * epochs * steps)
        if len(payload) != 8 * epochs * steps:
            raise ValueError('truncated observation payload')
        values = np.frombuffer(payload, dtype='<f8').reshape(epochs, steps)
        yield ObservationMatrix(values.astype(np.float64), int(bit))
