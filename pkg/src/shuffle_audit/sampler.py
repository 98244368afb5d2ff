"""Batch-forming procedures: full shuffle, partial shuffle and batch-then-shuffle.

The target (or zero-out) record always sits at dataset position 0.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import RandomStream, SamplerKind, SamplerSpec


@dataclasses.dataclass(frozen=True)
class BatchAssignment:
    """``perm[j]`` is the record at position ``j`` of the processing order;
    ``batch_of[r]`` is the batch that record ``r`` lands in."""

    perm: np.ndarray
    batch_of: np.ndarray
    batch_size: int

    @property
    def num_batches(self) -> int:
        return len(self.perm) // self.batch_size

    def batches(self) -> np.ndarray:
        """Record indices grouped by batch, shape (T, B)."""
        return self.perm.reshape(self.num_batches, self.batch_size)


def assign_batches(n: int, batch_size: int, spec: SamplerSpec, stream: RandomStream) -> BatchAssignment:
    """Draws one epoch's batches of ``n`` records according to ``spec``."""
    spec.validate(n, batch_size)
    num_batches = n // batch_size
    if spec.kind is SamplerKind.FULL_SHUFFLE:
        perm = stream.permutation(n)
    elif spec.kind is SamplerKind.PARTIAL_SHUFFLE:
        k = spec.buffer
        perm = np.arange(n)
        for start in range(0, n, k):
            stop = min(start + k, n)
            perm[start:stop] = start + stream.permutation(stop - start)
    else:
        order = stream.permutation(num_batches)
        perm = (order[:, None] * batch_size + np.arange(batch_size)[None, :]).ravel()
    batch_of = np.empty(n, dtype=np.int64)
    batch_of[perm] = np.arange(n) // batch_size
    return BatchAssignment(perm, batch_of, batch_size)


def target_support(n: int, batch_size: int, spec: SamplerSpec) -> int:
    """Number of batches the record at position 0 can land in."""
    spec.validate(n, batch_size)
    if spec.kind is SamplerKind.PARTIAL_SHUFFLE:
        return spec.buffer // batch_size
    return n // batch_size


def target_batch_index(n: int, batch_size: int, spec: SamplerSpec, stream: RandomStream,
                       size=None):
    """Batch index of the record at position 0, drawn from its marginal law.

    Every sampler puts it uniformly on its support: all T batches for full
    shuffling and batch-then-shuffle, the first K/B batches for a partial
    shuffle with buffer K.
    """
    return stream.integers(0, target_support(n, batch_size, spec), size=size)
