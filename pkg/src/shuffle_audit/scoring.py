"""Log-likelihood-ratio scores for observation matrices.

Within an epoch the target sits in one unknown batch, so each world's
likelihood is a uniform mixture over batches. The common background factor
and the 1/T weights cancel, leaving

    log sum_t exp(a_t) - log sum_t exp(b_t)

with a_t (b_t) the per-cell log-ratio of the world-1 (world-0) target mean
against the background mean. Epochs are independent, so their scores add.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import MechanismParams, ObservationMatrix, ThreatModel
from .mechanism import cell_means


class ScoringError(ArithmeticError):
    pass


@dataclasses.dataclass(frozen=True)
class HypothesisPair:
    mu_target_1: float
    mu_target_0: float
    mu_background: float
    sigma: float
    support: int
    # Natural: world 0 has no canary at all, so the denominator is the pure
    # background product rather than a mixture.
    pure_background_null: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f'sigma must be > 0 to score, got {self.sigma}')
        if int(self.support) != self.support or self.support < 1:
            raise ValueError(f'support must be a positive integer, got {self.support}')


def hypothesis_for(threat: ThreatModel, params: MechanismParams, support: int | None = None
                   ) -> HypothesisPair:
    threat = ThreatModel(threat)
    support = params.steps_per_epoch if support is None else int(support)
    if not 1 <= support <= params.steps_per_epoch:
        raise ValueError(f'support {support} outside 1..T={params.steps_per_epoch}')
    mu1, mu0, mu_bg = cell_means(threat, params.batch_size)
    return HypothesisPair(mu1, mu0, mu_bg, params.noise_multiplier, support,
                          pure_background_null=threat is ThreatModel.NATURAL)


def _log_mixture(rows: np.ndarray, mu: float, mu_bg: float, sigma: float) -> np.ndarray:
    # log phi((x-mu)/s) - log phi((x-mu_bg)/s), written without squaring x
    a = rows - 0.5 * (mu + mu_bg)
    a *= (mu - mu_bg) / sigma**2
    peak = a.max(axis=-1, keepdims=True)
    a -= peak
    np.exp(a, out=a)
    return np.log(a.sum(axis=-1)) + peak[..., 0]


def score_rows(rows: np.ndarray, hp: HypothesisPair) -> np.ndarray:
    """Per-epoch log-LR for every row of ``rows`` (last axis = batches)."""
    rows = np.asarray(rows, dtype=np.float64)[..., :hp.support]
    num = _log_mixture(rows, hp.mu_target_1, hp.mu_background, hp.sigma)
    if hp.pure_background_null:
        out = num
    else:
        out = num - _log_mixture(rows, hp.mu_target_0, hp.mu_background, hp.sigma)
    if not np.all(np.isfinite(out)):
        raise ScoringError('non-finite log-likelihood ratio')
    return out


def score_batch(obs: np.ndarray, hp: HypothesisPair) -> np.ndarray:
    """Scores for a stack of matrices shaped (count, E, T)."""
    return score_rows(obs, hp).sum(axis=-1)


def log_lr_epoch(row, hp: HypothesisPair) -> float:
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or not np.all(np.isfinite(row)):
        raise ValueError('row must be a finite 1-D vector')
    return float(score_rows(row, hp))


def log_lr_matrix(obs: ObservationMatrix, hp: HypothesisPair) -> float:
    """Sum of per-epoch scores."""
    return float(score_rows(obs.values, hp).sum())
