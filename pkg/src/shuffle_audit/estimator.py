"""Empirical epsilon lower bounds from labelled attack scores.

Scores are thresholded: an observation is called world 1 when its score is
strictly greater than the threshold. Counts of false positives/negatives are
bounded with one-sided Clopper-Pearson intervals and turned into an epsilon
through the (eps, delta)-DP privacy region.
"""

from __future__ import annotations

import csv
import dataclasses
from typing import Sequence

import numpy as np
from scipy import special

EPS_CAP = 50.0


@dataclasses.dataclass(frozen=True)
class ScoreSet:
    """Scores from world 1 (target present) and world 0 (zero-out record)."""

    scores_d1: np.ndarray
    scores_d0: np.ndarray

    def __post_init__(self):
        d1 = np.asarray(self.scores_d1, dtype=np.float64).ravel()
        d0 = np.asarray(self.scores_d0, dtype=np.float64).ravel()
        if len(d1) == 0 or len(d0) == 0:
            raise ValueError('score sets must be non-empty')
        if len(d1) != len(d0):
            raise ValueError(f'score sets must have equal sizes, got {len(d1)} and {len(d0)}')
        if not (np.all(np.isfinite(d1)) and np.all(np.isfinite(d0))):
            raise ValueError('scores must be finite')
        object.__setattr__(self, 'scores_d1', d1)
        object.__setattr__(self, 'scores_d0', d0)

    def __len__(self):
        return len(self.scores_d1)


@dataclasses.dataclass(frozen=True)
class TradeoffCurve:
    """One point per distinct threshold of the sorted sweep."""

    thresholds: np.ndarray
    fpr_raw: np.ndarray
    fnr_raw: np.ndarray
    fpr_upper: np.ndarray
    fnr_upper: np.ndarray
    eps: np.ndarray

    def points(self, raw: bool = False) -> np.ndarray:
        if raw:
            return np.column_stack([self.fpr_raw, self.fnr_raw])
        return np.column_stack([self.fpr_upper, self.fnr_upper])

    def write_csv(self, path) -> None:
        with open(path, 'w', newline='') as f:
            w = csv.writer(f)
            w.writerow(['threshold', 'fpr_raw', 'fnr_raw', 'fpr_upper', 'fnr_upper', 'eps_emp'])
            for row in zip(self.thresholds, self.fpr_raw, self.fnr_raw, self.fpr_upper,
                           self.fnr_upper, self.eps):
                w.writerow([repr(float(v)) for v in row])


@dataclasses.dataclass(frozen=True)
class AuditResult:
    eps_emp: float
    threshold: float
    alpha_bar: float
    beta_bar: float
    confidence: float
    delta: float
    repeats: tuple = ()
    capped: bool = False
    curve: TradeoffCurve | None = None
    repeat_results: tuple = ()

    @property
    def mean(self) -> float:
        return float(np.mean(self.repeats)) if self.repeats else self.eps_emp

    @property
    def std(self) -> float:
        return float(np.std(self.repeats)) if len(self.repeats) > 1 else 0.0


def _check_cp_args(k, n, confidence):
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f'need 0 <= k <= n and n >= 1, got k={k}, n={n}')
    if not 0 < confidence < 1:
        raise ValueError(f'confidence must be in (0, 1), got {confidence}')


def clopper_pearson_upper(k: int, n: int, confidence: float = 0.95, tol: float = 1e-12) -> float:
    """One-sided Clopper-Pearson upper bound on a binomial rate.

    Solves I_p(k+1, n-k) = confidence for p by bisection on the regularized
    incomplete beta function.
    """
    _check_cp_args(k, n, confidence)
    if k == n:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if special.betainc(k + 1, n - k, mid) < confidence:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def clopper_pearson_table(n: int, confidence: float = 0.95) -> np.ndarray:
    """Upper bounds for every count k = 0..n at once (inverse beta CDF)."""
    _check_cp_args(0, n, confidence)
    k = np.arange(n + 1, dtype=np.float64)
    out = np.ones(n + 1)
    out[:-1] = special.betaincinv(k[:-1] + 1, n - k[:-1], confidence)
    return out


def _eps_from_rates(alpha_bar, beta_bar, delta, cap=EPS_CAP):
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    beta_bar = np.asarray(beta_bar, dtype=np.float64)
    out = np.zeros(np.broadcast(alpha_bar, beta_bar).shape)
    for num, den in ((1 - alpha_bar - delta, beta_bar), (1 - beta_bar - delta, alpha_bar)):
        num, den = np.broadcast_to(num, out.shape), np.broadcast_to(den, out.shape)
        with np.errstate(divide='ignore', invalid='ignore'):
            branch = np.where(den > 0, np.log(np.where(num > 0, num, np.nan) / den), np.inf)
        branch = np.where(num > 0, np.minimum(branch, cap), 0.0)
        out = np.maximum(out, branch)
    return out


def eps_from_rates(alpha_bar: float, beta_bar: float, delta: float, cap: float = EPS_CAP) -> float:
    """Largest epsilon consistent with error-rate bounds at ``delta``.

    A zero rate in a denominator with a positive numerator would give +inf;
    it is clamped to ``cap``.
    """
    for v in (alpha_bar, beta_bar):
        if not 0 <= v <= 1:
            raise ValueError(f'rates must be in [0, 1], got {v}')
    return float(_eps_from_rates(alpha_bar, beta_bar, delta, cap))


def _sweep(ss: ScoreSet):
    """Counts after each distinct threshold of the increasing sweep."""
    scores = np.concatenate([ss.scores_d1, ss.scores_d0])
    is_d1 = np.zeros(len(scores), dtype=bool)
    is_d1[:len(ss)] = True
    order = np.argsort(scores, kind='stable')
    scores, is_d1 = scores[order], is_d1[order]
    # Tied scores fall on the same side of any threshold.
    last = np.append(scores[1:] != scores[:-1], True)
    fnr = np.cumsum(is_d1)[last]
    fpr = len(ss) - np.cumsum(~is_d1)[last]
    return scores[last], fpr, fnr


def empirical_tradeoff(ss: ScoreSet, confidence: float = 0.95, delta: float = 0.0) -> TradeoffCurve:
    """Raw and Clopper-Pearson-bounded (FPR, FNR) for every threshold."""
    thresholds, fpr, fnr = _sweep(ss)
    r = len(ss)
    table = clopper_pearson_table(r, confidence)
    fpr_up, fnr_up = table[fpr], table[fnr]
    return TradeoffCurve(thresholds, fpr / r, fnr / r, fpr_up, fnr_up,
                         _eps_from_rates(fpr_up, fnr_up, delta))


def estimate_eps(ss: ScoreSet, significance: float = 0.05, delta: float = 1e-5,
                 keep_curve: bool = False) -> AuditResult:
    """Maximum empirical epsilon over all thresholds of the sorted sweep."""
    curve = empirical_tradeoff(ss, 1 - significance, delta)
    best = int(np.argmax(curve.eps))
    eps = float(curve.eps[best])
    return AuditResult(
        eps_emp=eps,
        threshold=float(curve.thresholds[best]),
        alpha_bar=float(curve.fpr_upper[best]),
        beta_bar=float(curve.fnr_upper[best]),
        confidence=1 - significance,
        delta=delta,
        repeats=(eps,),
        capped=eps >= EPS_CAP,
        curve=curve if keep_curve else None,
    )


def summarize_repeats(results: Sequence[AuditResult]) -> AuditResult:
    """Headline result over repeats: mean epsilon, best repeat's threshold and rates."""
    if not results:
        raise ValueError('no repeats to summarize')
    eps = tuple(r.eps_emp for r in results)
    best = max(results, key=lambda r: r.eps_emp)
    return dataclasses.replace(
        best, eps_emp=float(np.mean(eps)), repeats=eps,
        capped=any(r.capped for r in results), curve=None, repeat_results=tuple(results))

