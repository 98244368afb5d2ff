"""Privacy accounting for the Poisson-subsampled Gaussian mechanism.

The main route discretizes the privacy loss distribution (PLD) of a single
step on a uniform log-likelihood-ratio grid and composes it with FFT
convolutions. An RDP accountant is provided as an independent, looser
cross-check.

Discretization uses the "connect-the-dots" construction: grid masses are
chosen so that the discrete hockey-stick curve interpolates the exact one at
every grid point (linearly in e^eps in between), which is pessimistic and
exact on the grid. Lower tails are pushed up to the lowest kept grid point
(pessimistic); upper tails are dropped and their mass is tracked in
``truncation_mass`` and added back to delta.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from typing import Sequence

import numpy as np
from scipy import optimize, signal, special

DEFAULT_GRID_STEP = 1e-4
DEFAULT_SUPPORT = 30.0
# Tail mass allowed to be cut at every convolution.
DEFAULT_TAIL_MASS = 1e-15
MAX_GRID_POINTS = 1 << 24

_Z_TAIL = 10.0  # Gaussian tail in standard deviations covered by a single step.


class AccountantError(RuntimeError):
    """A numerical failure of the accountant (unreachable delta, grid overflow, ...)."""


@dataclasses.dataclass(frozen=True)
class PoissonAccountantParams:
    noise_multiplier: float
    sampling_rate: float
    total_steps: int
    delta: float

    def __post_init__(self):
        _check_sigma_q(self.noise_multiplier, self.sampling_rate)
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise ValueError(f'total_steps must be a positive integer, got {self.total_steps}')
        if not 0 < self.delta < 1:
            raise ValueError(f'delta must be in (0, 1), got {self.delta}')


def _check_sigma_q(sigma, q):
    if not sigma > 0:
        raise ValueError(f'noise multiplier must be > 0, got {sigma}')
    if not 0 < q <= 1:
        raise ValueError(f'sampling rate must be in (0, 1], got {q}')


@dataclasses.dataclass(frozen=True)
class PrivacyLossDistribution:
    """Privacy loss masses on the grid ``(offset + i) * grid_step``.

    ``masses + infinity_mass + truncation_mass`` sums to one.
    """

    grid_step: float
    offset: int
    masses: np.ndarray
    infinity_mass: float = 0.0
    truncation_mass: float = 0.0

    @property
    def losses(self) -> np.ndarray:
        return (self.offset + np.arange(len(self.masses))) * self.grid_step

    @property
    def total_mass(self) -> float:
        return float(math.fsum(self.masses)) + self.infinity_mass + self.truncation_mass

    def delta_at(self, eps) -> np.ndarray | float:
        """Hockey-stick divergence at ``eps`` plus the tracked truncation mass."""
        eps_arr = np.atleast_1d(np.asarray(eps, dtype=np.float64))
        losses = self.losses
        out = np.empty_like(eps_arr)
        for i, e in enumerate(eps_arr):
            above = losses > e
            out[i] = (np.sum(self.masses[above] * -np.expm1(e - losses[above]))
                      + self.infinity_mass + self.truncation_mass)
        return out if np.ndim(eps) else float(out[0])

    def epsilon_for(self, delta: float) -> float:
        """Smallest eps with ``delta_at(eps) <= delta``.

        Between grid points the discrete curve is linear in e^eps, so the
        crossing is solved exactly inside the bracketing grid cell.
        """
        budget = delta - self.infinity_mass - self.truncation_mass
        if budget <= 0:
            raise AccountantError(
                f'delta={delta:g} unreachable: infinity mass {self.infinity_mass:.3g} plus '
                f'truncation mass {self.truncation_mass:.3g} already exceed it')
        losses = self.losses
        p = self.masses
        # For eps in [l_j, l_{j+1}): delta(eps) = S_j - e^eps * U_j with
        # S_j = sum_{i>j} p_i and U_j = sum_{i>j} p_i e^{-l_i}.
        ref = losses[-1]
        tail_p = np.concatenate([np.cumsum(p[::-1])[::-1][1:], [0.0]])
        tail_u = np.concatenate([np.cumsum((p * np.exp(ref - losses))[::-1])[::-1][1:], [0.0]])
        # delta at each grid point
        at_grid = tail_p - np.exp(losses - ref) * tail_u
        ok = np.nonzero(at_grid <= budget)[0]
        j = int(ok[0])
        if j == 0:
            # All mass at or above the first grid point; delta(l_0) already fits.
            # Below the grid, delta(eps) = S - e^eps U with S and U over all points.
            s_all = float(np.sum(p))
            u_all = float(np.sum(p * np.exp(ref - losses)))
            if s_all <= budget:
                return 0.0
            return max(0.0, math.log((s_all - budget) / u_all) + ref)
        s, u = tail_p[j - 1], tail_u[j - 1]
        eps = math.log((s - budget) / u) + ref
        return max(0.0, min(eps, float(losses[j])))


# ---------------------------------------------------------------------------
# Exact hockey-stick curves.

def gaussian_delta(eps, sigma: float, sensitivity: float = 1.0):
    """Exact delta(eps) of the Gaussian mechanism with the given noise/sensitivity.

    Args:
      eps: Scalar or array of epsilons (any real).
      sigma: Noise standard deviation.
      sensitivity: L2 sensitivity.

    Returns:
      Phi(-eps*s + 1/(2s)) - e^eps * Phi(-eps*s - 1/(2s)) with s = sigma / sensitivity.
    """
    s = sigma / sensitivity
    eps = np.asarray(eps, dtype=np.float64)
    a = special.log_ndtr(-eps * s + 0.5 / s)
    b = eps + special.log_ndtr(-eps * s - 0.5 / s)
    # exp(a) - exp(b) with a >= b
    out = np.exp(a) * -np.expm1(np.minimum(b - a, 0.0))
    return out if out.ndim else float(out)


def gaussian_epsilon(delta: float, sigma: float, sensitivity: float = 1.0) -> float:
    """Inverse of :func:`gaussian_delta` in eps (0 if delta is already met at eps=0)."""
    if gaussian_delta(0.0, sigma, sensitivity) <= delta:
        return 0.0
    hi = 1.0
    while gaussian_delta(hi, sigma, sensitivity) > delta:
        hi *= 2
    return optimize.brentq(lambda e: gaussian_delta(e, sigma, sensitivity) - delta, 0.0, hi,
                           xtol=1e-14, rtol=1e-14)


def _subsampled_delta(eps: np.ndarray, sigma: float, q: float, direction: str) -> np.ndarray:
    """Exact delta(eps) of the Poisson-subsampled Gaussian in one adjacency direction.

    ``add``:    P = (1-q) N(0, s^2) + q N(1, s^2) vs Q = N(0, s^2)
    ``remove``: P = N(0, s^2) vs Q = (1-q) N(0, s^2) + q N(1, s^2)
    Both reduce to the plain Gaussian curve at a transformed epsilon.
    """
    eps = np.asarray(eps, dtype=np.float64)
    out = np.empty_like(eps)
    if q == 1.0:
        return np.atleast_1d(gaussian_delta(eps, sigma))
    log_q, log_1mq = math.log(q), math.log1p(-q)
    if direction == 'add':
        low = eps <= log_1mq
        out[low] = -np.expm1(eps[low])
        e = eps[~low]
        # log((e^eps - (1-q)) / q)
        shifted = e + np.log1p(-np.exp(log_1mq - e)) - log_q
        out[~low] = q * np.atleast_1d(gaussian_delta(shifted, sigma))
    elif direction == 'remove':
        high = eps >= -log_1mq
        out[high] = 0.0
        e = eps[~high]
        # log((e^-eps - (1-q)) / q)
        shifted = -e + np.log1p(-np.exp(log_1mq + e)) - log_q
        out[~high] = q * np.exp(e + shifted) * np.atleast_1d(gaussian_delta(-shifted, sigma))
    else:
        raise ValueError(f'unknown direction {direction!r}')
    return out


def _loss_at(x, sigma, q, direction):
    """Privacy loss of the observation ``x`` (log P/Q)."""
    z = (2 * x - 1) / (2 * sigma**2)
    if q == 1.0:
        val = z
    else:
        val = np.logaddexp(math.log1p(-q), math.log(q) + z)
    return val if direction == 'add' else -val


def _observation_at(eps: np.ndarray, sigma, q, direction) -> np.ndarray:
    """Inverse of :func:`_loss_at`; -inf where no observation reaches the loss."""
    with np.errstate(divide='ignore', invalid='ignore'):
        e = eps if direction == 'add' else -eps
        if q == 1.0:
            shifted = e
        else:
            log_1mq = math.log1p(-q)
            shifted = np.where(e > log_1mq, e + np.log1p(-np.exp(log_1mq - e)) - math.log(q), -np.inf)
    return sigma**2 * shifted + 0.5


def _gaussian_bins(edges: np.ndarray, mean: float, sd: float) -> np.ndarray:
    """Probabilities of (-inf, e0], (e0, e1], ..., (e_last, inf) under N(mean, sd^2).

    Each interval is evaluated on the side of the mean that keeps relative
    accuracy in the tails.
    """
    z = np.concatenate([[-np.inf], (edges - mean) / sd, [np.inf]])
    a, b = z[:-1], z[1:]
    cdf_a, cdf_b = special.ndtr(a), special.ndtr(b)
    sf_a, sf_b = special.ndtr(-a), special.ndtr(-b)
    return np.where(b <= 0, cdf_b - cdf_a, np.where(a >= 0, sf_a - sf_b, 1.0 - cdf_a - sf_b))


def _loss_bins(eps: np.ndarray, sigma, q, direction):
    """P- and Q-probabilities of the loss falling below, between and above grid points."""
    x = _observation_at(eps, sigma, q, direction)
    if direction == 'add':
        # loss increases with x: P mixture, Q = N(0, s^2)
        q0 = _gaussian_bins(x, 0.0, sigma)
        q1 = _gaussian_bins(x, 1.0, sigma)
        return (1 - q) * q0 + q * q1, q0
    # loss decreases with x; flip to increasing order in x.
    xr = x[::-1]
    p0 = _gaussian_bins(xr, 0.0, sigma)[::-1]
    p1 = _gaussian_bins(xr, 1.0, sigma)[::-1]
    return p0, (1 - q) * p0 + q * p1


def pld_single_step(sigma: float, q: float, direction: str = 'add',
                    grid_step: float = DEFAULT_GRID_STEP,
                    support: float = DEFAULT_SUPPORT) -> PrivacyLossDistribution:
    """Discretized PLD of one step of the Poisson-subsampled Gaussian mechanism.

    Mass of every grid cell is split between its two end points so that the
    discrete hockey-stick curve matches the exact one at each grid point.
    """
    _check_sigma_q(sigma, q)
    if direction not in ('add', 'remove'):
        raise ValueError(f'unknown direction {direction!r}')
    xs = np.array([-_Z_TAIL * sigma, 1 + _Z_TAIL * sigma])
    ends = _loss_at(xs, sigma, q, direction)
    lo, hi = float(np.min(ends)), float(np.max(ends))
    lo, hi = max(lo, -support), min(hi, support)
    i_lo = math.floor(lo / grid_step)
    i_hi = max(math.ceil(hi / grid_step), i_lo + 1)
    if i_hi - i_lo + 1 > MAX_GRID_POINTS:
        raise AccountantError(f'single-step grid needs {i_hi - i_lo + 1} points')
    eps = np.arange(i_lo, i_hi + 1) * grid_step
    p_bins, q_bins = _loss_bins(eps, sigma, q, direction)
    masses = np.zeros_like(eps)
    masses[0] = p_bins[0]
    # Cell (eps_j, eps_{j+1}]: the share kept at eps_j makes the hockey-stick
    # curve exact at both end points.
    p_cell, q_cell = p_bins[1:-1], q_bins[1:-1]
    low_share = (q_cell * np.exp(eps[1:]) - p_cell) / math.expm1(grid_step)
    low_share = np.clip(low_share, 0.0, p_cell)
    masses[:-1] += low_share
    masses[1:] += p_cell - low_share
    # Above the grid: split between the last point and +inf.
    p_top, q_top = p_bins[-1], q_bins[-1]
    kept = min(p_top, q_top * math.exp(eps[-1]))
    masses[-1] += kept
    return PrivacyLossDistribution(grid_step, i_lo, masses, infinity_mass=float(p_top - kept))


# ---------------------------------------------------------------------------
# Composition.

def _log_mgf(pld: PrivacyLossDistribution, lam: np.ndarray) -> np.ndarray:
    pos = pld.masses > 0
    logp = np.log(pld.masses[pos])
    l = pld.losses[pos]
    return special.logsumexp(logp[None, :] + lam[:, None] * l[None, :], axis=1)


class _ChernoffBounds:
    """Loss interval holding all but ``tail`` mass (per side) of k-fold compositions."""

    _LAMBDAS = np.logspace(-3, 3, 241)

    def __init__(self, pld: PrivacyLossDistribution, tail: float):
        self.log_tail = math.log(tail)
        self.mgf_up = _log_mgf(pld, self._LAMBDAS)
        self.mgf_down = _log_mgf(pld, -self._LAMBDAS)
        self.lo, self.hi = float(pld.losses[0]), float(pld.losses[-1])

    def range(self, k: int):
        up = (k * self.mgf_up - self.log_tail) / self._LAMBDAS
        down = (k * self.mgf_down - self.log_tail) / self._LAMBDAS
        return max(-float(np.min(down)), k * self.lo), min(float(np.min(up)), k * self.hi)


def _convolve(a: PrivacyLossDistribution, b: PrivacyLossDistribution, lower: float, upper: float,
              ) -> PrivacyLossDistribution:
    if a.grid_step != b.grid_step:
        raise ValueError('cannot compose PLDs on different grids')
    step = a.grid_step
    masses = signal.fftconvolve(a.masses, b.masses)
    np.maximum(masses, 0.0, out=masses)
    offset = a.offset + b.offset
    i_lo = max(offset, math.floor(lower / step))
    i_hi = min(offset + len(masses) - 1, math.ceil(upper / step))
    if i_hi - i_lo + 1 > MAX_GRID_POINTS:
        raise AccountantError(f'composed grid needs {i_hi - i_lo + 1} points; '
                              'increase grid_step or reduce steps')
    lo_idx, hi_idx = i_lo - offset, i_hi - offset
    cut_low = float(np.sum(masses[:lo_idx]))
    cut_high = float(np.sum(masses[hi_idx + 1:]))
    kept = masses[lo_idx:hi_idx + 1].copy()
    kept[0] += cut_low
    inf_mass = 1.0 - (1.0 - a.infinity_mass) * (1.0 - b.infinity_mass)
    # Convolution of finite parts can't carry mass that was already truncated.
    trunc = a.truncation_mass + b.truncation_mass + cut_high
    return PrivacyLossDistribution(step, i_lo, kept, infinity_mass=inf_mass, truncation_mass=trunc)


def compose(pld: PrivacyLossDistribution, k: int,
            tail_mass: float = DEFAULT_TAIL_MASS) -> PrivacyLossDistribution:
    """k-fold self-composition by repeated squaring.

    After every convolution the grid is cut to a Chernoff interval of the
    partial composition; mass cut from the top accumulates in
    ``truncation_mass``.
    """
    if int(k) != k or k < 1:
        raise ValueError(f'k must be a positive integer, got {k}')
    bounds = _ChernoffBounds(pld, tail_mass)
    result = None
    base, base_k = pld, 1
    k = int(k)
    while True:
        if k & 1:
            if result is None:
                result, result_k = base, base_k
            else:
                result_k += base_k
                lo, hi = bounds.range(result_k)
                result = _convolve(result, base, lo, hi)
        k >>= 1
        if not k:
            return result
        base_k *= 2
        lo, hi = bounds.range(base_k)
        base = _convolve(base, base, lo, hi)


@functools.lru_cache(maxsize=512)
def _composed(sigma, q, steps, direction, grid_step):
    return compose(pld_single_step(sigma, q, direction, grid_step), steps)


def epsilon_at_delta(params: PoissonAccountantParams, grid_step: float = DEFAULT_GRID_STEP) -> float:
    """Tight epsilon of the composed subsampled Gaussian at ``params.delta``.

    Both adjacency directions are composed and the larger epsilon is reported.
    """
    eps = []
    for direction in ('add', 'remove'):
        pld = _composed(float(params.noise_multiplier), float(params.sampling_rate),
                        int(params.total_steps), direction, grid_step)
        eps.append(pld.epsilon_for(params.delta))
    return max(eps)


def delta_at_epsilon(params: PoissonAccountantParams, eps, grid_step: float = DEFAULT_GRID_STEP):
    """delta(eps) curve (max over directions) of the composed mechanism."""
    out = None
    for direction in ('add', 'remove'):
        pld = _composed(float(params.noise_multiplier), float(params.sampling_rate),
                        int(params.total_steps), direction, grid_step)
        d = np.atleast_1d(pld.delta_at(eps))
        out = d if out is None else np.maximum(out, d)
    return out if np.ndim(eps) else float(out[0])


def composed_truncation_mass(params: PoissonAccountantParams,
                             grid_step: float = DEFAULT_GRID_STEP) -> float:
    return max(_composed(float(params.noise_multiplier), float(params.sampling_rate),
                         int(params.total_steps), d, grid_step).truncation_mass
               for d in ('add', 'remove'))


# ---------------------------------------------------------------------------
# RDP cross-check.

DEFAULT_RDP_ORDERS = tuple(np.concatenate([np.linspace(1.01, 8, 300), np.linspace(8.1, 64, 300),
                                           [80, 96, 128, 192, 256, 512, 1024]]))


def _log_add(a, b):
    return np.logaddexp(a, b)


def _log_sub(a, b):
    """log(e^a - e^b) for a >= b."""
    if b == -np.inf:
        return a
    if a <= b:
        return -np.inf
    return a + math.log1p(-math.exp(b - a))


def _log_a_int(q, sigma, alpha: int):
    i = np.arange(alpha + 1)
    log_coef = special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
    terms = log_coef + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2 * sigma**2)
    return float(special.logsumexp(terms))


def _log_a_frac(q, sigma, alpha: float):
    log_a0, log_a1 = -np.inf, -np.inf
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        if coef == 0:
            # Integer order: the series is a finite binomial sum.
            break
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = special.log_ndtr((z0 - i) / sigma)
        log_e1 = special.log_ndtr((j - z0) / sigma)
        log_s0 = log_t0 + (i * i - i) / (2 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma**2) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30:
            break
    return float(_log_add(log_a0, log_a1))


def rdp_single_step(sigma: float, q: float, alpha: float) -> float:
    """Renyi divergence of order ``alpha`` for one subsampled Gaussian step."""
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        return _log_a_int(q, sigma, int(alpha)) / (alpha - 1)
    return _log_a_frac(q, sigma, alpha) / (alpha - 1)


def rdp_epsilon(params: PoissonAccountantParams, orders: Sequence[float] = DEFAULT_RDP_ORDERS) -> float:
    """Epsilon upper bound from RDP with the Balle et al. (2020) conversion."""
    orders = list(orders)
    if not orders:
        raise ValueError('orders must be non-empty')
    if min(orders) <= 1:
        raise ValueError('RDP orders must be > 1')
    log_delta = math.log(params.delta)
    best = np.inf
    for a in orders:
        rdp = params.total_steps * rdp_single_step(params.noise_multiplier, params.sampling_rate, a)
        eps = rdp + math.log1p(-1 / a) - (log_delta + math.log(a)) / (a - 1)
        best = min(best, eps)
    return max(0.0, float(best))


# ---------------------------------------------------------------------------
# Calibration and trade-off envelope.

SIGMA_BRACKET = (1e-2, 1e2)


def _eps_or_inf(sigma, q, steps, delta, grid_step):
    try:
        return epsilon_at_delta(PoissonAccountantParams(sigma, q, steps, delta), grid_step)
    except AccountantError:
        return math.inf


def calibrate_sigma(eps_target: float, q: float, total_steps: int, delta: float,
                    tol: float = 1e-3, grid_step: float = DEFAULT_GRID_STEP) -> float:
    """Noise multiplier whose Poisson epsilon is within ``tol`` of ``eps_target``.

    Bisection in log(sigma) on the monotone map sigma -> epsilon.

    Raises:
      AccountantError: if the target is not reachable for sigma in SIGMA_BRACKET.
    """
    if not eps_target > 0:
        raise ValueError(f'eps_target must be > 0, got {eps_target}')
    lo, hi = SIGMA_BRACKET
    f = functools.partial(_eps_or_inf, q=q, steps=total_steps, delta=delta, grid_step=grid_step)
    eps_lo, eps_hi = f(lo), f(hi)
    if eps_hi > eps_target + tol or eps_lo < eps_target - tol:
        raise AccountantError(
            f'eps_target={eps_target:g} not reachable for sigma in [{lo:g}, {hi:g}] '
            f'(eps ranges over [{eps_hi:.4g}, {eps_lo:.4g}])')
    if abs(eps_lo - eps_target) <= tol:
        return lo
    if abs(eps_hi - eps_target) <= tol:
        return hi
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        eps = f(mid)
        if abs(eps - eps_target) <= tol:
            return mid
        if eps > eps_target:
            lo = mid
        else:
            hi = mid
    raise AccountantError(f'calibration did not converge for eps_target={eps_target:g}')


def tradeoff_epsdelta(eps: float, delta: float, alpha):
    """Lowest false-negative rate allowed by (eps, delta)-DP at false-positive rate ``alpha``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.maximum.reduce([np.zeros_like(alpha), 1 - delta - np.exp(eps) * alpha,
                              np.exp(-eps) * (1 - delta - alpha)])
    return beta if beta.ndim else float(beta)
