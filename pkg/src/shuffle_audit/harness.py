"""End-to-end audits: the distinguishing game, sweeps and the shuffle-bug audits.

Observations are generated in fixed-size chunks. Each chunk draws from its
own keyed stream, indexed by (repeat, world, chunk), so results do not
depend on how chunks are spread over worker threads. Matrices are scored as
soon as they are generated; only scores are kept.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
import os
import tempfile
from concurrent import futures
from typing import Callable, Iterable, Sequence

import numpy as np

from . import accountant, mechanism, scoring
from .core import (ConfigError, MechanismParams, RngStreamKey, SamplerKind, SamplerSpec,
                   ThreatModel, derive_stream)
from .estimator import AuditResult, ScoreSet, estimate_eps, summarize_repeats

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 4096
SPILL_THRESHOLD = 10**7
DEFAULT_BUFFER_GUESSES = (1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100)


@dataclasses.dataclass(frozen=True)
class ExperimentPlan:
    """One audit configuration.

    ``observations`` counts both worlds together; half come from each.
    When ``eps_target`` is set the noise multiplier is calibrated so that the
    Poisson accountant reports that epsilon, overriding ``params``.
    """

    params: MechanismParams
    sampler: SamplerSpec = SamplerSpec.full_shuffle()
    threat: ThreatModel = ThreatModel.WORST_CASE
    observations: int = 10**6
    repeats: int = 5
    confidence: float = 0.95
    seed: int = 0
    eps_target: float | None = None
    plan_id: str = 'plan'
    chunk_size: int = DEFAULT_CHUNK

    def __post_init__(self):
        object.__setattr__(self, 'threat', ThreatModel(self.threat))
        if self.observations < 2 or self.observations % 2:
            raise ConfigError(f'observations N must be even and >= 2 (N/2 per world), '
                              f'got {self.observations}')
        if self.repeats < 1:
            raise ConfigError(f'repeats must be >= 1, got {self.repeats}')
        if not 0 < self.confidence < 1:
            raise ConfigError(f'confidence must be in (0, 1), got {self.confidence}')
        if self.eps_target is not None and not self.eps_target > 0:
            raise ConfigError(f'eps_target must be > 0, got {self.eps_target}')
        if self.chunk_size < 1:
            raise ConfigError(f'chunk_size must be >= 1, got {self.chunk_size}')
        self.sampler.validate(self.params.dataset_size, self.params.batch_size)

    @property
    def per_world(self) -> int:
        return self.observations // 2

    def to_config(self) -> dict:
        """Flat key-value form, the inverse of :func:`plan_from_config`."""
        p = self.params
        cfg = {
            'plan_id': self.plan_id,
            'batch_size': p.batch_size,
            'steps_per_epoch': p.steps_per_epoch,
            'epochs': p.epochs,
            'noise_multiplier': p.noise_multiplier,
            'clip_norm': p.clip_norm,
            'delta': p.delta,
            'sampler': self.sampler.kind.value,
            'threat': self.threat.value,
            'observations': self.observations,
            'repeats': self.repeats,
            'confidence': self.confidence,
            'seed': self.seed,
            'chunk_size': self.chunk_size,
        }
        if self.sampler.buffer is not None:
            cfg['buffer'] = self.sampler.buffer
        if self.eps_target is not None:
            cfg['eps_target'] = self.eps_target
        return cfg


def plan_from_config(cfg: dict) -> ExperimentPlan:
    try:
        params = MechanismParams(
            batch_size=cfg.get('batch_size', 1),
            steps_per_epoch=cfg['steps_per_epoch'],
            epochs=cfg.get('epochs', 1),
            noise_multiplier=cfg.get('noise_multiplier', 1.0),
            clip_norm=cfg.get('clip_norm', 1.0),
            delta=cfg.get('delta', 1e-5),
        )
    except KeyError as e:
        raise ConfigError(f'missing config key {e.args[0]}') from None
    try:
        sampler = SamplerSpec(SamplerKind(cfg.get('sampler', 'full_shuffle')), cfg.get('buffer'))
        threat = ThreatModel(cfg.get('threat', 'worst_case'))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return ExperimentPlan(
        params=params, sampler=sampler, threat=threat,
        observations=cfg.get('observations', 10**6),
        repeats=cfg.get('repeats', 5),
        confidence=cfg.get('confidence', 0.95),
        seed=cfg.get('seed', 0),
        eps_target=cfg.get('eps_target'),
        plan_id=cfg.get('plan_id', 'plan'),
        chunk_size=cfg.get('chunk_size', DEFAULT_CHUNK),
    )


# ---------------------------------------------------------------------------
# Noise calibration and the theoretical baseline.

@functools.lru_cache(maxsize=256)
def _calibrated_sigma(eps_target, q, steps, delta):
    return accountant.calibrate_sigma(eps_target, q, steps, delta)


def resolve_sigma(plan: ExperimentPlan) -> ExperimentPlan:
    """Returns the plan with its noise multiplier calibrated to ``eps_target``, if set."""
    if plan.eps_target is None:
        return plan
    p = plan.params
    sigma = _calibrated_sigma(plan.eps_target, p.sampling_rate, p.total_steps, p.delta)
    return dataclasses.replace(plan, params=dataclasses.replace(p, noise_multiplier=sigma))


def theoretical_epsilon(params: MechanismParams) -> float:
    """Poisson-sampling epsilon for the same noise and q = B/n = 1/T."""
    return accountant.epsilon_at_delta(accountant.PoissonAccountantParams(
        params.noise_multiplier, params.sampling_rate, params.total_steps, params.delta))


# ---------------------------------------------------------------------------
# Observation generation.

def stream_index(repeat: int, world: int, chunk: int) -> int:
    return (repeat << 48) | (world << 47) | chunk


def _chunks(total: int, size: int):
    for i, start in enumerate(range(0, total, size)):
        yield i, min(size, total - start)


def generate_chunk(plan: ExperimentPlan, world: int, repeat: int, chunk: int, count: int,
                   null: bool = False) -> np.ndarray:
    """Observation matrices of one chunk, shape (count, E, T).

    With ``null`` both worlds run without the target, which is the
    soundness check: nothing should be detectable.
    """
    stream = derive_stream(RngStreamKey(plan.seed, stream_index(repeat, world, chunk)))
    bit = 0 if null else world
    if plan.threat is ThreatModel.BTS_AUDIT:
        bug = plan.sampler.kind is SamplerKind.BATCH_THEN_SHUFFLE
        return mechanism.bts_batch(plan.params, bit, bug, stream, count)
    return mechanism.surrogate_batch(plan.threat, plan.params, plan.sampler, bit, stream, count)


def _score_buffer(n: int, columns: int):
    shape = (n, columns) if columns > 1 else (n,)
    if n > SPILL_THRESHOLD:
        fd, path = tempfile.mkstemp(prefix='scores-', suffix='.f64')
        os.close(fd)
        buf = np.memmap(path, dtype=np.float64, mode='w+', shape=shape)
        os.unlink(path)
        return buf
    return np.empty(shape)


def collect_scores(plan: ExperimentPlan, repeat: int, world: int,
                   scorers: Sequence[Callable[[np.ndarray], np.ndarray]],
                   threads: int = 1, null: bool = False) -> np.ndarray:
    """Scores of N/2 observations from one world, one column per scorer."""
    n = plan.per_world
    out = _score_buffer(n, len(scorers))
    out2d = out.reshape(n, len(scorers))

    def work(item):
        chunk, count = item
        obs = generate_chunk(plan, world, repeat, chunk, count, null=null)
        start = chunk * plan.chunk_size
        for j, scorer in enumerate(scorers):
            out2d[start:start + count, j] = scorer(obs)

    items = list(_chunks(n, plan.chunk_size))
    if threads > 1:
        with futures.ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, items))
    else:
        for item in items:
            work(item)
    return out


# ---------------------------------------------------------------------------
# Audits.

def run_audit(plan: ExperimentPlan, threads: int = 1, null: bool = False,
              keep_curve: bool = False) -> AuditResult:
    """Plays the distinguishing game N/2 times per world for every repeat."""
    plan = resolve_sigma(plan)
    hp = scoring.hypothesis_for(plan.threat, plan.params)
    scorer = functools.partial(scoring.score_batch, hp=hp)
    results = []
    for r in range(plan.repeats):
        s1 = collect_scores(plan, r, 1, [scorer], threads, null)
        s0 = collect_scores(plan, r, 0, [scorer], threads, null)
        res = estimate_eps(ScoreSet(s1, s0), 1 - plan.confidence, plan.params.delta,
                           keep_curve=keep_curve)
        logger.info('%s repeat %d: eps_emp=%.4f', plan.plan_id, r, res.eps_emp)
        results.append(res)
    return summarize_repeats(results)


@dataclasses.dataclass(frozen=True)
class PlanOutcome:
    plan: ExperimentPlan
    result: AuditResult | None
    eps_theory: float | None
    error: str | None = None

    @property
    def gap_ratio(self) -> float:
        if self.result is None or not self.eps_theory:
            return math.nan
        return self.result.eps_emp / self.eps_theory


RESULT_COLUMNS = ['plan_id', 'threat', 'sampler', 'B', 'T', 'E', 'sigma', 'delta', 'N', 'repeat',
                  'eps_emp', 'eps_theory', 'gap_ratio', 'alpha_bar', 'beta_bar', 'threshold',
                  'seed']


def outcome_rows(outcome: PlanOutcome) -> list[dict]:
    """One results row per repeat."""
    if outcome.result is None:
        return []
    plan = resolve_sigma(outcome.plan)
    p = plan.params
    per = outcome.result.repeat_results or (outcome.result,)
    rows = []
    for r, res in enumerate(per):
        gap = res.eps_emp / outcome.eps_theory if outcome.eps_theory else math.nan
        rows.append({
            'plan_id': plan.plan_id, 'threat': plan.threat.value, 'sampler': plan.sampler.label(),
            'B': p.batch_size, 'T': p.steps_per_epoch, 'E': p.epochs,
            'sigma': p.noise_multiplier, 'delta': p.delta, 'N': plan.observations, 'repeat': r,
            'eps_emp': res.eps_emp, 'eps_theory': outcome.eps_theory, 'gap_ratio': gap,
            'alpha_bar': res.alpha_bar, 'beta_bar': res.beta_bar, 'threshold': res.threshold,
            'seed': plan.seed,
        })
    return rows


def sweep(plans: Iterable[ExperimentPlan], threads: int = 1) -> list[PlanOutcome]:
    """Audits every plan next to its Poisson epsilon; failures don't stop the sweep."""
    plans = list(plans)
    if not plans:
        raise ValueError('sweep needs at least one plan')
    outcomes = []
    for plan in plans:
        try:
            resolved = resolve_sigma(plan)
            eps_theory = theoretical_epsilon(resolved.params)
            result = run_audit(resolved, threads)
            outcomes.append(PlanOutcome(plan, result, eps_theory))
        except (accountant.AccountantError, scoring.ScoringError, ValueError) as e:
            logger.warning('plan %s failed: %s', plan.plan_id, e)
            outcomes.append(PlanOutcome(plan, None, None, error=f'{type(e).__name__}: {e}'))
    return outcomes


@dataclasses.dataclass(frozen=True)
class PartialShuffleOutcome:
    best: AuditResult
    per_guess: dict
    best_guess_per_repeat: tuple


def partial_shuffle_audit(plan: ExperimentPlan, buffer_guesses: Sequence[int] | None = None,
                          threads: int = 1) -> PartialShuffleOutcome:
    """Audit of a sampler that may shuffle only inside a buffer.

    The auditor does not know the buffer, so it scores only the first k
    batches of every epoch for each guess k, reusing one set of observations,
    and keeps the best guess.
    """
    if plan.sampler.kind not in (SamplerKind.PARTIAL_SHUFFLE, SamplerKind.FULL_SHUFFLE):
        raise ConfigError('partial shuffle audit needs a partial or full shuffle sampler')
    if plan.threat is not ThreatModel.PARTIALLY_INFORMED:
        raise ConfigError('partial shuffle audit uses the partially informed threat model')
    t = plan.params.steps_per_epoch
    if buffer_guesses is None:
        buffer_guesses = [k for k in DEFAULT_BUFFER_GUESSES if k <= t]
    guesses = sorted(set(int(k) for k in buffer_guesses))
    if not guesses or guesses[0] < 1 or guesses[-1] > t:
        raise ConfigError(f'buffer guesses must lie in 1..T={t}, got {list(buffer_guesses)}')
    plan = resolve_sigma(plan)
    scorers = [functools.partial(scoring.score_batch,
                                 hp=scoring.hypothesis_for(plan.threat, plan.params, support=k))
               for k in guesses]
    per_guess = {k: [] for k in guesses}
    best_each, best_k = [], []
    for r in range(plan.repeats):
        s1 = collect_scores(plan, r, 1, scorers, threads).reshape(plan.per_world, -1)
        s0 = collect_scores(plan, r, 0, scorers, threads).reshape(plan.per_world, -1)
        this = []
        for j, k in enumerate(guesses):
            res = estimate_eps(ScoreSet(s1[:, j], s0[:, j]), 1 - plan.confidence, plan.params.delta)
            per_guess[k].append(res)
            this.append(res)
        j_best = int(np.argmax([res.eps_emp for res in this]))
        best_each.append(this[j_best])
        best_k.append(guesses[j_best])
    return PartialShuffleOutcome(
        best=summarize_repeats(best_each),
        per_guess={k: summarize_repeats(v) for k, v in per_guess.items()},
        best_guess_per_repeat=tuple(best_k),
    )


def bts_audit(plan: ExperimentPlan, threads: int = 1) -> tuple[AuditResult, AuditResult]:
    """Audits the +1/-1 layout with batch-then-shuffle (bug) and with a full shuffle.

    Returns:
      (result with the bug, result without the bug).
    """
    base = dataclasses.replace(plan, threat=ThreatModel.BTS_AUDIT)
    with_bug = run_audit(dataclasses.replace(base, sampler=SamplerSpec.batch_then_shuffle()), threads)
    without = run_audit(dataclasses.replace(base, sampler=SamplerSpec.full_shuffle()), threads)
    return with_bug, without
