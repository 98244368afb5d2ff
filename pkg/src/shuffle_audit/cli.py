"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import accountant, harness, scoring
from .core import ConfigError, load_config, parse_overrides
from .estimator import AuditResult

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUTPUT_DIR_ENV = 'SHUFFLE_AUDIT_OUTPUT_DIR'
DEFAULT_OUTPUT_DIR = 'shuffle_audit_out'

logger = logging.getLogger('shuffle_audit')

# Column lists of every plot-data recipe.
RECIPES = {
    'steps_sweep': ['plan_id', 'repeat', 'T', 'sigma', 'eps_emp', 'eps_theory'],
    'tradeoff_raw': ['plan_id', 'repeat', 'threshold', 'fpr', 'fnr'],
    'tradeoff_cp': ['plan_id', 'repeat', 'threshold', 'fpr', 'fnr'],
    'tradeoff_envelope': ['plan_id', 'repeat', 'fpr', 'fnr'],
    'partial_shuffle': ['plan_id', 'repeat', 'buffer', 'eps_emp', 'best_guess'],
    'batch_then_shuffle': ['plan_id', 'repeat', 'bug', 'eps_emp'],
}


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return 'true' if v else 'false'
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ''
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    with open(path, 'w', newline='') as f:
        w = csv.writer(f, lineterminator='\n')
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])
    return path


def emit_plot_data(recipe: str, rows: Iterable[dict], output_dir, warnings: Sequence[str] = ()
                   ) -> Path:
    """Writes ``<recipe>.csv`` sorted by plan_id then repeat (stable for ties).

    Warnings, such as plans that failed and are missing from the table, go to
    ``<recipe>.warnings.txt``.
    """
    if recipe not in RECIPES:
        raise ConfigError(f'unknown plot recipe {recipe!r}')
    output_dir = Path(output_dir)
    rows = sorted(rows, key=lambda r: (str(r['plan_id']), int(r['repeat'])))
    path = write_csv(output_dir / f'{recipe}.csv', RECIPES[recipe], rows)
    if warnings:
        (output_dir / f'{recipe}.warnings.txt').write_text(''.join(w + '\n' for w in warnings))
    return path


def _thin(n: int, max_points: int) -> np.ndarray:
    if n <= max_points:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, max_points).round().astype(int))


def curve_rows(plan_id: str, result: AuditResult, max_points: int = 1000):
    """Raw and CP-bounded rows for each repeat's curve."""
    raw, cp = [], []
    for r, res in enumerate(result.repeat_results or (result,)):
        c = res.curve
        if c is None:
            continue
        for i in _thin(len(c.thresholds), max_points):
            base = {'plan_id': plan_id, 'repeat': r, 'threshold': c.thresholds[i]}
            raw.append({**base, 'fpr': c.fpr_raw[i], 'fnr': c.fnr_raw[i]})
            cp.append({**base, 'fpr': c.fpr_upper[i], 'fnr': c.fnr_upper[i]})
    return raw, cp


def envelope_rows(plan_id: str, eps: float, delta: float, repeats: int, points: int = 101):
    alpha = np.linspace(0.0, 1.0, points)
    beta = accountant.tradeoff_epsdelta(eps, delta, alpha)
    return [{'plan_id': plan_id, 'repeat': r, 'fpr': a, 'fnr': b}
            for r in range(repeats) for a, b in zip(alpha, beta)]


# ---------------------------------------------------------------------------
# Run bookkeeping.

def _git_revision() -> str:
    try:
        out = subprocess.run(['git', 'rev-parse', 'HEAD'], capture_output=True, text=True,
                             timeout=5, check=True, cwd=Path(__file__).parent)
        return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return 'unknown'


def write_manifest(output_dir: Path, command: str, config: dict, seed, wall: float,
                   plans: list | None = None) -> Path:
    manifest = {
        'command': command,
        'config': config,
        'seed': seed,
        'git_revision': _git_revision(),
        'wall_time_s': round(wall, 3),
    }
    if plans is not None:
        manifest['plans'] = plans
    path = output_dir / 'run_manifest.json'
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    return path


def _config_from_args(args) -> dict:
    cfg = load_config(args.config, parse_overrides(args.set))
    if args.seed is not None:
        cfg['seed'] = args.seed
    return cfg


def _output_dir(args) -> Path:
    out = Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sidecar(path: Path, outcomes: Sequence[harness.PlanOutcome]) -> None:
    entries = []
    for o in outcomes:
        resolved = harness.resolve_sigma(o.plan) if o.error is None else o.plan
        entry = {
            'plan': o.plan.to_config(),
            'noise_multiplier_resolved': resolved.params.noise_multiplier,
            'idealized': True,
            'eps_theory': o.eps_theory,
            'error': o.error,
        }
        if o.result is not None:
            entry.update(eps_emp_mean=o.result.mean, eps_emp_std=o.result.std,
                         eps_emp_repeats=list(o.result.repeats), capped=o.result.capped)
        entries.append(entry)
    path.write_text(json.dumps(entries, indent=2, sort_keys=True) + '\n')


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_accountant(args, out: Path) -> dict:
    p = accountant.PoissonAccountantParams(args.sigma, args.q, args.steps, args.delta)
    eps = accountant.epsilon_at_delta(p)
    row = {'sigma': args.sigma, 'q': args.q, 'steps': args.steps, 'delta': args.delta,
           'epsilon': eps, 'truncation_mass': accountant.composed_truncation_mass(p)}
    write_csv(out / 'accountant.csv', list(row), [row])
    print(f'epsilon = {eps:.6f}')
    return row


def cmd_calibrate(args, out: Path) -> dict:
    sigma = accountant.calibrate_sigma(args.eps, args.q, args.steps, args.delta)
    row = {'eps_target': args.eps, 'q': args.q, 'steps': args.steps, 'delta': args.delta,
           'sigma': sigma}
    write_csv(out / 'calibrate.csv', list(row), [row])
    print(f'sigma = {sigma:.6f}')
    return row


def _run_outcomes(plans, args, out: Path, with_curves: bool):
    if with_curves:
        # A single audit: errors propagate instead of being recorded.
        plan, = plans
        resolved = harness.resolve_sigma(plan)
        eps_theory = harness.theoretical_epsilon(resolved.params)
        result = harness.run_audit(resolved, args.threads, keep_curve=True)
        outcomes = [harness.PlanOutcome(plan, result, eps_theory)]
    else:
        outcomes = harness.sweep(plans, threads=args.threads)
    rows = [row for o in outcomes for row in harness.outcome_rows(o)]
    write_csv(out / 'results.csv', harness.RESULT_COLUMNS, rows)
    _sidecar(out / 'results.json', outcomes)
    warnings = [f'{o.plan.plan_id}: {o.error}' for o in outcomes if o.error]
    emit_plot_data('steps_sweep', rows, out, warnings)
    return outcomes


def cmd_audit(args, out: Path, cfg: dict) -> None:
    plan = harness.plan_from_config(cfg)
    outcome, = _run_outcomes([plan], args, out, with_curves=True)
    raw, cp = curve_rows(plan.plan_id, outcome.result, args.curve_points)
    emit_plot_data('tradeoff_raw', raw, out)
    emit_plot_data('tradeoff_cp', cp, out)
    emit_plot_data('tradeoff_envelope',
                   envelope_rows(plan.plan_id, outcome.eps_theory, plan.params.delta, 1), out)
    r = outcome.result
    print(f'eps_emp = {r.mean:.4f} +- {r.std:.4f} (theory {outcome.eps_theory:.4f})')


def expand_plans(base: dict, expand: Sequence[str]) -> list[dict]:
    """Cartesian product of ``key=v1,v2,...`` lists over a base config."""
    axes = []
    for item in expand:
        key, values = parse_overrides([item]).popitem()
        axes.append([(key, v) for v in values.split(',') if v])
    plans = []
    for combo in itertools.product(*axes):
        overrides = dict(combo)
        cfg = load_config(None, {**base, **overrides})
        suffix = '_'.join(f'{k}={v}' for k, v in combo)
        cfg['plan_id'] = f"{base.get('plan_id', 'plan')}_{suffix}" if suffix else base.get('plan_id', 'plan')
        plans.append(cfg)
    return plans


def _load_plan_list(path) -> list[dict]:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f'cannot read plan list {path}: {e}') from e
    if isinstance(raw, dict):
        raw = raw.get('plans')
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f'{path} must hold a nonempty list of plans')
    return [load_config(None, entry) for entry in raw]


def cmd_sweep(args, out: Path, cfg: dict) -> list[dict]:
    if args.plans:
        plans = _load_plan_list(args.plans)
    else:
        plans = expand_plans(cfg, args.expand or [])
    if args.seed is not None:
        plans = [{**p, 'seed': args.seed} for p in plans]
    (out / 'plans.json').write_text(json.dumps(plans, indent=2, sort_keys=True) + '\n')
    if args.expand_only:
        print(f'{len(plans)} plans written to {out / "plans.json"}')
        return plans
    outcomes = _run_outcomes([harness.plan_from_config(p) for p in plans], args, out,
                             with_curves=False)
    for o in outcomes:
        if o.error:
            print(f'{o.plan.plan_id}: FAILED {o.error}')
        else:
            print(f'{o.plan.plan_id}: eps_emp = {o.result.mean:.4f} theory = {o.eps_theory:.4f}')
    return plans


def _parse_guesses(cfg: dict):
    raw = cfg.get('buffer_guesses')
    if raw is None:
        return None
    try:
        return [int(v) for v in str(raw).split(',') if v.strip()]
    except ValueError:
        raise ConfigError(f'buffer_guesses must be comma-separated integers, got {raw!r}') from None


def cmd_partial(args, out: Path, cfg: dict) -> None:
    cfg = {'threat': 'partially_informed', **cfg}
    guesses = _parse_guesses(cfg)
    cfg.pop('buffer_guesses', None)
    plan = harness.plan_from_config(cfg)
    res = harness.partial_shuffle_audit(plan, guesses, threads=args.threads)
    label = plan.sampler.buffer if plan.sampler.buffer is not None else plan.params.dataset_size
    rows = [{'plan_id': plan.plan_id, 'repeat': r, 'buffer': label, 'eps_emp': e,
             'best_guess': k}
            for r, (e, k) in enumerate(zip(res.best.repeats, res.best_guess_per_repeat))]
    emit_plot_data('partial_shuffle', rows, out)
    per_k = [{'k': k, 'eps_emp_mean': v.mean, 'eps_emp_std': v.std}
             for k, v in sorted(res.per_guess.items())]
    write_csv(out / 'partial_shuffle_guesses.csv', ['k', 'eps_emp_mean', 'eps_emp_std'], per_k)
    print(f'eps_emp = {res.best.mean:.4f} +- {res.best.std:.4f}; '
          f'best guesses {list(res.best_guess_per_repeat)}')


def cmd_bts(args, out: Path, cfg: dict) -> None:
    cfg = {**cfg, 'threat': 'bts_audit'}
    cfg.pop('sampler', None)
    cfg.pop('buffer', None)
    plan = harness.plan_from_config(cfg)
    with_bug, without = harness.bts_audit(plan, threads=args.threads)
    rows = []
    for bug, res in ((True, with_bug), (False, without)):
        rows += [{'plan_id': plan.plan_id, 'repeat': r, 'bug': bug, 'eps_emp': e}
                 for r, e in enumerate(res.repeats)]
    rows.sort(key=lambda r: (r['repeat'], not r['bug']))
    emit_plot_data('batch_then_shuffle', rows, out)
    print(f'with bug eps_emp = {with_bug.mean:.4f}; without = {without.mean:.4f}')


def cmd_tradeoff(args, out: Path) -> None:
    if args.points < 2:
        raise ConfigError('--points must be >= 2')
    alpha = np.linspace(0.0, 1.0, args.points)
    beta = accountant.tradeoff_epsdelta(args.eps, args.delta, alpha)
    rows = [{'alpha': a, 'beta': b} for a, b in zip(alpha, beta)]
    write_csv(out / 'tradeoff.csv', ['alpha', 'beta'], rows)
    if args.stdout:
        write_csv_to(sys.stdout, ['alpha', 'beta'], rows)


def write_csv_to(stream, columns, rows) -> None:
    w = csv.writer(stream, lineterminator='\n')
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--output-dir', help=f'defaults to ${OUTPUT_DIR_ENV} or ./{DEFAULT_OUTPUT_DIR}')
    common.add_argument('--threads', type=int, default=1)
    common.add_argument('--seed', type=int)
    common.add_argument('-v', '--verbose', action='store_true')

    configured = argparse.ArgumentParser(add_help=False, parents=[common])
    configured.add_argument('--config', help='flat JSON config or a run_manifest.json')
    configured.add_argument('--set', action='append', metavar='KEY=VALUE', default=[],
                            help='override a config key (repeatable)')

    parser = argparse.ArgumentParser(prog='shuffle-audit',
                                     description='Privacy auditing of shuffled DP-SGD.')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('accountant', parents=[common], help='Poisson-subsampled Gaussian epsilon')
    p.add_argument('--sigma', type=float, required=True)
    p.add_argument('--q', type=float, required=True)
    p.add_argument('--steps', type=int, required=True)
    p.add_argument('--delta', type=float, default=1e-5)

    p = sub.add_parser('calibrate', parents=[common], help='noise multiplier for a target epsilon')
    p.add_argument('--eps', type=float, required=True)
    p.add_argument('--q', type=float, required=True)
    p.add_argument('--steps', type=int, required=True)
    p.add_argument('--delta', type=float, default=1e-5)

    p = sub.add_parser('audit', parents=[configured], help='run one audit plan')
    p.add_argument('--curve-points', type=int, default=1000,
                   help='max thresholds per exported trade-off curve')

    p = sub.add_parser('sweep', parents=[configured], help='audit a list of plans')
    p.add_argument('--plans', help='JSON list of flat plan configs (or a sweep manifest)')
    p.add_argument('--expand', action='append', metavar='KEY=V1,V2,...',
                   help='grid axis over the base config (repeatable)')
    p.add_argument('--expand-only', action='store_true', help='write plans.json and stop')

    sub.add_parser('debug-partial-shuffle', parents=[configured],
                   help='audit a sampler for shuffling only within a buffer')
    sub.add_parser('debug-batch-then-shuffle', parents=[configured],
                   help='audit a sampler for batching before shuffling')

    p = sub.add_parser('tradeoff', parents=[common], help='(eps, delta) trade-off envelope')
    p.add_argument('--eps', type=float, required=True)
    p.add_argument('--delta', type=float, required=True)
    p.add_argument('--points', type=int, default=101)
    p.add_argument('--stdout', action='store_true', help='also print the CSV')
    return parser


def _dispatch(args) -> None:
    if args.threads < 1:
        raise ConfigError('--threads must be >= 1')
    out = _output_dir(args)
    start = time.monotonic()
    plans = None
    cfg: dict = {}
    if args.command == 'accountant':
        cfg = {k: getattr(args, k) for k in ('sigma', 'q', 'steps', 'delta')}
        cmd_accountant(args, out)
    elif args.command == 'calibrate':
        cfg = {k: getattr(args, k) for k in ('eps', 'q', 'steps', 'delta')}
        cmd_calibrate(args, out)
    elif args.command == 'tradeoff':
        cfg = {k: getattr(args, k) for k in ('eps', 'delta', 'points')}
        cmd_tradeoff(args, out)
    else:
        cfg = _config_from_args(args)
        if args.command == 'audit':
            cmd_audit(args, out, cfg)
        elif args.command == 'sweep':
            plans = cmd_sweep(args, out, cfg)
        elif args.command == 'debug-partial-shuffle':
            cmd_partial(args, out, cfg)
        else:
            cmd_bts(args, out, cfg)
    write_manifest(out, args.command, cfg, cfg.get('seed', args.seed),
                   time.monotonic() - start, plans)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        _dispatch(args)
    except ConfigError as e:
        print(f'config error: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except (accountant.AccountantError, scoring.ScoringError, ArithmeticError) as e:
        print(f'numerical failure: {e}', file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f'I/O error: {e}', file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f'config error: {e}', file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
