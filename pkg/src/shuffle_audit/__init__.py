"""Privacy auditing of DP-SGD trained with shuffled batches."""

from .accountant import (AccountantError, PoissonAccountantParams, calibrate_sigma,
                         epsilon_at_delta, rdp_epsilon, tradeoff_epsdelta)
from .core import (ConfigError, MechanismParams, ObservationMatrix, RngStreamKey, SamplerKind,
                   SamplerSpec, ThreatModel, derive_stream, load_config)
from .estimator import (AuditResult, ScoreSet, clopper_pearson_upper, empirical_tradeoff,
                        estimate_eps)
from .harness import (ExperimentPlan, bts_audit, partial_shuffle_audit, run_audit, sweep)
from .scoring import HypothesisPair, ScoringError, hypothesis_for, log_lr_matrix

__version__ = '0.1.0'

__all__ = [
    'AccountantError', 'PoissonAccountantParams', 'calibrate_sigma', 'epsilon_at_delta',
    'rdp_epsilon', 'tradeoff_epsdelta', 'ConfigError', 'MechanismParams', 'ObservationMatrix',
    'RngStreamKey', 'SamplerKind', 'SamplerSpec', 'ThreatModel', 'derive_stream', 'load_config',
    'AuditResult', 'ScoreSet', 'clopper_pearson_upper', 'empirical_tradeoff', 'estimate_eps',
    'ExperimentPlan', 'bts_audit', 'partial_shuffle_audit', 'run_audit', 'sweep',
    'HypothesisPair', 'ScoringError', 'hypothesis_for', 'log_lr_matrix',
]
