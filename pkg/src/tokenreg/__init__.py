"""
tokenreg: token-regulated group relative policy optimization at desk scale.

A small MLP policy, two verifiable toy tasks, a reverse-mode graph for exact
gradients, and the GRPO / TR-GRPO objectives on top of it. TR-GRPO scales each
token's contribution by a bounded weight that grows with the token's probability,
which shrinks the gradient share of low-probability tokens.
"""

__version__ = '0.1.0'

from .config import TrainConfig, parse_config
from .errors import ConfigError, StepAbortedError, TokenRegError
from .grpo import group_advantages, make_term, trust_indicator
from .models import CheckResult, GroupBatch, Prompt, RunResult, StepMetrics, TokenTerm
from .regulation import per_token_gradient, token_weight, weight_curve
from .theory import bound_constants, matrix_chain_sandwich, token_gradient_bound
from .trainer import run_experiment
from .verify import run_suite

__all__ = [
    'TrainConfig',
    'parse_config',
    'TokenRegError',
    'ConfigError',
    'StepAbortedError',
    'group_advantages',
    'make_term',
    'trust_indicator',
    'Prompt',
    'GroupBatch',
    'TokenTerm',
    'StepMetrics',
    'CheckResult',
    'RunResult',
    'token_weight',
    'per_token_gradient',
    'weight_curve',
    'bound_constants',
    'matrix_chain_sandwich',
    'token_gradient_bound',
    'run_experiment',
    'run_suite',
]
