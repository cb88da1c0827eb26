"""
Numerical checks of the gradient-norm bounds.

Gradients are row covectors. For hidden block theta_l the score gradient is

    grad_{theta_l} log pi = (1_k - p) W^T J_{L-1}^T ... J_l^T G_l^T

so each factor is the transpose of the row-convention Jacobian from policy.py, and its
gains are sqrt(lambda_min(A A^T)) and sigma_max(A) of that transposed matrix. The
unembedding block contributes ||a_L|| * ||1_k - p|| exactly. The embedding is not part
of the bound.
"""

import logging
import math
from typing import List, Sequence, Tuple

import numpy as np

from .config import SharpnessConfig
from .errors import DeskScaleError, ShapeError
from .linalg import lower_gain, upper_gain
from .models import BoundConstants, BoundReport, TokenTerm
from .policy import PolicyParams, numerical_layer_jacobians, score_gradient, token_distribution

logger = logging.getLogger(__name__)

MAX_CHAIN = 4
MAX_CHAIN_DIM = 8
BOUND_SLACK = 1e-9


def matrix_chain_sandwich(x: np.ndarray,
                          matrices: Sequence[np.ndarray]) -> Tuple[float, float, float]:
    """(lower, ||x A_1 ... A_m||, upper) with the per-factor gains of each A_i."""
    x = np.asarray(x, dtype=np.float64)
    if len(matrices) > MAX_CHAIN:
        raise DeskScaleError(f"chain of {len(matrices)} matrices exceeds {MAX_CHAIN}")
    y = x
    lower = upper = float(np.linalg.norm(x))
    for i, a in enumerate(matrices):
        a = np.asarray(a, dtype=np.float64)
        if max(a.shape) > MAX_CHAIN_DIM:
            raise DeskScaleError(f"matrix {i} has shape {a.shape}; cap is {MAX_CHAIN_DIM}")
        if a.shape[0] != y.shape[0]:
            raise ShapeError(f"matrix {i} has {a.shape[0]} rows, covector has {y.shape[0]}")
        y = y @ a
        lower *= lower_gain(a)
        upper *= upper_gain(a)
    return lower, float(np.linalg.norm(y)), upper


def score_norm_bounds(p: np.ndarray, k: int) -> Tuple[float, float, float]:
    """(1 - p_k, ||1_k - p||, sqrt(2) * (1 - p_k))."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p must be a probability vector")
    if not 0 <= k < p.size:
        raise ValueError(f"token index {k} outside distribution of size {p.size}")
    e = np.zeros_like(p)
    e[k] = 1.0
    gap = 1.0 - p[k]
    return float(gap), float(np.linalg.norm(e - p)), float(math.sqrt(2.0) * gap)


def bound_constants(params: PolicyParams, context: Sequence[int], include_head: bool = True,
                    method: str = 'chain') -> BoundConstants:
    """Pointwise gains of every factor in the score-gradient chain at this input."""
    jac = numerical_layer_jacobians(params, context, method=method)
    w_t = jac.W.T
    return BoundConstants(
        a_w=lower_gain(w_t),
        b_w=upper_gain(w_t),
        a_g=[lower_gain(g.T) for g in jac.G],
        b_g=[upper_gain(g.T) for g in jac.G],
        a_j=[lower_gain(j.T) for j in jac.J],
        b_j=[upper_gain(j.T) for j in jac.J],
        layers=params.layers,
        head_gain=float(np.linalg.norm(jac.trace.activations[-1])) if include_head else None,
    )


def _chain_sums(c: BoundConstants) -> Tuple[float, float, int]:
    lower = upper = 0.0
    for l in range(c.layers):
        # J indices l .. L-2 carry a_{l+1} forward to a_L
        lower += c.a_w * c.a_g[l] * float(np.prod(c.a_j[l:]))
        upper += c.b_w * c.b_g[l] * float(np.prod(c.b_j[l:]))
    blocks = c.layers
    if c.head_gain is not None:
        lower += c.head_gain
        upper += c.head_gain
        blocks += 1
    return lower, upper, blocks


def token_gradient_bound(term: TokenTerm, w: float, constants: BoundConstants,
                         measured_g_norm: float, slack: float = BOUND_SLACK) -> BoundReport:
    """Sandwich w(1-pi)|gamma|/sqrt(L) * sum a  <=  ||g||  <=  sqrt(2) w(1-pi)|gamma| * sum b."""
    lower_sum, upper_sum, blocks = _chain_sums(constants)
    factor = w * (1.0 - term.pi) * abs(term.gamma)
    return BoundReport(
        lower=factor / math.sqrt(blocks) * lower_sum,
        measured=float(measured_g_norm),
        upper=math.sqrt(2.0) * factor * upper_sum,
        slack=slack,
    )


def bounded_blocks(params: PolicyParams, include_head: bool = True) -> List[str]:
    names = []
    for l in range(1, params.layers + 1):
        names.extend(params.layer_names(l))
    if include_head:
        names.append('unembedding')
    return names


def token_gradient_norm(params: PolicyParams, context: Sequence[int], token: int,
                        gamma: float, w: float, include_head: bool = True) -> float:
    """||gamma * w * grad log pi|| over the bounded parameter blocks."""
    grads = score_gradient(params, context, token)
    sq = sum(float(np.sum(grads[name] ** 2)) for name in bounded_blocks(params, include_head))
    return abs(gamma) * w * math.sqrt(sq)


def check_token_bound(params: PolicyParams, context: Sequence[int], token: int,
                      term: TokenTerm, w: float, include_head: bool = True) -> BoundReport:
    """Evaluate pi at this input, measure the autodiff norm and compare with the bounds."""
    pi = float(token_distribution(params, context).probs[token])
    term = TokenTerm(pi, term.pi_old, term.pi_ref, term.advantage, term.ratio,
                     term.indicator, term.gamma, w)
    constants = bound_constants(params, context, include_head)
    measured = token_gradient_norm(params, context, token, term.gamma, w, include_head)
    report = token_gradient_bound(term, w, constants, measured)
    if not report.passed:
        logger.debug("bound violated: lower=%.3e measured=%.3e upper=%.3e",
                     report.lower, report.measured, report.upper)
    return report


def sharpness_surrogate(loss_value: float, grad_norm: float, cfg: SharpnessConfig) -> float:
    """Loss plus rho times the gradient norm: first-order proxy for the worst-case loss."""
    if grad_norm < 0:
        raise ValueError(f"gradient norm must be >= 0, got {grad_norm}")
    return loss_value + cfg.rho * grad_norm
