"""
Token regulation: the probability-shaping weight, its ablation schemes, and the
weighted surrogate and KL terms of TR-GRPO.

The weight is w = clip(alpha * (sigmoid(arg) - mu), L, U), with arg = pi / tau in
verbatim mode and arg = pi * tau in scaled mode. It is always a constant in the graph.
"""

import csv
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .config import SurrogateConfig, WeightConfig
from .graph import GraphBuilder, Var
from .grpo import (
    clipped_surrogate,
    gamma_coefficient,
    group_logp,
    importance_ratio,
    kl_from_ratio,
    loss_from_objective,
)
from .models import GroupBatch, TokenTerm, WeightReport
from .policy import PolicyParams

logger = logging.getLogger(__name__)

CURVE_POINTS = 1000

Number = Union[float, np.ndarray]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def token_weight(pi: Number, cfg: WeightConfig) -> Number:
    """Probability-shaping weight; non-decreasing in pi and bounded to [L, U]."""
    p = np.asarray(pi, dtype=np.float64)
    if np.any(~(p > 0)):
        raise ValueError("token probability must be > 0")
    arg = p / cfg.tau if cfg.mode == 'verbatim' else p * cfg.tau
    w = np.clip(cfg.alpha * (_sigmoid(arg) - cfg.mu), cfg.lower, cfg.upper)
    return float(w) if w.ndim == 0 else w


def scheme_weights(pi: np.ndarray, cfg: WeightConfig,
                   rng: Optional[np.random.Generator] = None,
                   base: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-token weights for a rollout under the configured scheme.

    equal gives 1, random draws U(random_low, random_high) from rng, reverse gives 2 - w
    and tr gives the shaping weight itself. `base` overrides w = token_weight(pi).
    """
    pi = np.asarray(pi, dtype=np.float64)
    if cfg.scheme == 'equal':
        return np.ones_like(pi)
    if cfg.scheme == 'random':
        if rng is None:
            raise ValueError("random weight scheme needs an rng stream")
        return rng.uniform(cfg.random_low, cfg.random_high, size=pi.shape)
    if base is None:
        base = token_weight(pi, cfg)
    base = np.asarray(base, dtype=np.float64)
    if cfg.scheme == 'reverse':
        return 2.0 - base
    return base


def ablation_weight(pi: float, base_w: float, cfg: WeightConfig,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Replacement weight of one token for the equal, random and reverse ablations."""
    if cfg.scheme == 'tr':
        raise ValueError("scheme 'tr' has no ablation weight")
    return float(scheme_weights(np.array([pi]), cfg, rng, base=np.array([base_w]))[0])


# --- graph pieces -------------------------------------------------------------------

def weight_node(g: GraphBuilder, w) -> Var:
    return g.stop_gradient(g.constant(w, 'weight'), label='sg_weight')


def weighted_kl(g: GraphBuilder, logp: Var, logp_ref, w) -> Var:
    """y - log y - 1 with y = w * pi_ref / pi_theta."""
    x = g.exp(g.sub(g.constant(logp_ref, 'logp_ref'), logp), label='ref_ratio')
    return kl_from_ratio(g, g.mul(weight_node(g, w), x, label='weighted_ref_ratio'))


def trgrpo_token_surrogate(g: GraphBuilder, logp: Var, logp_old, logp_ref, advantage, w,
                           cfg: SurrogateConfig) -> Var:
    """min(w*r*A, clip(w*r, 1 - eps_l, 1 + eps_h)*A) - beta * weighted KL."""
    wr = g.mul(weight_node(g, w), importance_ratio(g, logp, logp_old), label='weighted_ratio')
    surr = clipped_surrogate(g, wr, advantage, cfg)
    return g.sub(surr, g.mul(cfg.beta, weighted_kl(g, logp, logp_ref, w)),
                 label='token_objective')


def trgrpo_group_loss(g: GraphBuilder, batch: GroupBatch, leaves: Dict[str, Var],
                      params: PolicyParams, cfg: SurrogateConfig, weights: np.ndarray) -> Var:
    """Negated TR-GRPO objective for one group; `weights` follow token concatenation order."""
    logp, adv, old, ref = group_logp(g, leaves, params, batch, cfg)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != adv.shape:
        raise ValueError(f"expected {adv.size} weights, got {weights.size}")
    return loss_from_objective(g, trgrpo_token_surrogate(g, logp, old, ref, adv, weights, cfg))


def per_token_gradient(term: TokenTerm, cfg: SurrogateConfig, w: float, score):
    """
    Analytic token gradient gamma * w * score.

    `score` is grad log pi, either one array or a dict of per-block arrays.
    """
    term = replace(term, weight=w)
    coeff = gamma_coefficient(term, cfg) * w
    if isinstance(score, dict):
        return {name: coeff * np.asarray(s) for name, s in score.items()}
    return coeff * np.asarray(score)


# --- diagnostics ---------------------------------------------------------------------

def weight_report(weights: np.ndarray, cfg: WeightConfig) -> WeightReport:
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        return WeightReport(weights=w, constant=True)
    return WeightReport(
        weights=w,
        min_weight=float(w.min()),
        max_weight=float(w.max()),
        mean_weight=float(w.mean()),
        frac_lower=float(np.mean(w <= cfg.lower)),
        frac_upper=float(np.mean(w >= cfg.upper)),
        constant=bool(w.max() == w.min()),
    )


def weight_curve(cfg: WeightConfig, points: int = CURVE_POINTS) -> Tuple[np.ndarray, np.ndarray]:
    """(pi, w) on an even grid over (0, 1]."""
    pi = np.linspace(1.0 / points, 1.0, points)
    return pi, np.asarray(token_weight(pi, cfg))


def is_constant_weight(cfg: WeightConfig, points: int = CURVE_POINTS, warn: bool = True) -> bool:
    """True if the shaping function is flat over (0, 1]; logs a warning when it is."""
    _, w = weight_curve(cfg, points)
    constant = bool(w.max() == w.min())
    if constant and warn:
        logger.warning(
            "token weight is constant (w=%.4f) over pi in (0, 1] for mode=%s tau=%g L=%g U=%g; "
            "TR-GRPO reduces to a rescaled GRPO", w[0], cfg.mode, cfg.tau, cfg.lower, cfg.upper)
    return constant


def write_weight_curve(path: Union[str, Path], cfg: WeightConfig,
                       points: int = CURVE_POINTS) -> Path:
    path = Path(path)
    pi, w = weight_curve(cfg, points)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['pi', 'w'])
            for p, v in zip(pi, w):
                writer.writerow([repr(float(p)), repr(float(v))])
    except OSError as e:
        raise OSError(f"could not write weight curve {path}: {e}") from e
    return path
