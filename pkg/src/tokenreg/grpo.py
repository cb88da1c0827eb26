"""
Plain GRPO: group-normalised advantages, importance ratios, the trust-region
indicator, the clipped surrogate with its KL anchor, and the per-token coefficient
gamma such that d(objective)/d(theta) = sum gamma * w * grad log pi.
"""

import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import SurrogateConfig
from .errors import RolloutError
from .graph import GraphBuilder, Var
from .models import GroupBatch, TokenTerm
from .policy import PolicyParams, build_log_probs, context_windows

DEGENERATE_STD = 1e-8


def group_advantages(rewards: Sequence[float], std_mode: str = 'population') -> np.ndarray:
    """(r_i - mean) / std. Groups with std < 1e-8 get all-zero advantages."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise RolloutError(f"advantages need G >= 2 rewards, got {r.size}")
    std = r.std(ddof=1 if std_mode == 'sample' else 0)
    if std < DEGENERATE_STD:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def trust_indicator(ratio: float, advantage: float, cfg: SurrogateConfig, w: float = 1.0) -> int:
    """0 when the token sits in the clipped region of the (weighted) surrogate, else 1."""
    wr = w * ratio
    if advantage > 0 and wr > 1.0 + cfg.eps_high:
        return 0
    if advantage < 0 and wr < 1.0 - cfg.eps_low:
        return 0
    return 1


def trust_indicators(ratio: np.ndarray, advantage: np.ndarray, cfg: SurrogateConfig,
                     w: Optional[np.ndarray] = None) -> np.ndarray:
    wr = ratio if w is None else w * ratio
    clipped = ((advantage > 0) & (wr > 1.0 + cfg.eps_high)) | \
              ((advantage < 0) & (wr < 1.0 - cfg.eps_low))
    return np.where(clipped, 0, 1)


# --- graph pieces -------------------------------------------------------------------

def kl_from_ratio(g: GraphBuilder, x: Var) -> Var:
    """x - log x - 1, the k3 estimator; >= 0 with equality at x = 1."""
    return g.sub(g.sub(x, g.log(x)), 1.0, label='kl')


def grpo_kl(g: GraphBuilder, logp: Var, logp_ref) -> Var:
    """KL term with x = pi_ref / pi_theta."""
    x = g.exp(g.sub(g.constant(logp_ref, 'logp_ref'), logp), label='ref_ratio')
    return kl_from_ratio(g, x)


def importance_ratio(g: GraphBuilder, logp: Var, logp_old) -> Var:
    return g.exp(g.sub(logp, g.constant(logp_old, 'logp_old')), label='ratio')


def clipped_surrogate(g: GraphBuilder, ratio: Var, advantage, cfg: SurrogateConfig) -> Var:
    """min(ratio * A, clip(ratio, 1 - eps_l, 1 + eps_h) * A); ties take the unclipped term."""
    adv = g.constant(advantage, 'advantage')
    unclipped = g.mul(ratio, adv)
    clipped = g.mul(g.clip(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high), adv)
    return g.minimum(unclipped, clipped, label='surrogate')


def grpo_token_surrogate(g: GraphBuilder, logp: Var, logp_old, logp_ref, advantage,
                         cfg: SurrogateConfig) -> Var:
    """Per-token GRPO objective; only `logp` carries gradient."""
    surr = clipped_surrogate(g, importance_ratio(g, logp, logp_old), advantage, cfg)
    return g.sub(surr, g.mul(cfg.beta, grpo_kl(g, logp, logp_ref)), label='token_objective')


def gamma_coefficient(term: TokenTerm, cfg: SurrogateConfig) -> float:
    """
    gamma = r * A * indicator + beta * (w * pi_ref / pi - 1) / w.

    At w = 1 this is the plain GRPO coefficient r*A*I + beta*pi_ref/pi - beta. The KL part
    is divided by w so that gamma * w is the exact derivative of the weighted objective.
    """
    w = term.weight
    kl_part = cfg.beta * (w * term.pi_ref / term.pi - 1.0) / w
    return term.ratio * term.advantage * term.indicator + kl_part


# --- group losses ---------------------------------------------------------------------

def batch_arrays(params: PolicyParams, batch: GroupBatch, cfg: SurrogateConfig):
    """Concatenated windows, targets and per-token constants of one group."""
    windows = np.concatenate(
        [context_windows(params, batch.prompt.tokens, out) for out in batch.outputs])
    targets = np.concatenate([np.asarray(out, dtype=np.int64) for out in batch.outputs])
    adv = group_advantages(batch.rewards, cfg.advantage_std)
    per_token_adv = np.concatenate([np.full(n, a) for n, a in zip(batch.lengths, adv)])
    old = np.concatenate(batch.logp_old)
    ref = np.concatenate(batch.logp_ref)
    return windows, targets, per_token_adv, old, ref


def loss_from_objective(g: GraphBuilder, objective: Var) -> Var:
    """-(1 / sum |o_i|) * sum of token objectives."""
    return g.neg(g.mean(objective), label='group_loss')


def group_logp(g: GraphBuilder, leaves: Dict[str, Var], params: PolicyParams,
               batch: GroupBatch, cfg: SurrogateConfig):
    if batch.total_tokens == 0:
        raise RolloutError("group has no tokens")
    windows, targets, adv, old, ref = batch_arrays(params, batch, cfg)
    return build_log_probs(g, leaves, params, windows, targets), adv, old, ref


def grpo_group_loss(g: GraphBuilder, batch: GroupBatch, leaves: Dict[str, Var],
                    params: PolicyParams, cfg: SurrogateConfig) -> Var:
    """Negated GRPO objective for one prompt group (minimise this)."""
    logp, adv, old, ref = group_logp(g, leaves, params, batch, cfg)
    return loss_from_objective(g, grpo_token_surrogate(g, logp, old, ref, adv, cfg))


def average_losses(g: GraphBuilder, losses: List[Var]) -> Var:
    """Uniform mean of per-group losses."""
    if not losses:
        raise RolloutError("no groups to average")
    if len(losses) == 1:
        return losses[0]
    total = losses[0]
    for loss in losses[1:]:
        total = g.add(total, loss)
    return g.mul(total, 1.0 / len(losses), label='step_loss')


# --- numeric records ------------------------------------------------------------------

def token_terms(batch: GroupBatch, logp: np.ndarray, cfg: SurrogateConfig,
                weights: Optional[np.ndarray] = None) -> List[TokenTerm]:
    """TokenTerm for every token of the group, in concatenation order."""
    adv = group_advantages(batch.rewards, cfg.advantage_std)
    per_token_adv = np.concatenate([np.full(n, a) for n, a in zip(batch.lengths, adv)])
    old = np.concatenate(batch.logp_old)
    ref = np.concatenate(batch.logp_ref)
    logp = np.asarray(logp, dtype=np.float64)
    w = np.ones_like(logp) if weights is None else np.asarray(weights, dtype=np.float64)
    ratio = np.exp(logp - old)
    ind = trust_indicators(ratio, per_token_adv, cfg, w)

    terms = []
    for t in range(logp.size):
        term = TokenTerm(
            pi=math.exp(logp[t]), pi_old=math.exp(old[t]), pi_ref=math.exp(ref[t]),
            advantage=float(per_token_adv[t]), ratio=float(ratio[t]),
            indicator=int(ind[t]), gamma=0.0, weight=float(w[t]),
        )
        terms.append(_with_gamma(term, cfg))
    return terms


def _with_gamma(term: TokenTerm, cfg: SurrogateConfig) -> TokenTerm:
    return TokenTerm(term.pi, term.pi_old, term.pi_ref, term.advantage, term.ratio,
                     term.indicator, gamma_coefficient(term, cfg), term.weight)


def make_term(pi: float, pi_old: float, pi_ref: float, advantage: float,
              cfg: SurrogateConfig, weight: float = 1.0) -> TokenTerm:
    """Fully populated TokenTerm from raw probabilities."""
    ratio = pi / pi_old
    term = TokenTerm(pi, pi_old, pi_ref, advantage, ratio,
                     trust_indicator(ratio, advantage, cfg, weight), 0.0, weight)
    return _with_gamma(term, cfg)


def batch_record(batch: GroupBatch, terms: List[TokenTerm], cfg: SurrogateConfig,
                 step: Optional[int] = None) -> Dict:
    """JSON-ready dump of one group for offline inspection."""
    adv = group_advantages(batch.rewards, cfg.advantage_std)
    rollouts = []
    offset = 0
    for out, reward, a in zip(batch.outputs, batch.rewards, adv):
        per_token = []
        for tok, term in zip(out, terms[offset: offset + len(out)]):
            rec = term.to_record()
            rec['token'] = int(tok)
            per_token.append(rec)
        offset += len(out)
        rollouts.append({'output': list(out), 'reward': float(reward),
                         'advantage': float(a), 'tokens': per_token})
    record = batch.prompt.to_record()
    record.update({'rewards': [float(r) for r in batch.rewards],
                   'advantages': [float(a) for a in adv],
                   'rollouts': rollouts})
    if step is not None:
        record['step'] = step
    return record
