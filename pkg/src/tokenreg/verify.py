"""
The verification suite behind `tokenreg verify-theory`.

Every check fuzzes its property over many random cases and reports a CheckResult with
the number of violations and the worst observed error. Nothing here raises on a failed
property; the CLI turns failures into exit code 2.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .config import PolicyConfig, SurrogateConfig, WeightConfig
from .graph import GraphBuilder, evaluate, forward, value_and_grad
from .grpo import (
    average_losses,
    gamma_coefficient,
    group_advantages,
    grpo_group_loss,
    grpo_kl,
    trust_indicator,
)
from .models import CheckResult, GroupBatch, Prompt, TokenTerm
from .policy import (
    PolicyParams,
    build_log_probs,
    init_params,
    param_leaves,
    score_gradient,
    sequence_log_probs,
    token_distribution,
)
from .regulation import (
    is_constant_weight,
    per_token_gradient,
    scheme_weights,
    token_weight,
    trgrpo_group_loss,
    trgrpo_token_surrogate,
    weighted_kl,
)
from .theory import check_token_bound, matrix_chain_sandwich, score_norm_bounds

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
FD_TOLERANCE = 1e-5
IDENTITY_TOLERANCE = 1e-10
SANDWICH_SLACK = 1e-9
ATTAIN_TOLERANCE = 1e-12


def finite_diff(fun: Callable[[np.ndarray], float], x: np.ndarray,
                h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function over every coordinate of x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        f_plus = fun(x)
        flat[i] = saved - h
        f_minus = fun(x)
        flat[i] = saved
        out[i] = 0.5 * (f_plus - f_minus) / h
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(float(np.linalg.norm(a) + np.linalg.norm(b)), 1e-8)
    return float(np.linalg.norm(a - b)) / scale


def _result(name: str, errors: Sequence[float], tolerance: float,
            detail: str = '') -> CheckResult:
    errors = list(errors)
    return CheckResult(
        name=name,
        cases=len(errors),
        violations=sum(1 for e in errors if not e <= tolerance),
        worst=max(errors) if errors else 0.0,
        tolerance=tolerance,
        detail=detail,
    )


def _cases(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


# --- fixtures -----------------------------------------------------------------------------

def random_policy(rng: np.random.Generator, vocab_size: int = 5, max_hidden: int = 6,
                  max_layers: int = 3) -> PolicyParams:
    cfg = PolicyConfig(
        embed_dim=int(rng.integers(2, 4)),
        hidden=int(rng.integers(2, max_hidden + 1)),
        layers=int(rng.integers(1, max_layers + 1)),
        context=int(rng.integers(2, 4)),
        init_scale=float(rng.uniform(0.3, 1.0)),
    )
    return init_params(vocab_size, cfg, int(rng.integers(0, 2**31)))


def random_group(rng: np.random.Generator, params: PolicyParams, group_size: int = 3,
                 max_length: int = 4, noise: float = 0.2) -> GroupBatch:
    """A group with random outputs; old/ref log-probs are perturbed from the current policy."""
    n = params.vocab_size
    prompt_tokens = tuple(int(t) for t in rng.integers(0, n, size=int(rng.integers(1, 4))))
    prompt = Prompt('brackets', 1, prompt_tokens, prompt_tokens)
    outputs = [tuple(int(t) for t in rng.integers(0, n, size=int(rng.integers(1, max_length + 1))))
               for _ in range(group_size)]
    now = [sequence_log_probs(params, prompt_tokens, o) for o in outputs]
    return GroupBatch(
        prompt=prompt,
        outputs=outputs,
        rewards=[float(r) for r in rng.normal(size=group_size)],
        logp_old=[lp + rng.normal(scale=noise, size=lp.size) for lp in now],
        logp_ref=[lp + rng.normal(scale=noise, size=lp.size) for lp in now],
    )


# --- checks ---------------------------------------------------------------------------------

def check_autodiff(rng: np.random.Generator, cases: int = 20) -> CheckResult:
    """Autodiff of full group losses against central finite differences."""
    cfg = SurrogateConfig(beta=0.001)
    errors = []
    for case in range(cases):
        params = random_policy(rng, max_hidden=4, max_layers=2)
        batches = [random_group(rng, params) for _ in range(2)]
        g = GraphBuilder()
        leaves = param_leaves(g, params)
        if case % 2:
            losses = [grpo_group_loss(g, b, leaves, params, cfg) for b in batches]
        else:
            losses = [trgrpo_group_loss(g, b, leaves, params, cfg,
                                        rng.uniform(0.5, 1.5, size=b.total_tokens))
                      for b in batches]
        graph = g.build(average_losses(g, losses))
        bindings = {k: v.copy() for k, v in params.arrays().items()}
        _, grads = value_and_grad(graph, bindings, leaves.keys())

        auto, numeric = [], []
        for name in leaves:
            def loss_at(x, name=name):
                return float(evaluate(graph, {**bindings, name: x}))
            auto.append(grads[name].ravel())
            numeric.append(finite_diff(loss_at, bindings[name]).ravel())
        errors.append(relative_error(np.concatenate(auto), np.concatenate(numeric)))
    return _result('autodiff_vs_finite_differences', errors, FD_TOLERANCE)


def check_matrix_chains(rng: np.random.Generator, cases: int = 1000) -> CheckResult:
    errors = []
    for _ in range(cases):
        m = int(rng.integers(1, 5))
        dims = [int(d) for d in rng.integers(1, 9, size=m + 1)]
        mats = [rng.normal(size=(dims[i], dims[i + 1])) for i in range(m)]
        lower, measured, upper = matrix_chain_sandwich(rng.normal(size=dims[0]), mats)
        errors.append(max(lower - measured, measured - upper, 0.0))
    return _result('matrix_chain_sandwich', errors, SANDWICH_SLACK)


def check_score_bounds(rng: np.random.Generator, cases: int = 10_000) -> CheckResult:
    errors = []
    for _ in range(cases):
        n = int(rng.integers(2, 65))
        p = rng.dirichlet(np.full(n, float(rng.uniform(0.05, 2.0))))
        lower, measured, upper = score_norm_bounds(p, int(rng.integers(0, n)))
        errors.append(max(lower - measured, measured - upper, 0.0))
    return _result('score_norm_sandwich', errors, SANDWICH_SLACK)


def check_binary_attainment(rng: np.random.Generator, cases: int = 1000) -> CheckResult:
    """On two-token distributions the sqrt(2)(1 - p_k) bound is attained."""
    errors = []
    for _ in range(cases):
        q = float(rng.uniform())
        _, measured, upper = score_norm_bounds(np.array([q, 1.0 - q]), int(rng.integers(0, 2)))
        errors.append(abs(upper - measured))
    return _result('score_norm_binary_attainment', errors, ATTAIN_TOLERANCE)


def check_token_bounds(rng: np.random.Generator, cases: int = 100) -> CheckResult:
    cfg = SurrogateConfig(beta=0.001)
    errors = []
    for _ in range(cases):
        params = random_policy(rng, vocab_size=int(rng.integers(3, 9)))
        context = [int(t) for t in rng.integers(0, params.vocab_size, size=int(rng.integers(0, 4)))]
        token = int(rng.integers(0, params.vocab_size))
        w = float(rng.uniform(0.5, 1.5))
        pi = float(token_distribution(params, context).probs[token])
        pi_old = pi / float(rng.uniform(0.6, 1.5))
        term = _term(pi, min(pi_old, 1.0), float(rng.uniform(0.05, 1.0)),
                     float(rng.normal()), w, cfg)
        report = check_token_bound(params, context, token, term, w)
        errors.append(max(report.lower - report.measured, report.measured - report.upper, 0.0))
    return _result('token_gradient_sandwich', errors, SANDWICH_SLACK)


def _term(pi: float, pi_old: float, pi_ref: float, adv: float, w: float,
          cfg: SurrogateConfig, ratio: Optional[float] = None) -> TokenTerm:
    ratio = pi / pi_old if ratio is None else ratio
    term = TokenTerm(pi, pi_old, pi_ref, adv, ratio, trust_indicator(ratio, adv, cfg, w), 0.0, w)
    return TokenTerm(pi, pi_old, pi_ref, adv, ratio, term.indicator,
                     gamma_coefficient(term, cfg), w)


def check_gradient_identity(rng: np.random.Generator, cases: int = 1000) -> CheckResult:
    """gamma * w * grad log pi against autodiff of the weighted token objective."""
    params = random_policy(rng, max_hidden=4, max_layers=2)
    errors = []
    branches = set()
    for case in range(cases):
        cfg = SurrogateConfig(beta=(0.0, 0.001)[case % 2])
        context = [int(t) for t in rng.integers(0, params.vocab_size, size=int(rng.integers(0, 4)))]
        token = int(rng.integers(0, params.vocab_size))
        window = np.array([(list([params.pad] * params.context) + context)[-params.context:]])
        logp = float(np.log(token_distribution(params, context).probs[token]))
        w = float(rng.uniform(0.5, 1.5))
        adv = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 2.0))
        logp_old = logp - math.log(float(rng.uniform(0.4, 1.8)))
        logp_ref = logp + float(rng.normal(scale=0.5))

        g = GraphBuilder()
        leaves = param_leaves(g, params)
        lp = build_log_probs(g, leaves, params, window, [token])
        obj = trgrpo_token_surrogate(g, lp, np.array([logp_old]), np.array([logp_ref]),
                                     np.array([adv]), np.array([w]), cfg)
        _, auto = value_and_grad(g.build(g.sum(obj)), params.arrays(), leaves.keys())

        ratio = math.exp(logp - logp_old)
        term = _term(math.exp(logp), math.exp(logp_old), math.exp(logp_ref), adv, w, cfg, ratio)
        branches.add((adv > 0, term.indicator))
        analytic = per_token_gradient(term, cfg, w, score_gradient(params, context, token))
        worst = max(float(np.max(np.abs(analytic[k] - auto[k]) / (1.0 + np.abs(auto[k]))))
                    for k in auto)
        errors.append(worst)
    return _result('token_gradient_identity', errors, IDENTITY_TOLERANCE,
                   detail=f"{len(branches)} of 4 (sign, indicator) branches hit")


def check_advantages(rng: np.random.Generator, cases: int = 1000) -> CheckResult:
    errors = []
    for case in range(cases):
        size = int(rng.integers(2, 17))
        if case % 10 == 0:
            adv = group_advantages(np.full(size, float(rng.normal())))
            errors.append(float(np.max(np.abs(adv))))
            continue
        adv = group_advantages(rng.normal(size=size) * rng.uniform(0.1, 10.0))
        errors.append(max(abs(float(adv.mean())) - 1e-12, abs(float(adv.std()) - 1.0) - 1e-9, 0.0))
    return _result('advantage_normalisation', errors, 0.0)


def check_weighted_kl(grid: int = 100) -> CheckResult:
    """Non-negative on a (w, pi_ref/pi) grid, zero at y = 1, equal to plain KL at w = 1."""
    w = np.repeat(np.linspace(0.5, 1.5, grid), grid)
    x = np.tile(np.linspace(0.05, 4.0, grid), grid)
    w = np.append(w, 1.0)
    x = np.append(x, 1.0)
    logp = np.zeros(w.size)

    g = GraphBuilder()
    leaf = g.leaf('logp', logp.shape)
    weighted = weighted_kl(g, leaf, np.log(x), w)
    unit = weighted_kl(g, leaf, np.log(x), np.ones_like(w))
    plain = grpo_kl(g, leaf, np.log(x))
    tape = forward(g.build(g.sum(g.add(weighted, g.add(unit, plain)))), {'logp': logp})

    errors = list(np.maximum(-tape[weighted], 0.0))
    errors.append(abs(float(tape[weighted][-1])))
    errors.append(float(np.max(np.abs(tape[unit] - tape[plain]))))
    return _result('weighted_kl_properties', errors, 0.0)


def check_weight_function(rng: np.random.Generator, points: int = 10_000) -> CheckResult:
    """Monotone and bounded in both modes; reverse weights sum to 2; verbatim defaults flat."""
    pi = np.linspace(1.0 / points, 1.0, points)
    errors = []
    for mode in ('verbatim', 'scaled'):
        cfg = WeightConfig(mode=mode)
        w = np.asarray(token_weight(pi, cfg))
        errors.append(max(0.0, float(-np.min(np.diff(w)))))
        errors.append(max(0.0, cfg.lower - float(w.min()), float(w.max()) - cfg.upper))
        rev = scheme_weights(pi, WeightConfig(mode=mode, scheme='reverse'), rng)
        errors.append(float(np.max(np.abs(w + rev - 2.0))))
    errors.append(0.0 if is_constant_weight(WeightConfig(mode='verbatim'), warn=False) else 1.0)
    errors.append(0.0 if not is_constant_weight(WeightConfig(mode='scaled'), warn=False) else 1.0)
    return _result('weight_function_properties', errors, 0.0)


def dynamic_range(values: np.ndarray) -> float:
    """max / min of a positive series."""
    return float(np.max(values) / np.min(values))


def check_weight_factor_range(points: int = 1000) -> CheckResult:
    """w(1 - pi) has a smaller max/min spread than (1 - pi) over pi in [0.05, 0.95]."""
    pi = np.linspace(0.05, 0.95, points)
    weighted = dynamic_range(np.asarray(token_weight(pi, WeightConfig())) * (1.0 - pi))
    plain = dynamic_range(1.0 - pi)
    margin = math.log(weighted) - math.log(plain)
    return _result('weight_factor_range', [max(margin, 0.0)], 0.0,
                   detail=f"max/min {weighted:.3f} vs {plain:.3f}")


def run_suite(seed: int = 0, scale: float = 1.0) -> List[CheckResult]:
    """Every check with its default case count times `scale`."""
    rng = np.random.default_rng(seed)
    results = [
        check_autodiff(rng, _cases(20, scale)),
        check_gradient_identity(rng, _cases(1000, scale)),
        check_matrix_chains(rng, _cases(1000, scale)),
        check_score_bounds(rng, _cases(10_000, scale)),
        check_binary_attainment(rng, _cases(1000, scale)),
        check_token_bounds(rng, _cases(100, scale)),
        check_advantages(rng, _cases(1000, scale)),
        check_weighted_kl(),
        check_weight_function(rng),
        check_weight_factor_range(),
    ]
    for r in results:
        logger.info("%s: %d/%d violations, worst %.3e", r.name, r.violations, r.cases, r.worst)
    return results


def format_report(results: Sequence[CheckResult]) -> str:
    lines = [f"{'check':<34} {'cases':>6} {'fail':>5} {'worst':>11} {'tol':>9}  status"]
    for r in results:
        lines.append(f"{r.name:<34} {r.cases:>6} {r.violations:>5} {r.worst:>11.3e} "
                     f"{r.tolerance:>9.1e}  {'PASS' if r.passed else 'FAIL'}")
        if r.detail:
            lines.append(f"    {r.detail}")
    return "\n".join(lines)


def write_report_csv(path: Union[str, Path], results: Sequence[CheckResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['check', 'cases', 'violations', 'worst', 'tolerance', 'passed', 'detail'])
        for r in results:
            writer.writerow([r.name, r.cases, r.violations, repr(r.worst), repr(r.tolerance),
                             'true' if r.passed else 'false', r.detail])
    return path
