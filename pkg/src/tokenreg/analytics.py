"""Run analytics: token probability rankings, run comparison, grad-norm trend across seeds."""

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .errors import RolloutError
from .models import METRIC_COLUMNS, TokenRanking, TokenStats
from .policy import Vocabulary

TOP_K = 100
TAIL_STEPS = 10


def token_probability_stats(tokens: Iterable[Dict], min_occurrences: int = 1,
                            top_k: int = TOP_K,
                            vocab: Optional[Vocabulary] = None) -> TokenRanking:
    """Rank token types by mean pi over their occurrences; frequent tokens only."""
    stats: Dict[int, TokenStats] = {}
    seen = 0
    for record in tokens:
        seen += 1
        tok = int(record['token'])
        if tok not in stats:
            symbol = vocab.tokens[tok] if vocab is not None and tok < vocab.size else str(tok)
            stats[tok] = TokenStats(token=tok, symbol=symbol)
        stats[tok].occurrences += 1
        stats[tok].prob_sum += float(record['pi'])
    if not seen:
        raise RolloutError("no token records in the dump stream")

    frequent = [s for s in stats.values() if s.occurrences >= min_occurrences]
    if not frequent:
        most = max(s.occurrences for s in stats.values())
        return TokenRanking(notice=f"no token occurs {min_occurrences} times "
                                   f"(most frequent: {most})")
    # ties broken by token id so the order is stable
    low = sorted(frequent, key=lambda s: (s.mean_prob, s.token))
    high = sorted(frequent, key=lambda s: (-s.mean_prob, s.token))
    return TokenRanking(low=low[:top_k], high=high[:top_k])


def write_ranking_csv(path: Union[str, Path], ranked: List[TokenStats]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['rank', 'token', 'symbol', 'occurrences', 'mean_prob'])
        for rank, s in enumerate(ranked, start=1):
            writer.writerow([rank, s.token, s.symbol, s.occurrences, repr(s.mean_prob)])
    return path


def read_metrics(path: Union[str, Path]) -> List[Dict[str, float]]:
    path = Path(path)
    try:
        with open(path, newline='') as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise OSError(f"could not read metrics {path}: {e}") from e
    return [{c: float(row[c]) for c in METRIC_COLUMNS} for row in rows]


def column(rows: Sequence[Dict[str, float]], name: str) -> List[float]:
    return [r[name] for r in rows]


@dataclass
class RunComparison:
    grpo_final_reward: float = 0.0
    tr_final_reward: float = 0.0
    grpo_tail_reward: float = 0.0
    tr_tail_reward: float = 0.0
    grpo_grad_std: float = 0.0
    tr_grad_std: float = 0.0

    @property
    def reward_delta(self) -> float:
        return self.tr_final_reward - self.grpo_final_reward

    def row(self) -> Dict[str, float]:
        return {
            'grpo_final_reward': self.grpo_final_reward,
            'tr_grpo_final_reward': self.tr_final_reward,
            'reward_delta': self.reward_delta,
            'grpo_tail_reward': self.grpo_tail_reward,
            'tr_grpo_tail_reward': self.tr_tail_reward,
            'grpo_grad_norm_std': self.grpo_grad_std,
            'tr_grpo_grad_norm_std': self.tr_grad_std,
        }


def _std(values: List[float]) -> float:
    return statistics.pstdev(values) if len(values) >= 2 else 0.0


def compare_runs(grpo: Sequence[Dict[str, float]], tr: Sequence[Dict[str, float]],
                 tail: int = TAIL_STEPS) -> RunComparison:
    if not grpo or not tr:
        return RunComparison()
    return RunComparison(
        grpo_final_reward=grpo[-1]['mean_reward'],
        tr_final_reward=tr[-1]['mean_reward'],
        grpo_tail_reward=statistics.fmean(column(grpo[-tail:], 'mean_reward')),
        tr_tail_reward=statistics.fmean(column(tr[-tail:], 'mean_reward')),
        grpo_grad_std=_std(column(grpo, 'grad_norm')),
        tr_grad_std=_std(column(tr, 'grad_norm')),
    )


@dataclass
class GradNormTrend:
    per_seed: List[Tuple[int, float, float]] = field(default_factory=list)
    smoother_seeds: int = 0
    seeds: int = 0
    direction: str = 'mixed'

    def summary(self) -> str:
        return (f"TR-GRPO grad-norm std <= GRPO in {self.smoother_seeds}/{self.seeds} seeds "
                f"({self.direction})")


def analyze_grad_norm_trend(runs: Dict[int, RunComparison]) -> GradNormTrend:
    """Per seed, does the token-weighted run have the steadier gradient norm?"""
    trend = GradNormTrend()
    for seed in sorted(runs):
        c = runs[seed]
        trend.per_seed.append((seed, c.grpo_grad_std, c.tr_grad_std))
        if c.tr_grad_std <= c.grpo_grad_std:
            trend.smoother_seeds += 1
    trend.seeds = len(trend.per_seed)
    if trend.seeds:
        share = trend.smoother_seeds / trend.seeds
        if share > 0.5:
            trend.direction = 'smoother'
        elif share < 0.5:
            trend.direction = 'rougher'
    return trend


def write_comparison_csv(path: Union[str, Path], runs: Dict[int, RunComparison]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ['seed'] + list(RunComparison().row())
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for seed in sorted(runs):
            writer.writerow([seed] + [repr(float(v)) for v in runs[seed].row().values()])
    return path


def ablation_table(results: Dict[str, Sequence[Dict[str, float]]],
                   tail: int = TAIL_STEPS) -> List[Tuple[str, float, float]]:
    """(scheme, tail mean reward, grad-norm std) per weight scheme."""
    table = []
    for scheme, rows in results.items():
        if not rows:
            continue
        table.append((scheme, statistics.fmean(column(rows[-tail:], 'mean_reward')),
                      _std(column(rows, 'grad_norm'))))
    return table

