"""Data models."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import RolloutError

# Verdict answer classes
COMPLETELY_CORRECT = 'completely_correct'
PARTIALLY_CORRECT = 'partially_correct'
COMPLETELY_WRONG = 'completely_wrong'
ANSWER_CLASSES = (COMPLETELY_CORRECT, PARTIALLY_CORRECT, COMPLETELY_WRONG)


@dataclass(frozen=True)
class Prompt:
    """A task instance. `ground_truth` is the exact answer span, verifier-internal."""
    task: str
    difficulty: int
    tokens: Tuple[int, ...]
    ground_truth: Tuple[int, ...]

    def to_record(self) -> Dict:
        return {
            'task': self.task,
            'difficulty': self.difficulty,
            'prompt_tokens': list(self.tokens),
            'ground_truth': list(self.ground_truth),
        }

    @classmethod
    def from_record(cls, record: Dict) -> 'Prompt':
        return cls(
            task=record['task'],
            difficulty=int(record['difficulty']),
            tokens=tuple(int(t) for t in record['prompt_tokens']),
            ground_truth=tuple(int(t) for t in record['ground_truth']),
        )


@dataclass(frozen=True)
class Verdict:
    format_ok: bool
    answer_class: str
    match: bool

    def __post_init__(self):
        if self.answer_class not in ANSWER_CLASSES:
            raise ValueError(f"unknown answer class {self.answer_class!r}")
        if self.match != (self.answer_class == COMPLETELY_CORRECT):
            raise ValueError("match must agree with answer_class")


@dataclass(frozen=True)
class Rollout:
    """One sampled response with the log-probs recorded at sampling time."""
    tokens: Tuple[int, ...]
    logp_old: np.ndarray


@dataclass
class GroupBatch:
    """One prompt with its G rollouts, rewards and frozen-policy log-probs."""
    prompt: Prompt
    outputs: List[Tuple[int, ...]]
    rewards: List[float]
    logp_old: List[np.ndarray]
    logp_ref: List[np.ndarray]

    def __post_init__(self):
        if len(self.outputs) < 2:
            raise RolloutError(f"group needs at least 2 rollouts, got {len(self.outputs)}")
        if not (len(self.rewards) == len(self.logp_old) == len(self.logp_ref) == len(self.outputs)):
            raise RolloutError("rollouts, rewards and log-prob lists differ in length")
        for i, out in enumerate(self.outputs):
            if not out:
                raise RolloutError(f"rollout {i} is empty")
            if len(self.logp_old[i]) != len(out) or len(self.logp_ref[i]) != len(out):
                raise RolloutError(f"rollout {i}: log-prob length differs from |o_i|={len(out)}")
        if not np.all(np.isfinite(self.rewards)):
            raise RolloutError("rewards must be finite")

    @property
    def group_size(self) -> int:
        return len(self.outputs)

    @property
    def lengths(self) -> List[int]:
        return [len(o) for o in self.outputs]

    @property
    def total_tokens(self) -> int:
        return sum(self.lengths)


@dataclass(frozen=True)
class TokenTerm:
    """All per-token scalars entering the objective."""
    pi: float
    pi_old: float
    pi_ref: float
    advantage: float
    ratio: float
    indicator: int
    gamma: float
    weight: float = 1.0

    def to_record(self) -> Dict:
        return {
            'pi': self.pi,
            'pi_old': self.pi_old,
            'pi_ref': self.pi_ref,
            'advantage': self.advantage,
            'ratio': self.ratio,
            'indicator': self.indicator,
            'gamma': self.gamma,
            'weight': self.weight,
        }


@dataclass
class WeightReport:
    weights: np.ndarray
    min_weight: float = 0.0
    max_weight: float = 0.0
    mean_weight: float = 0.0
    frac_lower: float = 0.0
    frac_upper: float = 0.0
    constant: bool = False

    def summary(self) -> str:
        return (f"weights n={self.weights.size} min={self.min_weight:.4f} "
                f"max={self.max_weight:.4f} mean={self.mean_weight:.4f} "
                f"at_L={self.frac_lower:.3f} at_U={self.frac_upper:.3f}")


@dataclass
class StepMetrics:
    """One metrics CSV row."""
    step: int
    mean_reward: float = 0.0
    grad_norm: float = 0.0
    sharpness: float = 0.0
    weight_mean: float = 1.0
    weight_min: float = 1.0
    weight_max: float = 1.0
    clip_fraction: float = 0.0
    kl_mean: float = 0.0
    entropy_mean: float = 0.0
    wall_ms: float = 0.0

    # Not written to the CSV
    loss: float = 0.0


METRIC_COLUMNS = [
    'step', 'mean_reward', 'grad_norm', 'sharpness', 'weight_mean', 'weight_min',
    'weight_max', 'clip_fraction', 'kl_mean', 'entropy_mean', 'wall_ms',
]


@dataclass
class TokenStats:
    token: int
    symbol: str
    occurrences: int = 0
    prob_sum: float = 0.0

    @property
    def mean_prob(self) -> float:
        return self.prob_sum / self.occurrences if self.occurrences else 0.0


@dataclass
class TokenRanking:
    low: List[TokenStats] = field(default_factory=list)
    high: List[TokenStats] = field(default_factory=list)
    notice: Optional[str] = None


@dataclass
class BoundConstants:
    """Pointwise singular-value extremes used by the token-gradient sandwich."""
    a_w: float
    b_w: float
    a_g: List[float]
    b_g: List[float]
    a_j: List[float]
    b_j: List[float]
    layers: int

    # Unembedding block: d log pi / dW has norm ||a_L|| * ||1_k - p||
    head_gain: Optional[float] = None

    def __post_init__(self):
        pairs = [(self.a_w, self.b_w)]
        pairs += list(zip(self.a_g, self.b_g)) + list(zip(self.a_j, self.b_j))
        for a, b in pairs:
            if not 0.0 <= a <= b + 1e-12:
                raise ValueError(f"bound constants must satisfy 0 <= a <= b, got ({a}, {b})")


@dataclass
class BoundReport:
    lower: float
    measured: float
    upper: float
    slack: float = 1e-9

    @property
    def lower_slack(self) -> float:
        return self.measured - self.lower

    @property
    def upper_slack(self) -> float:
        return self.upper - self.measured

    @property
    def passed(self) -> bool:
        return self.lower - self.slack <= self.measured <= self.upper + self.slack


@dataclass
class CheckResult:
    """Outcome of one verification check over many cases."""
    name: str
    cases: int
    violations: int
    worst: float
    tolerance: float
    detail: str = ''

    @property
    def passed(self) -> bool:
        return self.violations == 0


ACCURACY_COLUMNS = ['run', 'task', 'difficulty', 'prompts', 'correct', 'accuracy']


@dataclass
class AccuracyRow:
    """Greedy accuracy of one policy on the held-out prompts of one difficulty."""
    run: str
    task: str
    difficulty: int
    prompts: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.prompts if self.prompts else 0.0

    def row(self) -> list:
        return [self.run, self.task, self.difficulty, self.prompts, self.correct,
                repr(self.accuracy)]


@dataclass
class RunResult:
    """Paths and rows produced by one training run."""
    out_dir: Path
    metrics_path: Path
    checkpoint_path: Path
    metrics: List[StepMetrics] = field(default_factory=list)
    rollouts_path: Optional[Path] = None

    @property
    def final_reward(self) -> float:
        return self.metrics[-1].mean_reward if self.metrics else 0.0
