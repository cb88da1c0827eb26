"""
Held-out evaluation: greedy decoding of a trained policy on fresh prompts, scored
per difficulty with the task verifier.

Held-out prompts come from their own rng stream keyed by heldout_seed rather than the
run seed, so every run of a comparison is scored on the same prompts.
"""

import csv
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from .config import TrainConfig
from .envs import DIFFICULTY_RANGE, generate_prompt, task_vocabulary, verify
from .errors import VocabularyError
from .models import ACCURACY_COLUMNS, AccuracyRow, Prompt
from .policy import PolicyParams, greedy_decode, load_checkpoint
from .trainer import rng_stream

logger = logging.getLogger(__name__)

EVAL_STREAM = 3
ACCURACY_FILE = 'heldout_accuracy.csv'


def task_difficulties(task: str) -> List[int]:
    lo, hi = DIFFICULTY_RANGE[task]
    return list(range(lo, hi + 1))


def heldout_prompts(task: str, difficulty: int, count: int, seed: int) -> List[Prompt]:
    # step 0 is never a training step
    return [generate_prompt(task, difficulty, rng_stream(seed, 0, EVAL_STREAM, difficulty, i))
            for i in range(count)]


def heldout_accuracy(params: PolicyParams, task: str, max_length: int, seed: int = 0,
                     count: int = 50, difficulties: Optional[Sequence[int]] = None,
                     run: str = '') -> List[AccuracyRow]:
    """One AccuracyRow per difficulty; a response counts when the verifier matches it."""
    eos = task_vocabulary(task).eos
    rows = []
    for difficulty in difficulties or task_difficulties(task):
        prompts = heldout_prompts(task, difficulty, count, seed)
        outputs = greedy_decode(params, [p.tokens for p in prompts], max_length, eos)
        correct = sum(verify(p, out).match for p, out in zip(prompts, outputs))
        rows.append(AccuracyRow(run, task, difficulty, len(prompts), correct))
        logger.debug("%s %s difficulty %d: %d/%d", run or 'policy', task, difficulty,
                     correct, len(prompts))
    return rows


def evaluate_checkpoint(path: Union[str, Path], cfg: TrainConfig,
                        run: str = '') -> List[AccuracyRow]:
    """Held-out accuracy of a saved checkpoint on cfg.task."""
    params, vocab = load_checkpoint(path)
    if vocab != task_vocabulary(cfg.task):
        raise VocabularyError(f"checkpoint {path} was not trained on {cfg.task}")
    return heldout_accuracy(params, cfg.task, cfg.max_response_length, cfg.heldout_seed,
                            cfg.heldout_prompts, run=run)


def write_accuracy_csv(path: Union[str, Path], rows: Iterable[AccuracyRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(ACCURACY_COLUMNS)
        for row in rows:
            writer.writerow(row.row())
    return path


def accuracy_summary(rows: Sequence[AccuracyRow]) -> str:
    """'d1 0.92  d2 0.40 ...' for one run."""
    return "  ".join(f"d{r.difficulty} {r.accuracy:.2f}" for r in rows)
