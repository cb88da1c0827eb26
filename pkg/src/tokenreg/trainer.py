"""
The RLVR loop.

Each step freezes the current parameters as pi_old, samples G rollouts per prompt,
scores them with the task verifier, and applies one Adam update to the averaged group
loss. pi_ref is the initial policy and is never refreshed.

Randomness comes from independent streams keyed by (seed, step, kind, index...), so a
run is reproducible regardless of how rollout collection is scheduled.
"""

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .config import TrainConfig, default_output_root, write_effective_config
from .dumps import ROLLOUT_DUMP, group_record, write_jsonl
from .envs import generate_prompt, reward_function, task_vocabulary
from .errors import GraphError, StepAbortedError
from .graph import GraphBuilder, stable_log_softmax, value_and_grad
from .grpo import (
    average_losses,
    batch_arrays,
    batch_record,
    grpo_group_loss,
    token_terms,
)
from .models import METRIC_COLUMNS, GroupBatch, Prompt, RunResult, StepMetrics, TokenTerm
from .policy import (
    PolicyParams,
    PolicySnapshot,
    forward_windows,
    init_params,
    param_leaves,
    sample_group,
    save_checkpoint,
    sequence_log_probs,
    snapshot,
)
from .regulation import is_constant_weight, scheme_weights, trgrpo_group_loss, weight_report
from .theory import sharpness_surrogate

logger = logging.getLogger(__name__)

PROMPT_STREAM = 0
ROLLOUT_STREAM = 1
WEIGHT_STREAM = 2

METRICS_FILE = 'metrics.csv'
FINAL_CHECKPOINT = 'checkpoint_final.npz'


def rng_stream(seed: int, step: int, kind: int, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, kind, *index]))


class Adam:
    """Adam with bias correction and optional decoupled weight decay. Updates in place."""

    def __init__(self, params: PolicyParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in params.arrays().items()}
        self.v = {name: np.zeros_like(a) for name, a in params.arrays().items()}

    @classmethod
    def from_config(cls, params: PolicyParams, cfg: TrainConfig) -> 'Adam':
        return cls(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                   cfg.weight_decay)

    def step(self, params: PolicyParams, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in params.arrays().items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


# --- collection ---------------------------------------------------------------------

def generate_prompts(cfg: TrainConfig, step: int) -> List[Prompt]:
    return [
        generate_prompt(cfg.task, cfg.difficulty, rng_stream(cfg.seed, step, PROMPT_STREAM, i))
        for i in range(cfg.prompts_per_step)
    ]


def collect_rollouts(old: PolicySnapshot, ref: PolicySnapshot, prompts: Sequence[Prompt],
                     cfg: TrainConfig, step: int) -> List[GroupBatch]:
    """G rollouts per prompt from pi_old, with rewards and old/ref log-probs."""
    if not prompts:
        raise ValueError("no prompts to collect rollouts for")
    eos = task_vocabulary(cfg.task).eos
    score = reward_function(cfg.reward)

    def collect(item) -> GroupBatch:
        index, prompt = item
        rng = rng_stream(cfg.seed, step, ROLLOUT_STREAM, index)
        rollouts = sample_group(old, prompt.tokens, cfg.group_size, cfg.temperature, rng,
                                cfg.max_response_length, eos, cfg.record_tempered)
        outputs = [r.tokens for r in rollouts]
        return GroupBatch(
            prompt=prompt,
            outputs=outputs,
            rewards=[score(prompt, out) for out in outputs],
            logp_old=[r.logp_old for r in rollouts],
            logp_ref=[sequence_log_probs(ref.params, prompt.tokens, out) for out in outputs],
        )

    items = list(enumerate(prompts))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(collect, items))
    return [collect(item) for item in items]


# --- one update ------------------------------------------------------------------------

@dataclass
class GroupView:
    """Numeric view of one group under the current parameters."""
    logp: np.ndarray
    entropy: np.ndarray
    weights: Optional[np.ndarray]


def _group_view(params: PolicyParams, batch: GroupBatch, cfg: TrainConfig, step: int,
                group: int) -> GroupView:
    windows, targets, _, _, _ = batch_arrays(params, batch, cfg.surrogate())
    _, _, logits = forward_windows(params, windows)
    logsm = stable_log_softmax(logits)
    logp = logsm[np.arange(targets.size), targets]
    entropy = -np.sum(np.exp(logsm) * logsm, axis=-1)

    weights = None
    if cfg.algorithm == 'tr_grpo':
        wcfg = cfg.weights()
        pieces = []
        offset = 0
        for i, n in enumerate(batch.lengths):
            rng = rng_stream(cfg.seed, step, WEIGHT_STREAM, group, i)
            pieces.append(scheme_weights(np.exp(logp[offset: offset + n]), wcfg, rng))
            offset += n
        weights = np.concatenate(pieces)
    return GroupView(logp, entropy, weights)


def train_step(params: PolicyParams, batches: List[GroupBatch], cfg: TrainConfig,
               optimizer: Adam, step: int,
               on_terms: Optional[Callable[[int, GroupBatch, List[TokenTerm]], None]] = None
               ) -> StepMetrics:
    """One optimizer update on the mean group loss. The gradient norm is taken before it."""
    started = time.perf_counter()
    surrogate = cfg.surrogate()
    views = [_group_view(params, b, cfg, step, i) for i, b in enumerate(batches)]

    g = GraphBuilder()
    leaves = param_leaves(g, params)
    losses = []
    for batch, view in zip(batches, views):
        if view.weights is None:
            losses.append(grpo_group_loss(g, batch, leaves, params, surrogate))
        else:
            losses.append(trgrpo_group_loss(g, batch, leaves, params, surrogate, view.weights))
    try:
        loss, grads = value_and_grad(g.build(average_losses(g, losses)), params.arrays(),
                                     leaves.keys())
    except GraphError as e:
        raise StepAbortedError(str(e), step, batches) from e

    grad_norm = math.sqrt(sum(float(np.sum(gr * gr)) for gr in grads.values()))
    if not (math.isfinite(loss) and math.isfinite(grad_norm)):
        raise StepAbortedError("non-finite loss or gradient norm", step, batches)

    terms_all: List[TokenTerm] = []
    for i, (batch, view) in enumerate(zip(batches, views)):
        terms = token_terms(batch, view.logp, surrogate, view.weights)
        terms_all.extend(terms)
        if on_terms is not None:
            on_terms(i, batch, terms)

    optimizer.step(params, grads)

    weights = np.array([t.weight for t in terms_all])
    y = weights * np.array([t.pi_ref / t.pi for t in terms_all])
    if cfg.algorithm == 'tr_grpo':
        logger.debug("step %d %s", step, weight_report(weights, cfg.weights()).summary())

    return StepMetrics(
        step=step,
        mean_reward=float(np.mean([r for b in batches for r in b.rewards])),
        grad_norm=grad_norm,
        sharpness=sharpness_surrogate(loss, grad_norm, cfg.sharpness()),
        weight_mean=float(weights.mean()),
        weight_min=float(weights.min()),
        weight_max=float(weights.max()),
        clip_fraction=float(np.mean([t.indicator == 0 for t in terms_all])),
        kl_mean=float(np.mean(y - np.log(y) - 1.0)),
        entropy_mean=float(np.mean(np.concatenate([v.entropy for v in views]))),
        wall_ms=(time.perf_counter() - started) * 1000.0 if cfg.timing else 0.0,
        loss=loss,
    )


# --- full run ---------------------------------------------------------------------------

def metrics_row(m: StepMetrics) -> List[str]:
    return [str(m.step)] + [repr(float(getattr(m, c))) for c in METRIC_COLUMNS[1:]]


def run_name(cfg: TrainConfig) -> str:
    if cfg.algorithm == 'grpo':
        return f"grpo_seed{cfg.seed}"
    return f"tr_grpo_{cfg.weight_scheme}_seed{cfg.seed}"


def run_experiment(cfg: TrainConfig, out_dir: Optional[Union[str, Path]] = None) -> RunResult:
    """Train for cfg.total_steps steps, writing metrics.csv, checkpoints and optional dumps."""
    out_dir = Path(out_dir) if out_dir is not None else default_output_root() / run_name(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, out_dir)

    vocab = task_vocabulary(cfg.task)
    params = init_params(vocab.size, cfg.policy(), cfg.seed)
    ref = snapshot(params, 'ref')
    optimizer = Adam.from_config(params, cfg)
    if cfg.algorithm == 'tr_grpo' and cfg.weight_scheme in ('tr', 'reverse'):
        is_constant_weight(cfg.weights())

    metrics_path = out_dir / METRICS_FILE
    rollouts_path = out_dir / ROLLOUT_DUMP if cfg.dump_rollouts else None
    if rollouts_path is not None and rollouts_path.exists():
        rollouts_path.unlink()

    logger.info("run %s: %d steps, %d parameters, output %s",
                run_name(cfg), cfg.total_steps, params.parameter_count, out_dir)
    result = RunResult(out_dir=out_dir, metrics_path=metrics_path,
                       checkpoint_path=out_dir / FINAL_CHECKPOINT, rollouts_path=rollouts_path)
    try:
        f = open(metrics_path, 'w', newline='')
    except OSError as e:
        raise OSError(f"could not write metrics {metrics_path}: {e}") from e
    with f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        for step in range(1, cfg.total_steps + 1):
            old = snapshot(params, 'old')
            batches = collect_rollouts(old, ref, generate_prompts(cfg, step), cfg, step)

            records: List[Dict] = []

            def on_terms(i: int, batch: GroupBatch, terms: List[TokenTerm]) -> None:
                records.append(batch_record(batch, terms, cfg.surrogate(), step))

            try:
                first = None
                for update in range(cfg.updates_per_collection):
                    m = train_step(params, batches, cfg, optimizer, step,
                                   on_terms if (rollouts_path and update == 0) else None)
                    if update == 0:
                        first = m
            except StepAbortedError as e:
                e.dump_path = str(write_jsonl(out_dir / f"aborted_step{step}.jsonl",
                                              (group_record(b, step) for b in e.batches)))
                logger.error("%s; batches dumped to %s", e, e.dump_path)
                raise

            if records:
                write_jsonl(rollouts_path, records, append=True)
            writer.writerow(metrics_row(first))
            f.flush()
            result.metrics.append(first)

            if step % cfg.log_every == 0:
                logger.info("step %d reward=%.3f grad_norm=%.4f clip=%.3f",
                            step, first.mean_reward, first.grad_norm, first.clip_fraction)
            if step % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_step{step:05d}.npz", params, vocab)

    save_checkpoint(result.checkpoint_path, params, vocab)
    return result
