"""
tokenreg CLI - GRPO and token-regulated GRPO on toy verifiable tasks.

Usage:
    tokenreg train --config run.cfg          Train one policy, write metrics.csv
    tokenreg compare --seeds 5               Paired GRPO / TR-GRPO runs and a trend summary
    tokenreg ablate                          The tr / equal / random / reverse weight schemes
    tokenreg sweep --param tau               Weight-function sensitivity runs
    tokenreg weight-curve                    (pi, w) CSV of the shaping function
    tokenreg verify-theory                   Gradient and bound property suite
    tokenreg token-stats --dumps runs/x      Token probability rankings from rollout dumps
    tokenreg prompts                         Write the prompt stream of a run as JSONL

Exit codes: 0 ok, 1 usage or config error, 2 verification failure, 3 runtime abort.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .analytics import (
    RunComparison,
    ablation_table,
    analyze_grad_norm_trend,
    compare_runs,
    read_metrics,
    token_probability_stats,
    write_comparison_csv,
    write_ranking_csv,
)
from .config import (
    TrainConfig,
    default_output_root,
    describe_schema,
    parse_config,
    write_effective_config,
)
from .dumps import HELDOUT_PROMPT_DUMP, PROMPT_DUMP, DumpReader, write_prompts
from .envs import random_completion_baseline, task_vocabulary
from .errors import ConfigError, TokenRegError
from .evaluation import (
    ACCURACY_FILE,
    accuracy_summary,
    evaluate_checkpoint,
    heldout_prompts,
    task_difficulties,
    write_accuracy_csv,
)
from .logs import configure_logging
from .regulation import is_constant_weight, write_weight_curve
from .models import AccuracyRow, RunResult
from .trainer import generate_prompts, run_experiment
from .verify import format_report, run_suite, write_report_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_ABORT = 3

ABLATION_SCHEMES = ('tr', 'equal', 'random', 'reverse')
SWEEP_TAU = (0.5, 2.0, 7.0, 9.0, 10.0, 20.0)
SWEEP_BOUNDS = ((1.0, 1.2), (1.0, 1.4), (0.8, 1.5), (0.5, 1.5))


class _Parser(argparse.ArgumentParser):
    """argparse with the usage exit code of this CLI."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def print_header(title: str):
    print()
    print("  ╔═══════════════════════════════════════════════════════╗")
    print(f"  ║  TOKENREG  {title:<43}║")
    print("  ╚═══════════════════════════════════════════════════════╝")


def print_box(title: str, lines: Sequence[str]):
    print()
    print(f"  ┌─ {title} " + "─" * max(0, 52 - len(title)) + "┐")
    for line in lines:
        print(f"  │ {line}")
    print("  └" + "─" * 56 + "┘")


def load_config(args) -> TrainConfig:
    cfg = parse_config(args.config, args.set or ())
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def out_root(args) -> Path:
    return Path(args.out) if args.out else default_output_root()


def _run_lines(rows: List[Dict[str, float]]) -> List[str]:
    last = rows[-1]
    return [
        f"steps            {len(rows)}",
        f"final reward     {last['mean_reward']:+.3f}",
        f"final grad norm  {last['grad_norm']:.4f}",
        f"clip fraction    {last['clip_fraction']:.3f}",
    ]


def _heldout(rows: List[AccuracyRow], cfg: TrainConfig, result: RunResult,
             run: str) -> List[AccuracyRow]:
    """Score the final checkpoint of a run and add its rows to `rows`."""
    scored = evaluate_checkpoint(result.checkpoint_path, cfg, run)
    rows.extend(scored)
    return scored


def _ranking_lines(ranked, shown: int = 5) -> List[str]:
    return [f"{s.symbol:<10} n={s.occurrences:<6} mean pi {s.mean_prob:.4f}"
            for s in ranked[:shown]]


# --- commands -------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args)
    result = run_experiment(cfg, out_root(args))
    print_header(f"train: {cfg.algorithm}")
    baseline = random_completion_baseline(cfg.task, cfg.difficulty, cfg.max_response_length,
                                          samples=2000, seed=cfg.seed, reward=cfg.reward)
    print_box('RUN', _run_lines(read_metrics(result.metrics_path))
              + [f"random baseline  {baseline:+.3f}", f"metrics          {result.metrics_path}",
                 f"checkpoint       {result.checkpoint_path}"])
    return EXIT_OK


def cmd_compare(args) -> int:
    base = load_config(args)
    root = out_root(args)
    runs: Dict[int, RunComparison] = {}
    accuracy: List[AccuracyRow] = []
    for i in range(args.seeds):
        seed = base.seed + i
        grpo_cfg = base.replace(algorithm='grpo', seed=seed)
        tr_cfg = base.replace(algorithm='tr_grpo', seed=seed)
        grpo = run_experiment(grpo_cfg, root / f"seed{seed}" / 'grpo')
        tr = run_experiment(tr_cfg, root / f"seed{seed}" / 'tr_grpo')
        _heldout(accuracy, grpo_cfg, grpo, f"seed{seed}/grpo")
        _heldout(accuracy, tr_cfg, tr, f"seed{seed}/tr_grpo")
        runs[seed] = compare_runs(read_metrics(grpo.metrics_path), read_metrics(tr.metrics_path))
    summary_path = write_comparison_csv(root / 'compare_summary.csv', runs)
    accuracy_path = write_accuracy_csv(root / ACCURACY_FILE, accuracy)
    trend = analyze_grad_norm_trend(runs)

    print_header("compare: GRPO vs TR-GRPO")
    lines = [f"{'seed':>6} {'grpo reward':>12} {'tr reward':>10} {'grpo std':>9} {'tr std':>9}"]
    for seed, c in sorted(runs.items()):
        lines.append(f"{seed:>6} {c.grpo_final_reward:>+12.3f} {c.tr_final_reward:>+10.3f} "
                     f"{c.grpo_grad_std:>9.4f} {c.tr_grad_std:>9.4f}")
    lines += ['', trend.summary(), f"summary: {summary_path}",
              f"held-out accuracy: {accuracy_path}"]
    print_box('SUMMARY', lines)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = load_config(args)
    root = out_root(args)
    results = {}
    accuracy: List[AccuracyRow] = []
    held: Dict[str, str] = {}
    for scheme in ABLATION_SCHEMES:
        cfg = base.replace(algorithm='tr_grpo', weight_scheme=scheme)
        result = run_experiment(cfg, root / scheme)
        results[scheme] = read_metrics(result.metrics_path)
        held[scheme] = accuracy_summary(_heldout(accuracy, cfg, result, scheme))
    accuracy_path = write_accuracy_csv(root / ACCURACY_FILE, accuracy)
    print_header("ablate: weight schemes")
    print_box('SCHEMES', [f"{s:<8} tail reward {r:+.3f}  grad-norm std {sd:.4f}"
                          for s, r, sd in ablation_table(results)])
    print_box("HELD-OUT ACCURACY", [f"{s:<8} {line}" for s, line in held.items()]
              + [f"written to {accuracy_path}"])
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = load_config(args).replace(algorithm='tr_grpo', weight_scheme='tr')
    root = out_root(args)
    if args.param == 'tau':
        variants = {f"tau_{t:g}": base.replace(tau=t) for t in SWEEP_TAU}
    else:
        variants = {f"bounds_{lo:g}_{hi:g}": base.replace(weight_lower=lo, weight_upper=hi)
                    for lo, hi in SWEEP_BOUNDS}
    results = {}
    accuracy: List[AccuracyRow] = []
    held: Dict[str, str] = {}
    for name, cfg in variants.items():
        result = run_experiment(cfg, root / name)
        results[name] = read_metrics(result.metrics_path)
        held[name] = accuracy_summary(_heldout(accuracy, cfg, result, name))
    accuracy_path = write_accuracy_csv(root / ACCURACY_FILE, accuracy)
    print_header(f"sweep: {args.param}")
    print_box('VARIANTS', [f"{name:<16} tail reward {r:+.3f}  grad-norm std {sd:.4f}"
                           for name, r, sd in ablation_table(results)])
    print_box("HELD-OUT ACCURACY", [f"{name:<16} {line}" for name, line in held.items()]
              + [f"written to {accuracy_path}"])
    return EXIT_OK


def cmd_weight_curve(args) -> int:
    full = load_config(args)
    root = out_root(args)
    write_effective_config(full, root)
    cfg = full.weights()
    path = write_weight_curve(root / f"weight_curve_{cfg.mode}.csv", cfg, args.points)
    constant = is_constant_weight(cfg, args.points)
    print_header(f"weight curve: {cfg.mode}")
    lines = [f"alpha={cfg.alpha:g} mu={cfg.mu:g} tau={cfg.tau:g} L={cfg.lower:g} U={cfg.upper:g}",
             f"written to {path}"]
    if constant:
        lines.append("WARNING: weight is constant over (0, 1]; TR-GRPO degenerates to GRPO")
    print_box('CURVE', lines)
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    cfg = load_config(args)
    root = out_root(args)
    write_effective_config(cfg, root)
    results = run_suite(seed=args.seed if args.seed is not None else 0, scale=args.scale)
    path = write_report_csv(root / 'verify_report.csv', results)
    print_header('verify-theory')
    print()
    print(format_report(results))
    print(f"\n  report: {path}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"  FAILED: {', '.join(failed)}")
        return EXIT_VERIFY
    return EXIT_OK


def cmd_token_stats(args) -> int:
    cfg = load_config(args)
    root = out_root(args)
    write_effective_config(cfg, root)
    dumps = Path(args.dumps) if args.dumps else root
    ranking = token_probability_stats(DumpReader().iter_tokens(dumps), args.min_occurrences,
                                      args.top_k, task_vocabulary(cfg.task))
    print_header('token-stats')
    if ranking.notice:
        print_box('NOTICE', [ranking.notice])
        return EXIT_OK
    low = write_ranking_csv(root / 'tokens_low_prob.csv', ranking.low)
    high = write_ranking_csv(root / 'tokens_high_prob.csv', ranking.high)
    print_box("LOWEST MEAN PROBABILITY", _ranking_lines(ranking.low) + [f"full ranking: {low}"])
    print_box("HIGHEST MEAN PROBABILITY", _ranking_lines(ranking.high) + [f"full ranking: {high}"])
    return EXIT_OK


def cmd_prompts(args) -> int:
    cfg = load_config(args)
    root = out_root(args)
    write_effective_config(cfg, root)
    if args.heldout:
        prompts = [p for d in task_difficulties(cfg.task)
                   for p in heldout_prompts(cfg.task, d, cfg.heldout_prompts, cfg.heldout_seed)]
        path = write_prompts(root / HELDOUT_PROMPT_DUMP, prompts)
    else:
        prompts = [p for step in range(1, cfg.total_steps + 1) for p in generate_prompts(cfg, step)]
        path = write_prompts(root / PROMPT_DUMP, prompts)
    print_header('prompts')
    print_box('PROMPTS', [f"{len(prompts)} {cfg.task} prompts", f"written to {path}"])
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'compare': cmd_compare,
    'ablate': cmd_ablate,
    'sweep': cmd_sweep,
    'weight-curve': cmd_weight_curve,
    'verify-theory': cmd_verify_theory,
    'token-stats': cmd_token_stats,
    'prompts': cmd_prompts,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog='tokenreg',
        description='GRPO and token-regulated GRPO on toy verifiable tasks',
        epilog="config keys (defaults):\n" + "\n".join(describe_schema()),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', type=str, help='key = value config file')
    common.add_argument('--set', action='append', metavar='KEY=VALUE',
                        help='override a config key (repeatable; wins over the file)')
    common.add_argument('--out', '-o', type=str,
                        help='output directory (default: $TOKENREG_OUTPUT or ./runs)')
    common.add_argument('--seed', type=int, help='override the master seed')
    common.add_argument('--verbose', '-v', action='count', default=0, help='-v info, -vv debug')

    sub = parser.add_subparsers(dest='command', help='Commands')
    sub.add_parser('train', parents=[common], help='Train one policy')

    compare = sub.add_parser('compare', parents=[common], help='Paired GRPO / TR-GRPO runs')
    compare.add_argument('--seeds', type=int, default=1, help='number of consecutive seeds')

    sub.add_parser('ablate', parents=[common], help='Run the four weight schemes')

    sweep = sub.add_parser('sweep', parents=[common], help='Weight-function sensitivity')
    sweep.add_argument('--param', choices=('tau', 'bounds'), default='tau')

    curve = sub.add_parser('weight-curve', parents=[common], help='Write the (pi, w) curve')
    curve.add_argument('--points', type=int, default=1000)

    verify = sub.add_parser('verify-theory', parents=[common], help='Run the property suite')
    verify.add_argument('--scale', type=float, default=1.0,
                        help="multiply every check's case count")

    stats = sub.add_parser('token-stats', parents=[common], help='Rank tokens by mean pi')
    stats.add_argument('--dumps', type=str, help='rollouts.jsonl or a run directory')
    stats.add_argument('--min-occurrences', type=int, default=5)
    stats.add_argument('--top-k', type=int, default=100)

    prompts = sub.add_parser('prompts', parents=[common], help="Write a run's prompts as JSONL")
    prompts.add_argument('--heldout', action='store_true',
                         help='write the held-out evaluation prompts instead')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command not in COMMANDS:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"tokenreg: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TokenRegError, OSError, ValueError) as e:
        logger.debug('aborted', exc_info=True)
        print(f"tokenreg: {args.command} aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == '__main__':
    sys.exit(main())
