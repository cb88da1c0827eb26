import csv
import logging

import pytest

from tokenreg import cli
from tokenreg.config import TrainConfig, parse_config
from tokenreg.dumps import read_prompts
from tokenreg.evaluation import heldout_prompts
from tokenreg.models import CheckResult
from tokenreg.trainer import generate_prompts

QUICK = ['--set', 'total_steps=2', '--set', 'prompts_per_step=2', '--set', 'group_size=3',
         '--set', 'max_response_length=3', '--set', 'difficulty=1', '--set', 'hidden=4',
         '--set', 'embed_dim=2', '--set', 'context=3', '--set', 'checkpoint_every=2',
         '--set', 'heldout_prompts=4']


@pytest.fixture(autouse=True)
def fresh_logging():
    yield
    logger = logging.getLogger('tokenreg')
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.setLevel(logging.NOTSET)


def run(*argv):
    return cli.main(list(argv))


def test_no_command():
    assert run() == cli.EXIT_USAGE


def test_bad_flag():
    with pytest.raises(SystemExit) as info:
        run('weight-curve', '--points', 'many')
    assert info.value.code == cli.EXIT_USAGE


def test_unknown_config_key(tmp_path, capsys):
    assert run('weight-curve', '--set', 'temprature=0.5', '-o', str(tmp_path)) == cli.EXIT_USAGE
    assert 'temprature' in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run('train', '-c', str(tmp_path / 'absent.cfg')) == cli.EXIT_USAGE


def test_weight_curve(tmp_path, capsys):
    assert run('weight-curve', '--points', '20', '-o', str(tmp_path)) == cli.EXIT_OK
    with open(tmp_path / 'weight_curve_scaled.csv', newline='') as f:
        rows = list(csv.reader(f))
    assert len(rows) == 21
    assert 'WARNING' not in capsys.readouterr().out


def test_weight_curve_warns_when_constant(tmp_path, capsys):
    assert run('weight-curve', '--set', 'weight_mode=verbatim', '-o', str(tmp_path)) == 0
    assert (tmp_path / 'weight_curve_verbatim.csv').is_file()
    assert 'WARNING' in capsys.readouterr().out


def test_verify_theory(tmp_path):
    assert run('verify-theory', '--scale', '0.01', '-o', str(tmp_path)) == cli.EXIT_OK
    assert (tmp_path / 'verify_report.csv').is_file()


def test_verify_theory_failure(tmp_path, monkeypatch, capsys):
    def failing(seed=0, scale=1.0):
        return [CheckResult('broken', cases=1, violations=1, worst=1.0, tolerance=0.0)]

    monkeypatch.setattr(cli, 'run_suite', failing)
    assert run('verify-theory', '-o', str(tmp_path)) == cli.EXIT_VERIFY
    assert "FAILED: broken" in capsys.readouterr().out


def test_train_then_token_stats(tmp_path):
    run_dir = tmp_path / 'run'
    assert run('train', *QUICK, '--set', 'dump_rollouts=true', '--set', 'algorithm=tr_grpo',
               '--seed', '4', '-o', str(run_dir)) == cli.EXIT_OK
    assert (run_dir / 'metrics.csv').is_file()
    assert "seed = 4" in (run_dir / 'config.effective').read_text()

    stats_dir = tmp_path / 'stats'
    assert run('token-stats', '--dumps', str(run_dir), '--min-occurrences', '1',
               '-o', str(stats_dir)) == cli.EXIT_OK
    assert (stats_dir / 'tokens_low_prob.csv').is_file()
    assert (stats_dir / 'tokens_high_prob.csv').is_file()


def test_token_stats_notice(tmp_path, capsys):
    dump = tmp_path / 'rollouts.jsonl'
    dump.write_text('{"rollouts": [{"tokens": [{"token": 1, "pi": 0.5}]}]}\n')
    assert run('token-stats', '--dumps', str(dump), '-o', str(tmp_path)) == cli.EXIT_OK
    assert 'NOTICE' in capsys.readouterr().out
    assert not (tmp_path / 'tokens_low_prob.csv').exists()


def test_token_stats_without_dumps(tmp_path):
    assert run('token-stats', '--dumps', str(tmp_path / 'empty'), '-o', str(tmp_path)) == \
        cli.EXIT_ABORT


def test_compare(tmp_path, capsys):
    assert run('compare', *QUICK, '--seeds', '2', '-o', str(tmp_path)) == cli.EXIT_OK
    for seed in (42, 43):
        assert (tmp_path / f"seed{seed}" / 'grpo' / 'metrics.csv').is_file()
        assert (tmp_path / f"seed{seed}" / 'tr_grpo' / 'metrics.csv').is_file()
    with open(tmp_path / 'compare_summary.csv', newline='') as f:
        assert [r['seed'] for r in csv.DictReader(f)] == ['42', '43']
    assert 'seeds' in capsys.readouterr().out


def test_ablate(tmp_path):
    assert run('ablate', *QUICK, '-o', str(tmp_path)) == cli.EXIT_OK
    for scheme in cli.ABLATION_SCHEMES:
        assert (tmp_path / scheme / 'metrics.csv').is_file()


def test_sweep_bounds(tmp_path):
    assert run('sweep', *QUICK, '--param', 'bounds', '-o', str(tmp_path)) == cli.EXIT_OK
    assert (tmp_path / 'bounds_0.5_1.5' / 'metrics.csv').is_file()
    assert len(list(tmp_path.glob("bounds_*"))) == len(cli.SWEEP_BOUNDS)


def read_accuracy(path):
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


def test_compare_writes_heldout_accuracy(tmp_path):
    assert run('compare', *QUICK, '-o', str(tmp_path)) == cli.EXIT_OK
    rows = read_accuracy(tmp_path / 'heldout_accuracy.csv')
    assert {r['run'] for r in rows} == {'seed42/grpo', 'seed42/tr_grpo'}
    # brackets difficulties 1..6 for each run
    assert len(rows) == 12
    assert all(r['prompts'] == '4' and 0.0 <= float(r['accuracy']) <= 1.0 for r in rows)


def test_ablate_and_sweep_write_heldout_accuracy(tmp_path):
    assert run('ablate', *QUICK, '-o', str(tmp_path / 'ablate')) == cli.EXIT_OK
    rows = read_accuracy(tmp_path / 'ablate' / 'heldout_accuracy.csv')
    assert [r['run'] for r in rows[::6]] == list(cli.ABLATION_SCHEMES)
    assert [r['difficulty'] for r in rows[:6]] == ['1', '2', '3', '4', '5', '6']

    assert run('sweep', *QUICK, '--param', 'tau', '-o', str(tmp_path / 'sweep')) == cli.EXIT_OK
    rows = read_accuracy(tmp_path / 'sweep' / 'heldout_accuracy.csv')
    assert {r['run'] for r in rows} == {f'tau_{t:g}' for t in cli.SWEEP_TAU}


@pytest.mark.parametrize('argv', [
    ('weight-curve', '--points', '10'),
    ('verify-theory', '--scale', '0.01'),
    ('token-stats', '--dumps', 'absent'),
])
def test_commands_write_effective_config(tmp_path, argv):
    out = tmp_path / 'out'
    run(*argv, '--set', 'tau=7.0', '-o', str(out))
    cfg = parse_config(out / 'config.effective')
    assert cfg == TrainConfig(tau=7.0)


def test_prompts_dump_matches_training_stream(tmp_path):
    assert run('prompts', *QUICK, '-o', str(tmp_path)) == cli.EXIT_OK
    cfg = parse_config(tmp_path / 'config.effective')
    expected = [p for step in (1, 2) for p in generate_prompts(cfg, step)]
    assert read_prompts(tmp_path / 'prompts.jsonl') == expected


def test_prompts_dump_heldout(tmp_path):
    assert run('prompts', '--heldout', '--set', 'task=mini_kk', '--set', 'heldout_prompts=3',
               '-o', str(tmp_path)) == cli.EXIT_OK
    prompts = read_prompts(tmp_path / 'heldout_prompts.jsonl')
    assert [p.difficulty for p in prompts] == [2, 2, 2, 3, 3, 3, 4, 4, 4]
    assert prompts[:3] == heldout_prompts('mini_kk', 2, 3, 0)
