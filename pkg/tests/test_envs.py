import itertools

import pytest

from tokenreg.envs import (
    COMPOSITE_REWARDS,
    binary_reward,
    composite_reward,
    composite_scalar,
    generate_prompt,
    parse_statements,
    random_completion_baseline,
    reward_function,
    solve_mini_kk,
    statement_holds,
    task_vocabulary,
    verify,
)
from tokenreg.errors import EnvironmentSpecError
from tokenreg.models import COMPLETELY_CORRECT, COMPLETELY_WRONG, PARTIALLY_CORRECT, Verdict


def kk_answer(prompt, extra_before=(), tail=('<eos>',)):
    vocab = task_vocabulary('mini_kk')
    return (vocab.encode(['<think>', *extra_before, '<answer>']) + prompt.ground_truth
            + vocab.encode(list(tail)))


class TestBrackets:
    def test_depth_one(self, brackets_vocab):
        prompt = generate_prompt('brackets', 1, 0)
        assert len(prompt.tokens) == 1
        assert len(prompt.ground_truth) == 1
        opening = brackets_vocab.tokens[prompt.tokens[0]]
        closing = brackets_vocab.tokens[prompt.ground_truth[0]]
        assert (opening, closing) in (('(', ')'), ('[', ']'))

    def test_same_seed_same_prompt(self):
        assert generate_prompt('brackets', 4, 11) == generate_prompt('brackets', 4, 11)

    def test_correct_answer(self, brackets_vocab):
        prompt = generate_prompt('brackets', 3, 5)
        output = prompt.ground_truth + (brackets_vocab.eos,)
        assert binary_reward(prompt, output) == 1.0
        assert verify(prompt, output).answer_class == COMPLETELY_CORRECT

    def test_empty_output(self):
        assert binary_reward(generate_prompt('brackets', 2, 0), ()) == -1.0

    def test_trailing_garbage_is_wrong(self, brackets_vocab):
        prompt = generate_prompt('brackets', 2, 1)
        output = prompt.ground_truth + (brackets_vocab.eos, brackets_vocab.index('('))
        assert binary_reward(prompt, output) == -1.0

    def test_missing_eos_is_wrong(self):
        prompt = generate_prompt('brackets', 2, 1)
        assert binary_reward(prompt, prompt.ground_truth) == -1.0

    def test_difficulty_range(self):
        with pytest.raises(EnvironmentSpecError):
            generate_prompt('brackets', 0, 0)
        with pytest.raises(EnvironmentSpecError):
            generate_prompt('brackets', 7, 0)


class TestMiniKK:
    def test_two_persons_unique_solution(self):
        prompt = generate_prompt('mini_kk', 2, 3)
        statements = parse_statements(prompt.tokens)
        assignments = list(itertools.product((True, False), repeat=2))
        consistent = [a for a in assignments
                      if all(statement_holds(s, a) == a[s[0]] for s in statements)]
        assert len(consistent) == 1
        assert solve_mini_kk(statements, 2) == consistent

    @pytest.mark.parametrize('persons', [2, 3, 4])
    def test_ground_truth_solves_puzzle(self, persons):
        prompt = generate_prompt('mini_kk', persons, persons * 17)
        assert verify(prompt, kk_answer(prompt)).match

    def test_same_seed_same_prompt(self):
        assert generate_prompt('mini_kk', 3, 9) == generate_prompt('mini_kk', 3, 9)

    def test_think_span_is_free(self):
        prompt = generate_prompt('mini_kk', 2, 4)
        output = kk_answer(prompt, extra_before=('P0', 'says', 'same', 'P1'))
        assert verify(prompt, output).match

    def test_format_failure_is_completely_wrong(self):
        prompt = generate_prompt('mini_kk', 2, 4)
        vocab = task_vocabulary('mini_kk')
        output = vocab.encode(['<answer>']) + prompt.ground_truth + (vocab.eos,)
        verdict = verify(prompt, output)
        assert not verdict.format_ok
        assert verdict.answer_class == COMPLETELY_WRONG

    def test_one_person_flipped_is_partial(self):
        prompt = generate_prompt('mini_kk', 3, 8)
        vocab = task_vocabulary('mini_kk')
        knight, knave = vocab.index('knight'), vocab.index('knave')
        span = list(prompt.ground_truth)
        span[1] = knave if span[1] == knight else knight
        output = vocab.encode(['<think>', '<answer>']) + tuple(span) + (vocab.eos,)
        assert verify(prompt, output).answer_class == PARTIALLY_CORRECT
        assert composite_scalar(prompt, output) == -2.5

    def test_all_flipped_is_completely_wrong(self):
        prompt = generate_prompt('mini_kk', 2, 8)
        vocab = task_vocabulary('mini_kk')
        knight, knave = vocab.index('knight'), vocab.index('knave')
        span = [knave if t == knight else knight if t == knave else t
                for t in prompt.ground_truth]
        output = vocab.encode(['<think>', '<answer>']) + tuple(span) + (vocab.eos,)
        assert verify(prompt, output).answer_class == COMPLETELY_WRONG

    def test_malformed_statements(self):
        vocab = task_vocabulary('mini_kk')
        with pytest.raises(EnvironmentSpecError):
            parse_statements(vocab.encode(['P0', 'knight', 'P1', 'knave']))


class TestRewards:
    @pytest.mark.parametrize("answer_class, expected", [
        (COMPLETELY_CORRECT, (1.0, 2.0)),
        (PARTIALLY_CORRECT, (-1.0, -1.5)),
        (COMPLETELY_WRONG, (-1.0, -2.0)),
    ])
    def test_composite_table(self, answer_class, expected):
        verdict = Verdict(True, answer_class, answer_class == COMPLETELY_CORRECT)
        assert composite_reward(verdict) == expected
        assert COMPOSITE_REWARDS[answer_class] == expected

    def test_verifier_is_pure(self):
        prompt = generate_prompt('mini_kk', 3, 2)
        output = kk_answer(prompt)
        assert verify(prompt, output) == verify(prompt, output)

    def test_unknown_reward(self):
        with pytest.raises(EnvironmentSpecError):
            reward_function('dense')

    def test_unknown_task(self):
        with pytest.raises(EnvironmentSpecError):
            task_vocabulary('sudoku')

    def test_random_baseline_is_poor(self):
        baseline = random_completion_baseline('brackets', 2, 4, samples=500, seed=1)
        assert -1.0 <= baseline < -0.9
