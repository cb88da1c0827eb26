"""
Toy verifiable tasks and their rule-based rewards.

brackets: the prompt is a run of opening brackets; the only correct response is the
matching closing run followed by <eos>.

mini_kk: a miniature knights-and-knaves puzzle. Each person makes one statement about
another person; knights tell the truth and knaves lie. Prompts are rejection-sampled
until exactly one truth assignment is consistent. A response looks like
<think> ... <answer> P0 knight P1 knave ... <eos>.
"""

import itertools
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import EnvironmentSpecError
from .models import (
    COMPLETELY_CORRECT,
    COMPLETELY_WRONG,
    PARTIALLY_CORRECT,
    Prompt,
    Verdict,
)
from .policy import Vocabulary

logger = logging.getLogger(__name__)

DIFFICULTY_RANGE = {'brackets': (1, 6), 'mini_kk': (2, 4)}
MAX_PERSONS = 4
MAX_PUZZLE_ATTEMPTS = 10_000

BRACKET_PAIRS = {'(': ')', '[': ']'}

COMPOSITE_REWARDS = {
    COMPLETELY_CORRECT: (1.0, 2.0),
    PARTIALLY_CORRECT: (-1.0, -1.5),
    COMPLETELY_WRONG: (-1.0, -2.0),
}

_VOCABS = {
    'brackets': Vocabulary.from_symbols(['(', ')', '[', ']', '<eos>']),
    'mini_kk': Vocabulary.from_symbols(
        [f"P{i}" for i in range(MAX_PERSONS)]
        + ['knight', 'knave', 'says', 'same', '<think>', '<answer>', '<eos>']
    ),
}

# statement kinds
CLAIM = 'claim'
SAME = 'same'


def task_vocabulary(task: str) -> Vocabulary:
    if task not in _VOCABS:
        raise EnvironmentSpecError(f"unknown task {task!r}")
    return _VOCABS[task]


def _rng(stream: Union[int, np.random.Generator]) -> np.random.Generator:
    return stream if isinstance(stream, np.random.Generator) else np.random.default_rng(stream)


def generate_prompt(task: str, difficulty: int,
                    rng_stream: Union[int, np.random.Generator]) -> Prompt:
    if task not in DIFFICULTY_RANGE:
        raise EnvironmentSpecError(f"unknown task {task!r}")
    lo, hi = DIFFICULTY_RANGE[task]
    if not lo <= difficulty <= hi:
        raise EnvironmentSpecError(f"{task} difficulty must be in [{lo}, {hi}], got {difficulty}")
    rng = _rng(rng_stream)
    if task == 'brackets':
        return _bracket_prompt(difficulty, rng)
    return _kk_prompt(difficulty, rng)


# --- brackets ----------------------------------------------------------------------

def _bracket_prompt(depth: int, rng: np.random.Generator) -> Prompt:
    vocab = _VOCABS['brackets']
    opens = list(BRACKET_PAIRS)
    picks = [opens[i] for i in rng.integers(0, len(opens), size=depth)]
    closes = [BRACKET_PAIRS[o] for o in reversed(picks)]
    return Prompt('brackets', depth, vocab.encode(picks), vocab.encode(closes))


def _verify_brackets(prompt: Prompt, output: Sequence[int]) -> Verdict:
    eos = _VOCABS['brackets'].eos
    output = list(output)
    format_ok = bool(output) and output[-1] == eos and output.count(eos) == 1
    span = output[: output.index(eos)] if eos in output else output
    match = format_ok and tuple(span) == prompt.ground_truth
    if match:
        return Verdict(True, COMPLETELY_CORRECT, True)
    hits = sum(1 for a, b in zip(span, prompt.ground_truth) if a == b)
    return Verdict(format_ok, PARTIALLY_CORRECT if hits else COMPLETELY_WRONG, False)


# --- mini knights and knaves ----------------------------------------------------------

Statement = Tuple[int, str, int, Optional[bool]]   # (speaker, kind, target, claimed_knight)


def statement_holds(statement: Statement, assignment: Sequence[bool]) -> bool:
    speaker, kind, target, claimed = statement
    if kind == CLAIM:
        return assignment[target] == claimed
    return assignment[speaker] == assignment[target]


def solve_mini_kk(statements: Sequence[Statement], persons: int) -> List[Tuple[bool, ...]]:
    """Every consistent assignment (True = knight), by exhaustive enumeration."""
    solutions = []
    for assignment in itertools.product((True, False), repeat=persons):
        if all(statement_holds(s, assignment) == assignment[s[0]] for s in statements):
            solutions.append(assignment)
    return solutions


def _encode_statements(statements: Sequence[Statement]) -> Tuple[int, ...]:
    vocab = _VOCABS['mini_kk']
    symbols = []
    for speaker, kind, target, claimed in statements:
        if kind == CLAIM:
            symbols += [f"P{speaker}", 'says', f"P{target}", 'knight' if claimed else 'knave']
        else:
            symbols += [f"P{speaker}", 'says', 'same', f"P{target}"]
    return vocab.encode(symbols)


def parse_statements(tokens: Sequence[int]) -> List[Statement]:
    """Inverse of the prompt encoding; four tokens per statement."""
    vocab = _VOCABS['mini_kk']
    symbols = vocab.decode(tokens)
    if len(symbols) % 4:
        raise EnvironmentSpecError("mini_kk prompt length must be a multiple of 4")
    statements = []
    for i in range(0, len(symbols), 4):
        speaker, says, third, fourth = symbols[i: i + 4]
        if says != 'says':
            raise EnvironmentSpecError(f"malformed statement at token {i}")
        if third == 'same':
            statements.append((int(speaker[1:]), SAME, int(fourth[1:]), None))
        else:
            statements.append((int(speaker[1:]), CLAIM, int(third[1:]), fourth == 'knight'))
    return statements


def _answer_tokens(assignment: Sequence[bool]) -> Tuple[int, ...]:
    vocab = _VOCABS['mini_kk']
    symbols = []
    for p, knight in enumerate(assignment):
        symbols += [f"P{p}", 'knight' if knight else 'knave']
    return vocab.encode(symbols)


def _kk_prompt(persons: int, rng: np.random.Generator) -> Prompt:
    for _ in range(MAX_PUZZLE_ATTEMPTS):
        truth = tuple(bool(x) for x in rng.integers(0, 2, size=persons))
        statements = []
        for speaker in range(persons):
            others = [p for p in range(persons) if p != speaker]
            target = others[int(rng.integers(0, len(others)))]
            if rng.random() < 0.5 and (truth[speaker] == truth[target]) == truth[speaker]:
                statements.append((speaker, SAME, target, None))
            else:
                # knights claim the truth about target, knaves the opposite
                claimed = truth[target] if truth[speaker] else not truth[target]
                statements.append((speaker, CLAIM, target, claimed))
        if len(solve_mini_kk(statements, persons)) == 1:
            return Prompt('mini_kk', persons, _encode_statements(statements),
                          _answer_tokens(truth))
    raise EnvironmentSpecError(f"no uniquely solvable puzzle found for {persons} persons")


def _verify_kk(prompt: Prompt, output: Sequence[int]) -> Verdict:
    vocab = _VOCABS['mini_kk']
    think, answer, eos = vocab.index('<think>'), vocab.index('<answer>'), vocab.eos
    output = list(output)
    format_ok = (
        len(output) >= 3
        and output[0] == think
        and output.count(think) == 1
        and output.count(answer) == 1
        and output[-1] == eos
        and output.count(eos) == 1
    )
    if not format_ok:
        return Verdict(False, COMPLETELY_WRONG, False)

    span = output[output.index(answer) + 1: -1]
    if tuple(span) == prompt.ground_truth:
        return Verdict(True, COMPLETELY_CORRECT, True)

    truth = _decode_assignment(prompt.ground_truth, prompt.difficulty)
    claimed = _decode_assignment(span, prompt.difficulty)
    if truth is None or claimed is None:
        return Verdict(True, COMPLETELY_WRONG, False)
    hits = sum(1 for p, knight in claimed.items() if truth[p] == knight)
    return Verdict(True, PARTIALLY_CORRECT if hits else COMPLETELY_WRONG, False)


def _decode_assignment(span: Sequence[int], persons: int) -> Optional[Dict[int, bool]]:
    """Pairs (person, role); None when malformed or a person repeats."""
    vocab = _VOCABS['mini_kk']
    if len(span) % 2:
        return None
    knight, knave = vocab.index('knight'), vocab.index('knave')
    people = {vocab.index(f"P{p}"): p for p in range(persons)}
    result: Dict[int, bool] = {}
    for i in range(0, len(span), 2):
        who, role = span[i], span[i + 1]
        if who not in people or role not in (knight, knave) or people[who] in result:
            return None
        result[people[who]] = role == knight
    return result


# --- rewards -------------------------------------------------------------------------

def verify(prompt: Prompt, output: Sequence[int]) -> Verdict:
    """Pure verifier for either task."""
    if prompt.task == 'brackets':
        return _verify_brackets(prompt, output)
    if prompt.task == 'mini_kk':
        return _verify_kk(prompt, output)
    raise EnvironmentSpecError(f"unknown task {prompt.task!r}")


def binary_reward(prompt: Prompt, output: Sequence[int]) -> float:
    return 1.0 if verify(prompt, output).match else -1.0


def composite_reward(verdict: Verdict) -> Tuple[float, float]:
    """(format_reward, answer_reward); the scalar reward is their sum."""
    return COMPOSITE_REWARDS[verdict.answer_class]


def composite_scalar(prompt: Prompt, output: Sequence[int]) -> float:
    return float(sum(composite_reward(verify(prompt, output))))


def reward_function(kind: str) -> Callable[[Prompt, Sequence[int]], float]:
    if kind == 'binary':
        return binary_reward
    if kind == 'composite':
        return composite_scalar
    raise EnvironmentSpecError(f"unknown reward kind {kind!r}")


def random_completion_baseline(task: str, difficulty: int, max_length: int,
                               samples: int = 10_000, seed: int = 0,
                               reward: str = 'binary') -> float:
    """Monte-Carlo mean reward of the uniform policy (what a zero-parameter net samples)."""
    vocab = task_vocabulary(task)
    score = reward_function(reward)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(samples):
        prompt = generate_prompt(task, difficulty, rng)
        output = []
        for _ in range(max_length):
            tok = int(rng.integers(0, vocab.size))
            output.append(tok)
            if tok == vocab.eos:
                break
        total += score(prompt, output)
    return total / samples
