"""
Tiny layered autoregressive softmax policy.

The network reads the last `context` tokens (left-padded with a reserved pad index),
concatenates their embeddings into a_0, applies L tanh layers
a_l = tanh(a_{l-1} M_l + b_l), and maps a_L to logits h = a_L W. Row-vector convention
throughout, matching the Jacobian orientation used by the theory checks.

Two forward paths exist: plain numpy (sampling, recorded log-probs, Jacobians) and the
graph path (training losses). Both run the same array expressions in the same order.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import PolicyConfig
from .errors import DeskScaleError, RolloutError, VocabularyError
from .graph import GraphBuilder, Var, gradient, forward, stable_log_softmax, stable_softmax
from .models import Rollout

logger = logging.getLogger(__name__)

MAX_VOCAB = 64
MAX_JACOBIAN_WIDTH = 32
MAX_LAYER_PARAMS = 4096
CHECKPOINT_VERSION = 1

SNAPSHOT_ROLES = ('old', 'ref')


@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]
    eos: int

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("vocabulary symbols must be distinct")
        if not 2 <= len(self.tokens) <= MAX_VOCAB:
            raise VocabularyError(f"vocabulary size must be in [2, {MAX_VOCAB}]")
        if not 0 <= self.eos < len(self.tokens):
            raise VocabularyError(f"EOS index {self.eos} outside vocabulary")

    @classmethod
    def from_symbols(cls, symbols: Sequence[str], eos_symbol: str = '<eos>') -> 'Vocabulary':
        symbols = tuple(symbols)
        if symbols.count(eos_symbol) != 1:
            raise VocabularyError(f"'{eos_symbol}' must appear exactly once")
        return cls(symbols, symbols.index(eos_symbol))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        """Reserved start/pad slot in the embedding table; never emitted."""
        return len(self.tokens)

    def index(self, symbol: str) -> int:
        try:
            return self.tokens.index(symbol)
        except ValueError:
            raise VocabularyError(f"unknown symbol {symbol!r}") from None

    def encode(self, symbols: Sequence[str]) -> Tuple[int, ...]:
        return tuple(self.index(s) for s in symbols)

    def decode(self, ids: Sequence[int]) -> List[str]:
        self.check(ids)
        return [self.tokens[i] for i in ids]

    def check(self, ids: Sequence[int]) -> None:
        for i in ids:
            if not 0 <= int(i) < self.size:
                raise VocabularyError(f"token index {i} outside vocabulary of size {self.size}")


@dataclass
class PolicyParams:
    embedding: np.ndarray          # (N + 1, d); row N is the pad slot
    weights: List[np.ndarray]      # layer l: (in_l, H_l)
    biases: List[np.ndarray]       # layer l: (H_l,)
    unembedding: np.ndarray        # (H_L, N)
    context: int

    @property
    def layers(self) -> int:
        return len(self.weights)

    @property
    def vocab_size(self) -> int:
        return self.unembedding.shape[1]

    @property
    def pad(self) -> int:
        return self.vocab_size

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    def arrays(self) -> Dict[str, np.ndarray]:
        """Named views of the live arrays, in a fixed order."""
        named = {'embedding': self.embedding}
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            named[f"layer{l}.weight"] = w
            named[f"layer{l}.bias"] = b
        named['unembedding'] = self.unembedding
        return named

    def layer_names(self, l: int) -> Tuple[str, str]:
        return f"layer{l}.weight", f"layer{l}.bias"

    @property
    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.arrays().values()))

    def copy(self) -> 'PolicyParams':
        return PolicyParams(
            embedding=self.embedding.copy(),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            unembedding=self.unembedding.copy(),
            context=self.context,
        )

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], context: int) -> 'PolicyParams':
        layers = sum(1 for k in arrays if k.endswith('.weight'))
        return cls(
            embedding=np.array(arrays['embedding'], dtype=np.float64),
            weights=[np.array(arrays[f"layer{l}.weight"], dtype=np.float64)
                     for l in range(1, layers + 1)],
            biases=[np.array(arrays[f"layer{l}.bias"], dtype=np.float64)
                    for l in range(1, layers + 1)],
            unembedding=np.array(arrays['unembedding'], dtype=np.float64),
            context=int(context),
        )


@dataclass(frozen=True)
class PolicySnapshot:
    """Frozen copy of the parameters serving as pi_old or pi_ref."""
    params: PolicyParams
    role: str


@dataclass
class ForwardTrace:
    inputs: np.ndarray                  # a_0, concatenated context embeddings
    activations: List[np.ndarray]       # a_1 .. a_L
    logits: np.ndarray                  # h
    probs: np.ndarray                   # p


def init_params(vocab_size: int, cfg: PolicyConfig, seed: int) -> PolicyParams:
    """Embedding and affine weights uniform in [-init_scale, init_scale], biases zero."""
    rng = np.random.default_rng(seed)
    s = cfg.init_scale
    embedding = rng.uniform(-s, s, size=(vocab_size + 1, cfg.embed_dim))
    weights, biases = [], []
    width = cfg.context * cfg.embed_dim
    for _ in range(cfg.layers):
        weights.append(rng.uniform(-s, s, size=(width, cfg.hidden)))
        biases.append(np.zeros(cfg.hidden))
        width = cfg.hidden
    unembedding = rng.uniform(-s, s, size=(cfg.hidden, vocab_size))
    params = PolicyParams(embedding, weights, biases, unembedding, cfg.context)
    logger.debug("initialised policy with %d parameters", params.parameter_count)
    return params


def zero_params(vocab_size: int, cfg: PolicyConfig) -> PolicyParams:
    return init_params(vocab_size, PolicyConfig(cfg.embed_dim, cfg.hidden, cfg.layers,
                                                cfg.context, 0.0), seed=0)


def snapshot(params: PolicyParams, role: str) -> PolicySnapshot:
    if role not in SNAPSHOT_ROLES:
        raise ValueError(f"snapshot role must be one of {SNAPSHOT_ROLES}")
    frozen = params.copy()
    for arr in frozen.arrays().values():
        arr.setflags(write=False)
    return PolicySnapshot(frozen, role)


# --- numpy forward -----------------------------------------------------------------

def _check_tokens(params: PolicyParams, tokens: Sequence[int]) -> None:
    for t in tokens:
        if not 0 <= int(t) < params.vocab_size:
            raise VocabularyError(f"token index {t} outside vocabulary of size {params.vocab_size}")


def context_windows(params: PolicyParams, prompt: Sequence[int],
                    output: Sequence[int]) -> np.ndarray:
    """(T, C) index matrix; row t is the left-padded window predicting output[t]."""
    c = params.context
    full = [params.pad] * c + list(prompt) + list(output)
    start = len(prompt)
    return np.array([full[start + t: start + t + c] for t in range(len(output))],
                    dtype=np.int64).reshape(len(output), c)


def _window(params: PolicyParams, context: Sequence[int]) -> np.ndarray:
    c = params.context
    padded = [params.pad] * c + list(context)
    return np.array(padded[-c:], dtype=np.int64)


def forward_windows(params: PolicyParams, windows: np.ndarray):
    """Batched forward. Returns (a_0, [a_1..a_L], logits)."""
    t, c = windows.shape
    x = params.embedding[windows].reshape(t, c * params.embed_dim)
    acts = []
    a = x
    for w, b in zip(params.weights, params.biases):
        a = np.tanh(a @ w + b)
        acts.append(a)
    return x, acts, a @ params.unembedding


def token_distribution(params: PolicyParams, context: Sequence[int]) -> ForwardTrace:
    """Next-token distribution after `context` (may be empty)."""
    _check_tokens(params, context)
    x, acts, logits = forward_windows(params, _window(params, context)[None, :])
    return ForwardTrace(
        inputs=x[0],
        activations=[a[0] for a in acts],
        logits=logits[0],
        probs=stable_softmax(logits[0]),
    )


def sequence_log_probs(params: PolicyParams, prompt: Sequence[int], output: Sequence[int],
                       temperature: float = 1.0) -> np.ndarray:
    """log pi(output[t] | prompt ++ output[:t]) for every t."""
    if len(output) == 0:
        raise RolloutError("output must be nonempty")
    _check_tokens(params, prompt)
    _check_tokens(params, output)
    windows = context_windows(params, prompt, output)
    _, _, logits = forward_windows(params, windows)
    if temperature != 1.0:
        logits = logits / temperature
    logp = stable_log_softmax(logits)
    return logp[np.arange(len(output)), np.asarray(output, dtype=np.int64)]


def _decode(params: PolicyParams, prompts: Sequence[Sequence[int]], max_length: int, eos: int,
            choose: Callable[[np.ndarray], np.ndarray]) -> List[List[int]]:
    """Batched autoregressive decode; choose maps (active, V) logits to token ids."""
    seqs: List[List[int]] = [[] for _ in prompts]
    done = np.zeros(len(prompts), dtype=bool)
    for _ in range(max_length):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        windows = np.stack([_window(params, list(prompts[i]) + seqs[i]) for i in active])
        _, _, logits = forward_windows(params, windows)
        for i, tok in zip(active, choose(logits)):
            seqs[i].append(int(tok))
            if tok == eos:
                done[i] = True
    return seqs


def sample_group(snap: PolicySnapshot, prompt: Sequence[int], group_size: int,
                 temperature: float, rng: Union[int, np.random.Generator], max_length: int,
                 eos: int, record_tempered: bool = False) -> List[Rollout]:
    """
    Sample G responses from a frozen snapshot. Temperature 0 is greedy argmax.

    Recorded log-probs are untempered log pi_old unless record_tempered is set.
    """
    if group_size < 2:
        raise RolloutError(f"group size must be >= 2, got {group_size}")
    if temperature < 0:
        raise RolloutError(f"temperature must be >= 0, got {temperature}")
    if max_length < 1:
        raise RolloutError("max response length must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = snap.params
    _check_tokens(params, prompt)

    def choose(logits: np.ndarray) -> np.ndarray:
        if temperature == 0:
            return logits.argmax(axis=-1)
        probs = stable_softmax(logits / temperature)
        u = rng.random(logits.shape[0])
        choice = (probs.cumsum(axis=-1) < u[:, None]).sum(axis=-1)
        return np.minimum(choice, params.vocab_size - 1)

    seqs = _decode(params, [prompt] * group_size, max_length, eos, choose)
    recorded_temp = temperature if record_tempered and temperature > 0 else 1.0
    return [Rollout(tuple(s), sequence_log_probs(params, prompt, s, recorded_temp)) for s in seqs]


def greedy_decode(params: PolicyParams, prompts: Sequence[Sequence[int]], max_length: int,
                  eos: int) -> List[Tuple[int, ...]]:
    """Argmax response for each prompt, all prompts decoded as one batch."""
    if max_length < 1:
        raise RolloutError("max response length must be >= 1")
    for prompt in prompts:
        _check_tokens(params, prompt)
    if not prompts:
        return []
    seqs = _decode(params, prompts, max_length, eos, lambda logits: logits.argmax(axis=-1))
    return [tuple(s) for s in seqs]


# --- graph path ------------------------------------------------------------------

def param_leaves(g: GraphBuilder, params: PolicyParams) -> Dict[str, Var]:
    return {name: g.leaf(name, arr.shape) for name, arr in params.arrays().items()}


def build_logits(g: GraphBuilder, leaves: Dict[str, Var], params: PolicyParams,
                 windows: np.ndarray) -> Var:
    t, c = windows.shape
    x = g.reshape(g.take_rows(leaves['embedding'], windows), (t, c * params.embed_dim))
    a = x
    for l in range(1, params.layers + 1):
        w_name, b_name = params.layer_names(l)
        a = g.tanh(g.add_row(g.matmul(a, leaves[w_name]), leaves[b_name]), label=f"a{l}")
    return g.matmul(a, leaves['unembedding'], label='logits')


def build_log_probs(g: GraphBuilder, leaves: Dict[str, Var], params: PolicyParams,
                    windows: np.ndarray, targets: Sequence[int]) -> Var:
    """(T,) node of log pi(targets[t] | windows[t])."""
    logits = build_logits(g, leaves, params, windows)
    return g.pick(g.log_softmax(logits), targets, label='logp')


def score_gradient(params: PolicyParams, context: Sequence[int],
                   token: int) -> Dict[str, np.ndarray]:
    """Autodiff gradient of log pi(token | context) for every parameter array."""
    _check_tokens(params, list(context) + [token])
    g = GraphBuilder()
    leaves = param_leaves(g, params)
    logp = build_log_probs(g, leaves, params, _window(params, context)[None, :], [token])
    graph = g.build(g.sum(logp))
    tape = forward(graph, params.arrays())
    return gradient(tape, leaves.keys())


# --- Jacobians ---------------------------------------------------------------------

@dataclass
class LayerJacobians:
    """
    Row-convention Jacobians at one input: da_{j+1} = da_j J_j, da_l = dtheta_l G_l,
    dh = da_L W. theta_l is M_l flattened row-major followed by b_l.
    """
    J: List[np.ndarray]
    G: List[np.ndarray]
    W: np.ndarray
    trace: ForwardTrace = field(repr=False, default=None)


def _check_desk_scale(params: PolicyParams) -> None:
    for l, (w, b) in enumerate(zip(params.weights, params.biases), start=1):
        if w.shape[1] > MAX_JACOBIAN_WIDTH:
            raise DeskScaleError(f"layer {l} width {w.shape[1]} exceeds {MAX_JACOBIAN_WIDTH}")
        if w.size + b.size > MAX_LAYER_PARAMS:
            raise DeskScaleError(f"layer {l} has {w.size + b.size} parameters, "
                                 f"cap is {MAX_LAYER_PARAMS}")


def _layer(a_prev: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.tanh(a_prev @ w + b)


def numerical_layer_jacobians(params: PolicyParams, context: Sequence[int],
                              method: str = 'chain', h: float = 1e-6) -> LayerJacobians:
    """Per-layer Jacobians by exact chain rule or central perturbation of each input column."""
    _check_desk_scale(params)
    trace = token_distribution(params, context)
    prev = [trace.inputs] + trace.activations[:-1]

    if method == 'chain':
        J = []
        for k in range(params.layers - 1):
            d = 1.0 - trace.activations[k + 1] ** 2
            J.append(params.weights[k + 1] * d[None, :])
        G = []
        for k in range(params.layers):
            d = 1.0 - trace.activations[k] ** 2
            diag = np.diag(d)
            G.append(np.vstack([np.kron(prev[k][:, None], diag), diag]))
    elif method == 'finite':
        J = []
        for k in range(params.layers - 1):
            a = trace.activations[k]
            w, b = params.weights[k + 1], params.biases[k + 1]
            rows = []
            for i in range(a.size):
                e = np.zeros(a.size)
                e[i] = h
                rows.append((_layer(a + e, w, b) - _layer(a - e, w, b)) / (2 * h))
            J.append(np.array(rows))
        G = []
        for k in range(params.layers):
            w, b = params.weights[k], params.biases[k]
            theta = np.concatenate([w.ravel(), b])
            rows = []
            for p in range(theta.size):
                plus, minus = theta.copy(), theta.copy()
                plus[p] += h
                minus[p] -= h
                f_plus = _layer(prev[k], plus[: w.size].reshape(w.shape), plus[w.size:])
                f_minus = _layer(prev[k], minus[: w.size].reshape(w.shape), minus[w.size:])
                rows.append((f_plus - f_minus) / (2 * h))
            G.append(np.array(rows))
    else:
        raise ValueError(f"unknown Jacobian method {method!r}")

    return LayerJacobians(J=J, G=G, W=params.unembedding.copy(), trace=trace)


# --- checkpoints ---------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], params: PolicyParams, vocab: Vocabulary) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            np.savez(
                f,
                format_version=np.array(CHECKPOINT_VERSION),
                context=np.array(params.context),
                vocab_tokens=np.array(vocab.tokens),
                vocab_eos=np.array(vocab.eos),
                **params.arrays(),
            )
    except OSError as e:
        raise OSError(f"could not write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[PolicyParams, Vocabulary]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data['format_version'])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            arrays = {k: data[k] for k in data.files
                      if k == 'embedding' or k == 'unembedding' or k.startswith('layer')}
            params = PolicyParams.from_arrays(arrays, int(data['context']))
            vocab = Vocabulary(tuple(str(t) for t in data['vocab_tokens']), int(data['vocab_eos']))
    except OSError as e:
        raise OSError(f"could not read checkpoint {path}: {e}") from e
    return params, vocab
