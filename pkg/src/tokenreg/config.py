"""
Configuration: the flat TrainConfig schema, its derived sub-configs, and the
key = value file format.

Defaults are the settings every preset shares (G=8, clip 0.20/0.24, KL 0.001) and the
token-weight settings alpha=2, mu=0.25, tau=9, L=1.0, U=1.4. The learning rate is 1e-3
since the policies here have a few thousand parameters. PRESETS hold what differs per
setting: sampling temperature, batch shape and AdamW weight decay.
"""

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .errors import ConfigError

OUTPUT_ENV = 'TOKENREG_OUTPUT'
DEFAULT_OUTPUT_ROOT = 'runs'

ALGORITHMS = ('grpo', 'tr_grpo')
TASKS = ('brackets', 'mini_kk')
REWARDS = ('binary', 'composite')
WEIGHT_MODES = ('verbatim', 'scaled')
WEIGHT_SCHEMES = ('tr', 'equal', 'random', 'reverse')
STD_MODES = ('population', 'sample')
NORMALIZATIONS = ('token_mean_per_group',)

# Batch shape is scaled down 16x: prompts_per_step = mini-batch / 16 and
# updates_per_collection = micro-batch / mini-batch.
PRESETS: Dict[str, Dict[str, object]] = {
    'kk': {'task': 'mini_kk', 'reward': 'composite', 'temperature': 0.7,
           'prompts_per_step': 4, 'updates_per_collection': 4, 'weight_decay': 0.01},
    'math': {'temperature': 1.0, 'prompts_per_step': 8, 'updates_per_collection': 4,
             'weight_decay': 0.01},
    'agentic': {'temperature': 0.8, 'prompts_per_step': 2, 'updates_per_collection': 8,
                'weight_decay': 0.01},
}


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT_ROOT))


@dataclass(frozen=True)
class SurrogateConfig:
    eps_low: float = 0.20
    eps_high: float = 0.24
    beta: float = 0.001
    advantage_std: str = 'population'
    normalization: str = 'token_mean_per_group'

    def __post_init__(self):
        if not 0.0 <= self.eps_low < 1.0:
            raise ConfigError(f"eps_low must be in [0, 1), got {self.eps_low}", key='eps_low')
        if not self.eps_high > 0.0:
            raise ConfigError(f"eps_high must be > 0, got {self.eps_high}", key='eps_high')
        if not self.beta >= 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}", key='beta')
        if self.advantage_std not in STD_MODES:
            raise ConfigError(f"advantage_std must be one of {STD_MODES}", key='advantage_std')
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}",
                              key='normalization')


@dataclass(frozen=True)
class WeightConfig:
    """Probability-shaping weight w = clip(alpha * (sigmoid(arg) - mu), L, U)."""
    alpha: float = 2.0
    mu: float = 0.25
    tau: float = 9.0
    lower: float = 1.0
    upper: float = 1.4
    mode: str = 'scaled'
    scheme: str = 'tr'
    random_low: float = 0.5
    random_high: float = 1.5

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}", key='alpha')
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}", key='tau')
        if not self.lower <= self.upper:
            raise ConfigError(f"weight_lower {self.lower} exceeds weight_upper {self.upper}",
                              key='weight_lower')
        if self.mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}", key='weight_mode')
        if self.scheme not in WEIGHT_SCHEMES:
            raise ConfigError(f"weight_scheme must be one of {WEIGHT_SCHEMES}",
                              key='weight_scheme')
        if not self.random_low <= self.random_high:
            raise ConfigError("random_low exceeds random_high", key='random_low')


@dataclass(frozen=True)
class SharpnessConfig:
    rho: float = 0.05

    def __post_init__(self):
        if not self.rho >= 0:
            raise ConfigError(f"sharpness_rho must be >= 0, got {self.rho}", key='sharpness_rho')


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 8
    hidden: int = 32
    layers: int = 2
    context: int = 8
    init_scale: float = 0.08

    def __post_init__(self):
        for key in ('embed_dim', 'hidden', 'layers', 'context'):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        if self.init_scale < 0:
            raise ConfigError("init_scale must be >= 0", key='init_scale')


@dataclass
class TrainConfig:
    """Every field is a config key. Types come from the defaults."""

    preset: str = ''

    # === ALGORITHM ===
    algorithm: str = 'grpo'
    weight_scheme: str = 'tr'
    weight_mode: str = 'scaled'
    alpha: float = 2.0
    mu: float = 0.25
    tau: float = 9.0
    weight_lower: float = 1.0
    weight_upper: float = 1.4
    random_low: float = 0.5
    random_high: float = 1.5

    # === SURROGATE ===
    eps_low: float = 0.20
    eps_high: float = 0.24
    beta: float = 0.001
    advantage_std: str = 'population'

    # === TASK / SAMPLING ===
    task: str = 'brackets'
    difficulty: int = 2
    reward: str = 'binary'
    group_size: int = 8
    temperature: float = 1.0
    max_response_length: int = 8
    prompts_per_step: int = 4
    record_tempered: bool = False

    # === POLICY ===
    embed_dim: int = 8
    hidden: int = 32
    layers: int = 2
    context: int = 8
    init_scale: float = 0.08

    # === OPTIMIZER ===
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    # === LOOP ===
    total_steps: int = 200
    seed: int = 42
    updates_per_collection: int = 1
    checkpoint_every: int = 20
    sharpness_rho: float = 0.05
    workers: int = 1
    dump_rollouts: bool = False
    timing: bool = False
    log_every: int = 10

    # === EVALUATION ===
    heldout_prompts: int = 50
    heldout_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> 'TrainConfig':
        choices = {
            'algorithm': ALGORITHMS,
            'task': TASKS,
            'reward': REWARDS,
        }
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"must be one of {tuple(PRESETS)}, got {self.preset!r}",
                              key='preset')
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"must be one of {allowed}, got {getattr(self, key)!r}", key=key)
        positive = ('group_size', 'max_response_length', 'prompts_per_step', 'total_steps',
                    'updates_per_collection', 'checkpoint_every', 'workers', 'log_every',
                'heldout_prompts')
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, key)}", key=key)
        if self.group_size < 2:
            raise ConfigError("group std is undefined for G < 2", key='group_size')
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0 (0 means greedy)", key='temperature')
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0", key='learning_rate')
        if self.seed < 0:
            raise ConfigError("seed must be >= 0", key='seed')
        if self.heldout_seed < 0:
            raise ConfigError("heldout_seed must be >= 0", key='heldout_seed')
        # Sub-configs check their own invariants.
        self.surrogate()
        self.weights()
        self.policy()
        self.sharpness()
        return self

    def surrogate(self) -> SurrogateConfig:
        return SurrogateConfig(self.eps_low, self.eps_high, self.beta, self.advantage_std)

    def weights(self) -> WeightConfig:
        return WeightConfig(
            alpha=self.alpha, mu=self.mu, tau=self.tau,
            lower=self.weight_lower, upper=self.weight_upper,
            mode=self.weight_mode, scheme=self.weight_scheme,
            random_low=self.random_low, random_high=self.random_high,
        )

    def policy(self) -> PolicyConfig:
        return PolicyConfig(self.embed_dim, self.hidden, self.layers, self.context,
                            self.init_scale)

    def sharpness(self) -> SharpnessConfig:
        return SharpnessConfig(self.sharpness_rho)

    @classmethod
    def from_preset(cls, name: str, **changes) -> 'TrainConfig':
        """Preset values under explicit changes; the preset name is kept on the config."""
        return cls(**expand_preset({**changes, 'preset': name}))

    def replace(self, **changes) -> 'TrainConfig':
        values = asdict(self)
        for key in changes:
            if key not in values:
                raise ConfigError("unknown key", key=key)
        values.update(changes)
        return TrainConfig(**values)


# --- key = value format --------------------------------------------------------

_TRUE = {'true', '1', 'yes', 'on'}
_FALSE = {'false', '0', 'no', 'off'}


def schema() -> Dict[str, type]:
    return {f.name: type(f.default) for f in fields(TrainConfig)}


def _convert(key: str, raw: str, kind: type, line: Optional[int]):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"expected {kind.__name__}, got {raw!r}", key=key, line=line) from None
    return raw


def _split(text: str, line: Optional[int]) -> Tuple[str, str]:
    if '=' not in text:
        raise ConfigError(f"expected key = value, got {text!r}", line=line)
    key, value = text.split('=', 1)
    return key.strip(), value.strip()


def expand_preset(values: Dict[str, object]) -> Dict[str, object]:
    """Fill in the keys of values['preset'] that values does not set itself."""
    name = values.get('preset') or ''
    if not name:
        return dict(values)
    if name not in PRESETS:
        raise ConfigError(f"must be one of {tuple(PRESETS)}, got {name!r}", key='preset')
    return {**PRESETS[name], **values}


def parse_config(path: Optional[Union[str, Path]] = None,
                 overrides: Sequence[str] = ()) -> TrainConfig:
    """
    Read a flat key = value file, then apply key=value overrides (overrides win).

    A preset named by either source fills in every key neither source sets.
    """
    kinds = schema()
    values: Dict[str, object] = {}

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for number, text in enumerate(path.read_text().splitlines(), start=1):
            text = text.split("#", 1)[0].strip()
            if not text:
                continue
            key, raw = _split(text, number)
            if key not in kinds:
                raise ConfigError("unknown key", key=key, line=number)
            values[key] = _convert(key, raw, kinds[key], number)

    for item in overrides:
        key, raw = _split(item, None)
        if key not in kinds:
            raise ConfigError("unknown key", key=key)
        values[key] = _convert(key, raw, kinds[key], None)

    return TrainConfig(**expand_preset(values))


def _format(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return repr(value) if isinstance(value, float) else str(value)


def format_config(cfg: TrainConfig) -> str:
    return ''.join(f"{key} = {_format(value)}\n" for key, value in asdict(cfg).items())


def write_effective_config(cfg: TrainConfig, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / 'config.effective'
    path.write_text(format_config(cfg))
    return path


def describe_schema() -> List[str]:
    """One line per key with its default, for --help."""
    defaults = TrainConfig()
    return [f"  {f.name:<24} {_format(getattr(defaults, f.name))}" for f in fields(TrainConfig)]
