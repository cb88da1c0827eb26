"""Shared fixtures: tiny policies and configs that keep every test well under a second."""

import numpy as np
import pytest

from tokenreg.config import PolicyConfig, SurrogateConfig, TrainConfig, WeightConfig
from tokenreg.envs import task_vocabulary
from tokenreg.policy import init_params


@pytest.fixture
def brackets_vocab():
    return task_vocabulary('brackets')


@pytest.fixture
def tiny_policy_cfg():
    return PolicyConfig(embed_dim=3, hidden=4, layers=2, context=3, init_scale=0.5)


@pytest.fixture
def tiny_params(brackets_vocab, tiny_policy_cfg):
    return init_params(brackets_vocab.size, tiny_policy_cfg, seed=7)


@pytest.fixture
def surrogate_cfg():
    return SurrogateConfig()


@pytest.fixture
def no_kl_cfg():
    return SurrogateConfig(beta=0.0)


@pytest.fixture
def verbatim_cfg():
    return WeightConfig(mode='verbatim')


@pytest.fixture
def scaled_cfg():
    return WeightConfig(mode='scaled')


@pytest.fixture
def quick_train_cfg():
    """A run small enough for unit tests: 3 steps, 2 prompts, G=4."""
    return TrainConfig(
        total_steps=3,
        prompts_per_step=2,
        group_size=4,
        max_response_length=4,
        difficulty=1,
        embed_dim=3,
        hidden=6,
        layers=2,
        context=4,
        checkpoint_every=2,
        log_every=1,
        seed=3,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
