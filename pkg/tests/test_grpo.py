import math

import numpy as np
import pytest

from tokenreg.config import SurrogateConfig
from tokenreg.errors import ConfigError, RolloutError
from tokenreg.graph import GraphBuilder, value_and_grad
from tokenreg.grpo import (
    average_losses,
    batch_record,
    gamma_coefficient,
    group_advantages,
    grpo_group_loss,
    grpo_kl,
    grpo_token_surrogate,
    kl_from_ratio,
    make_term,
    token_terms,
    trust_indicator,
    trust_indicators,
)
from tokenreg.models import GroupBatch, Prompt, TokenTerm
from tokenreg.policy import param_leaves, sequence_log_probs


def token_objective(ratio, advantage, cfg, logp_ref_minus_logp=0.0):
    """(value, d/d logp) of the one-token GRPO objective at the given ratio."""
    g = GraphBuilder()
    logp = g.leaf('logp', (1,))
    old = np.array([-math.log(ratio)])
    ref = np.array([logp_ref_minus_logp])
    root = g.sum(grpo_token_surrogate(g, logp, old, ref, np.array([advantage]), cfg))
    value, grads = value_and_grad(g.build(root), {'logp': np.zeros(1)}, ['logp'])
    return value, float(grads['logp'][0])


def make_batch(params, prompt_tokens, outputs, rewards, old_shift=0.0, ref_shift=0.0):
    prompt = Prompt('brackets', len(prompt_tokens), tuple(prompt_tokens), (1,))
    current = [sequence_log_probs(params, prompt_tokens, o) for o in outputs]
    return GroupBatch(
        prompt=prompt,
        outputs=[tuple(o) for o in outputs],
        rewards=list(rewards),
        logp_old=[lp + old_shift for lp in current],
        logp_ref=[lp + ref_shift for lp in current],
    )


def group_loss(params, batch, cfg):
    g = GraphBuilder()
    leaves = param_leaves(g, params)
    root = grpo_group_loss(g, batch, leaves, params, cfg)
    return value_and_grad(g.build(root), params.arrays(), leaves.keys())


class TestAdvantages:
    def test_symmetric(self):
        np.testing.assert_array_equal(group_advantages([1, 1, -1, -1]), [1, 1, -1, -1])

    def test_degenerate_group(self):
        np.testing.assert_array_equal(group_advantages([1, 1, 1, 1]), np.zeros(4))

    def test_matches_direct_computation(self):
        rewards = [3, -2.5, -3, 3, 3, -3, -2.5, 3]
        mean = sum(rewards) / len(rewards)
        std = math.sqrt(sum((r - mean) ** 2 for r in rewards) / len(rewards))
        expected = [(r - mean) / std for r in rewards]
        np.testing.assert_allclose(group_advantages(rewards), expected, atol=1e-12)

    def test_sample_std_mode(self):
        adv = group_advantages([1.0, -1.0], std_mode='sample')
        np.testing.assert_allclose(adv, [1 / math.sqrt(2), -1 / math.sqrt(2)], atol=1e-15)

    def test_zero_mean_unit_std(self, rng):
        adv = group_advantages(rng.normal(3.0, 2.0, size=16))
        assert abs(adv.mean()) < 1e-12
        assert abs(adv.std() - 1.0) < 1e-9

    def test_single_reward(self):
        with pytest.raises(RolloutError):
            group_advantages([1.0])


class TestTrustIndicator:
    def test_clipped_high(self, surrogate_cfg):
        assert trust_indicator(1.5, 1.0, surrogate_cfg) == 0

    def test_weight_moves_threshold(self, surrogate_cfg):
        # w * r = 1.2 stays below 1.24
        assert trust_indicator(1.5, 1.0, surrogate_cfg, w=0.8) == 1

    def test_zero_advantage(self, surrogate_cfg):
        assert trust_indicator(5.0, 0.0, surrogate_cfg) == 1
        assert trust_indicator(0.01, 0.0, surrogate_cfg) == 1

    def test_clipped_low(self, surrogate_cfg):
        assert trust_indicator(0.5, -1.0, surrogate_cfg) == 0
        assert trust_indicator(0.5, 1.0, surrogate_cfg) == 1

    def test_vectorised_agrees(self, surrogate_cfg, rng):
        ratio = rng.uniform(0.3, 2.0, size=200)
        adv = rng.normal(size=200)
        w = rng.uniform(0.5, 1.5, size=200)
        vec = trust_indicators(ratio, adv, surrogate_cfg, w)
        for i in range(200):
            assert vec[i] == trust_indicator(ratio[i], adv[i], surrogate_cfg, w[i])


class TestSurrogate:
    def test_identity_ratio(self, no_kl_cfg):
        value, grad = token_objective(1.0, 1.0, no_kl_cfg)
        assert value == 1.0
        assert grad == 1.0

    def test_clipped_high_branch(self, no_kl_cfg):
        value, grad = token_objective(1.5, 1.0, no_kl_cfg)
        assert value == pytest.approx(1.24, abs=1e-12)
        assert grad == 0.0

    def test_clipped_low_branch(self, no_kl_cfg):
        value, grad = token_objective(0.5, -1.0, no_kl_cfg)
        assert value == pytest.approx(-0.8, abs=1e-12)
        assert grad == 0.0

    def test_negative_advantage_unclipped_above(self, no_kl_cfg):
        value, grad = token_objective(1.5, -1.0, no_kl_cfg)
        assert value == pytest.approx(-1.5, abs=1e-12)
        assert grad == pytest.approx(-1.5, abs=1e-12)


class TestKL:
    @pytest.mark.parametrize("x, expected", [
        (1.0, 0.0),
        (math.e, math.e - 2.0),
        (0.5, 0.5 - math.log(0.5) - 1.0),
    ])
    def test_values(self, x, expected):
        g = GraphBuilder()
        leaf = g.leaf('x', ())
        value, _ = value_and_grad(g.build(kl_from_ratio(g, leaf)), {'x': x}, ['x'])
        assert value == pytest.approx(expected, abs=1e-12)

    def test_from_log_probs(self):
        g = GraphBuilder()
        logp = g.leaf('logp', (1,))
        root = g.sum(grpo_kl(g, logp, np.array([1.0])))
        value, _ = value_and_grad(g.build(root), {'logp': np.zeros(1)}, ['logp'])
        assert value == pytest.approx(math.e - 2.0, abs=1e-12)


class TestGamma:
    def test_reduces_to_ratio_times_advantage(self, no_kl_cfg):
        term = make_term(0.3, 0.25, 0.2, 0.7, no_kl_cfg)
        assert term.indicator == 1
        assert gamma_coefficient(term, no_kl_cfg) == pytest.approx(term.ratio * 0.7)

    def test_vanishes(self, surrogate_cfg):
        term = make_term(0.4, 0.4, 0.4, 0.0, surrogate_cfg)
        assert term.gamma == 0.0

    def test_clipped_token_keeps_kl_part(self, surrogate_cfg):
        term = TokenTerm(pi=0.25, pi_old=1 / 6, pi_ref=0.5, advantage=1.0, ratio=1.5,
                         indicator=0, gamma=0.0)
        assert gamma_coefficient(term, surrogate_cfg) == pytest.approx(0.001, abs=1e-15)


class TestGroupLoss:
    def test_on_policy_symmetric_group_is_zero(self, tiny_params, no_kl_cfg):
        batch = make_batch(tiny_params, [0], [(1, 4), (3, 4)], [1.0, -1.0])
        loss, _ = group_loss(tiny_params, batch, no_kl_cfg)
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_degenerate_group_has_zero_gradient(self, tiny_params, no_kl_cfg):
        batch = make_batch(tiny_params, [0, 2], [(1, 4), (3,), (1, 1, 4)], [1.0, 1.0, 1.0],
                           old_shift=0.1)
        _, grads = group_loss(tiny_params, batch, no_kl_cfg)
        assert all(np.count_nonzero(gr) == 0 for gr in grads.values())

    def test_matches_scalar_recomputation(self, tiny_params, surrogate_cfg):
        batch = make_batch(tiny_params, [0], [(1, 3, 4), (2,)], [1.0, -1.0],
                           old_shift=-0.15, ref_shift=0.3)
        loss, _ = group_loss(tiny_params, batch, surrogate_cfg)

        # every token sees r = e^0.15 and pi_ref / pi = e^0.3
        r, x = math.exp(0.15), math.exp(0.3)
        kl = x - math.log(x) - 1.0
        objectives = []
        for out, a in zip(batch.outputs, [1.0, -1.0]):
            objectives += [min(r * a, min(max(r, 0.8), 1.24) * a) - 0.001 * kl] * len(out)
        expected = -sum(objectives) / len(objectives)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_average_of_groups(self):
        g = GraphBuilder()
        a, b = g.leaf('a', ()), g.leaf('b', ())
        value, _ = value_and_grad(g.build(average_losses(g, [a, b])), {'a': 1.0, 'b': 3.0}, [])
        assert value == 2.0

    def test_no_groups(self):
        with pytest.raises(RolloutError):
            average_losses(GraphBuilder(), [])

    def test_mismatched_batch(self):
        with pytest.raises(RolloutError):
            GroupBatch(Prompt('brackets', 1, (0,), (1,)), [(1,), (4,)], [1.0],
                       [np.zeros(1)] * 2, [np.zeros(1)] * 2)


class TestRecords:
    def test_token_terms_follow_concatenation(self, tiny_params, surrogate_cfg):
        batch = make_batch(tiny_params, [0], [(1, 4), (3,)], [1.0, -1.0])
        logp = np.concatenate([sequence_log_probs(tiny_params, [0], o) for o in batch.outputs])
        terms = token_terms(batch, logp, surrogate_cfg)
        assert len(terms) == 3
        assert [t.advantage for t in terms] == [1.0, 1.0, -1.0]
        assert all(t.ratio == 1.0 and t.indicator == 1 and t.weight == 1.0 for t in terms)

    def test_batch_record_layout(self, tiny_params, surrogate_cfg):
        batch = make_batch(tiny_params, [0], [(1, 4), (3,)], [1.0, -1.0])
        logp = np.concatenate(batch.logp_old)
        record = batch_record(batch, token_terms(batch, logp, surrogate_cfg), surrogate_cfg,
                              step=4)
        assert record['step'] == 4
        assert record['advantages'] == [1.0, -1.0]
        assert [len(r['tokens']) for r in record['rollouts']] == [2, 1]
        assert record['rollouts'][0]['tokens'][1]['token'] == 4
        assert set(record['rollouts'][1]['tokens'][0]) >= {'pi', 'weight', 'gamma', 'token'}


def test_surrogate_config_validation():
    with pytest.raises(ConfigError):
        SurrogateConfig(eps_low=1.5)
