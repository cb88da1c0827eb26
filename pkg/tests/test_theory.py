import math

import numpy as np
import pytest

from tokenreg.config import PolicyConfig, SharpnessConfig, SurrogateConfig
from tokenreg.errors import DeskScaleError, ShapeError
from tokenreg.grpo import make_term
from tokenreg.models import BoundConstants, TokenTerm
from tokenreg.policy import init_params, numerical_layer_jacobians
from tokenreg.theory import (
    bound_constants,
    check_token_bound,
    matrix_chain_sandwich,
    score_norm_bounds,
    sharpness_surrogate,
    token_gradient_bound,
    token_gradient_norm,
)


class TestMatrixChain:
    def test_identity_chain(self):
        x = np.array([3.0, -4.0, 1.0])
        lower, measured, upper = matrix_chain_sandwich(x, [np.eye(3)] * 3)
        norm = np.linalg.norm(x)
        assert lower == pytest.approx(norm) and measured == pytest.approx(norm)
        assert upper == pytest.approx(norm)

    def test_diagonal(self):
        lower, measured, upper = matrix_chain_sandwich(np.array([1.0, 0.0]),
                                                       [np.diag([2.0, 0.5])])
        assert (lower, measured, upper) == pytest.approx((0.5, 2.0, 2.0))

    def test_random_chains_hold(self, rng):
        for _ in range(300):
            dims = rng.integers(1, 9, size=rng.integers(2, 6))
            mats = [rng.normal(size=(dims[i], dims[i + 1])) for i in range(len(dims) - 1)]
            x = rng.normal(size=dims[0])
            lower, measured, upper = matrix_chain_sandwich(x, mats)
            assert lower - 1e-9 <= measured <= upper + 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matrix_chain_sandwich(np.ones(3), [np.ones((2, 2))])

    def test_desk_scale(self):
        with pytest.raises(DeskScaleError):
            matrix_chain_sandwich(np.ones(2), [np.eye(2)] * 5)
        with pytest.raises(DeskScaleError):
            matrix_chain_sandwich(np.ones(9), [np.eye(9)])


class TestScoreNorm:
    def test_one_hot(self):
        assert score_norm_bounds(np.array([0.0, 1.0, 0.0]), 1) == (0.0, 0.0, 0.0)

    def test_binary_attains_upper(self):
        lower, measured, upper = score_norm_bounds(np.array([0.5, 0.5]), 0)
        assert measured == pytest.approx(math.sqrt(0.5), abs=1e-15)
        assert measured == pytest.approx(upper, abs=1e-15)
        assert lower == 0.5

    def test_random_distributions(self, rng):
        for _ in range(2000):
            p = rng.dirichlet(np.full(rng.integers(2, 65), 0.3))
            lower, measured, upper = score_norm_bounds(p, int(rng.integers(p.size)))
            assert lower - 1e-12 <= measured <= upper + 1e-12

    def test_invalid(self):
        with pytest.raises(ValueError):
            score_norm_bounds(np.array([0.7, 0.7]), 0)
        with pytest.raises(ValueError):
            score_norm_bounds(np.array([0.5, 0.5]), 2)


class TestBoundConstants:
    def test_orthonormal_head(self, rng):
        params = init_params(5, PolicyConfig(2, 5, 1, 2, 0.3), seed=1)
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        params.unembedding[:] = q
        c = bound_constants(params, [0, 1])
        assert c.a_w == pytest.approx(1.0, abs=1e-12)
        assert c.b_w == pytest.approx(1.0, abs=1e-12)

    def test_zero_preactivation_layer(self, tiny_params):
        params = tiny_params.copy()
        params.embedding[:] = 0.0
        c = bound_constants(params, [0])
        s = np.linalg.svd(params.weights[1], compute_uv=False)
        assert c.a_j[0] == pytest.approx(s[-1], abs=1e-12)
        assert c.b_j[0] == pytest.approx(s[0], abs=1e-12)

    def test_match_library_svd(self, tiny_params):
        c = bound_constants(tiny_params, [1, 2, 3])
        jac = numerical_layer_jacobians(tiny_params, [1, 2, 3])
        for l, g in enumerate(jac.G):
            s = np.linalg.svd(g.T, compute_uv=False)
            assert c.a_g[l] == pytest.approx(s[-1], abs=1e-9)
            assert c.b_g[l] == pytest.approx(s[0], abs=1e-9)
        assert c.b_w == pytest.approx(np.linalg.norm(jac.W, 2), abs=1e-9)

    def test_head_gain(self, tiny_params):
        c = bound_constants(tiny_params, [0], include_head=False)
        assert c.head_gain is None
        assert bound_constants(tiny_params, [0]).head_gain > 0.0

    def test_invalid_pair(self):
        with pytest.raises(ValueError):
            BoundConstants(a_w=2.0, b_w=1.0, a_g=[], b_g=[], a_j=[], b_j=[], layers=0)


class TestTokenBound:
    @pytest.mark.parametrize('include_head', [True, False])
    def test_sandwich_holds(self, tiny_params, rng, include_head):
        cfg = SurrogateConfig()
        for _ in range(20):
            context = [int(t) for t in rng.integers(0, 5, size=rng.integers(0, 4))]
            token = int(rng.integers(0, 5))
            w = float(rng.uniform(1.0, 1.4))
            term = make_term(0.3, 0.3 / rng.uniform(0.9, 1.1), 0.3, rng.normal(), cfg, w)
            report = check_token_bound(tiny_params, context, token, term, w, include_head)
            assert report.passed, (report.lower, report.measured, report.upper)
            assert report.lower_slack >= -1e-9
            assert report.upper_slack >= -1e-9

    def test_zero_gamma_collapses(self, tiny_params):
        term = TokenTerm(0.2, 0.2, 0.2, 0.0, 1.0, 1, 0.0)
        report = check_token_bound(tiny_params, [0], 1, term, 1.2)
        assert report.lower == report.measured == report.upper == 0.0

    def test_bound_arithmetic(self):
        c = BoundConstants(a_w=0.5, b_w=2.0, a_g=[1.0], b_g=[3.0], a_j=[], b_j=[], layers=1)
        term = TokenTerm(pi=0.75, pi_old=0.75, pi_ref=0.75, advantage=1.0, ratio=1.0,
                         indicator=1, gamma=2.0)
        report = token_gradient_bound(term, 1.2, c, 1.0)
        factor = 1.2 * 0.25 * 2.0
        assert report.lower == pytest.approx(factor * 0.5)
        assert report.upper == pytest.approx(math.sqrt(2.0) * factor * 6.0)

    def test_norm_scales_with_weight(self, tiny_params):
        a = token_gradient_norm(tiny_params, [0, 1], 2, gamma=0.5, w=1.0)
        b = token_gradient_norm(tiny_params, [0, 1], 2, gamma=0.5, w=1.4)
        assert b == pytest.approx(1.4 * a, rel=1e-14)


def test_sharpness_surrogate():
    assert sharpness_surrogate(0.3, 2.0, SharpnessConfig(rho=0.05)) == pytest.approx(0.4)
    assert sharpness_surrogate(0.3, 2.0, SharpnessConfig(rho=0.0)) == 0.3
    with pytest.raises(ValueError):
        sharpness_surrogate(0.3, -1.0, SharpnessConfig())
