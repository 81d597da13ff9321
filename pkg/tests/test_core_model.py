import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_batch, random_model, swap
from micro_pref.core_model import (
    DimensionError,
    EmptyBatchError,
    MixtureModel,
    PreferenceExample,
    RewardHead,
    RouterParams,
    bt_probability,
    head_probabilities,
    head_reward,
    loss_terms,
    mixture_probabilities,
    mixture_probability,
    mle_loss,
    reg_loss,
    router_forward,
    total_loss,
)


def _fixed_router(k, ctx_dim, bias=None):
    r = RouterParams.zeros(k, ctx_dim, hidden=4)
    if bias is not None:
        r.output_bias = np.asarray(bias, dtype=float)
    return r


class TestHeadReward:
    def test_zero_map(self):
        assert head_reward(RewardHead(np.zeros(5), 0.0), np.arange(5.0)) == 0.0

    def test_hand_dot_product(self):
        assert head_reward(RewardHead(np.array([1.0, 2.0]), 0.5), np.array([1.0, 1.0])) == 3.5

    def test_matches_scalar_loop(self):
        w = np.random.default_rng(7).standard_normal(16)
        x = np.random.default_rng(8).standard_normal(16)
        expected = 0.0
        for wi, xi in zip(w.tolist(), x.tolist()):
            expected += wi * xi
        assert abs(head_reward(RewardHead(w, 0.0), x) - expected) < 1e-12

    def test_dimension_error_names_dims(self):
        with pytest.raises(DimensionError) as err:
            head_reward(RewardHead(np.zeros(3), 0.0), np.zeros(4))
        assert err.value.expected == 3 and err.value.actual == 4
        assert "3" in str(err.value) and "4" in str(err.value)


class TestBTProbability:
    def test_zero(self):
        assert bt_probability(0.0) == 0.5

    def test_saturation(self):
        p = bt_probability(40.0)
        assert 1.0 - 1e-15 < p < 1.0
        q = bt_probability(-40.0)
        assert 0.0 < q < 1e-15

    def test_high_precision_value(self):
        getcontext().prec = 40
        oracle = Decimal(1) / (Decimal(1) + Decimal(-1).exp())
        assert abs(bt_probability(1.0) - float(oracle)) < 1e-15
        assert str(bt_probability(1.0)).startswith("0.7310585786")

    def test_extreme_inputs_finite(self):
        d = np.array([-1e4, -700.0, -40.0, 0.0, 40.0, 700.0, 1e4])
        p = bt_probability(d)
        assert np.all(np.isfinite(p)) and np.all(p > 0) and np.all(p < 1)

    @given(st.floats(-500, 500))
    def test_complement(self, d):
        assert abs(bt_probability(d) + bt_probability(-d) - 1.0) < 1e-15


class TestRouter:
    def test_zero_parameters_uniform(self):
        for k in (1, 2, 5):
            f = router_forward(RouterParams.zeros(k, 3), np.random.default_rng(k).standard_normal(3))
            np.testing.assert_allclose(f, np.full(k, 1.0 / k), atol=0, rtol=0)

    @pytest.mark.parametrize("k", [2, 3, 4, 5])
    def test_dominant_bias(self, k):
        f = router_forward(_fixed_router(k, 3, [10.0] + [0.0] * (k - 1)), np.ones(3))
        assert f[0] > 0.999
        # closed form e^10 / (e^10 + K - 1)
        assert abs(f[0] - math.exp(10) / (math.exp(10) + k - 1)) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0.1, 30.0))
    def test_simplex_invariant(self, k, d, seed, scale):
        m = random_model(k, 2, d, seed, router_scale=scale)
        x = np.random.default_rng(seed).standard_normal((32, d)) * scale
        f = router_forward(m.router, x)
        assert np.all(f >= 0)
        np.testing.assert_allclose(f.sum(axis=1), 1.0, atol=1e-9)

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            router_forward(RouterParams.zeros(2, 3), np.zeros(4))


class TestMixtureProbability:
    def test_k1_bit_equal_single_bt(self):
        m = random_model(1, 6, 4, 3)
        b = random_batch(50, 6, 4, 3)
        for ex in b.examples():
            single = bt_probability(head_reward(m.heads[0], ex.winner) - head_reward(m.heads[0], ex.loser))
            assert mixture_probability(m, ex) == single

    def test_symmetric_average(self):
        # heads +w and -w on a pair with margin ln 9 give 0.9 and 0.1
        w = np.array([math.log(9.0)])
        m = MixtureModel(np.stack([w, -w]), np.zeros(2), _fixed_router(2, 1))
        ex = PreferenceExample([0.3], [1.0], [0.0])
        np.testing.assert_allclose(head_probabilities(m, [ex])[0], [0.9, 0.1], atol=1e-15)
        assert abs(mixture_probability(m, ex) - 0.5) < 1e-15

    def test_brute_force_k3(self):
        m = random_model(3, 5, 4, 11)
        ex = random_batch(1, 5, 4, 11).examples()[0]
        # independent path: scalar loops for router and heads
        r = m.router
        hidden = [math.tanh(sum(r.hidden_weights[j, i] * ex.prompt_ctx[i] for i in range(4)) + r.hidden_bias[j]) for j in range(r.hidden_size)]
        logits = [sum(r.output_weights[k, j] * hidden[j] for j in range(r.hidden_size)) + r.output_bias[k] for k in range(3)]
        z = sum(math.exp(v) for v in logits)
        expected = 0.0
        for k in range(3):
            delta = sum(m.head_weights[k, i] * (ex.winner[i] - ex.loser[i]) for i in range(5))
            expected += math.exp(logits[k]) / z / (1.0 + math.exp(-delta))
        assert abs(mixture_probability(m, ex) - expected) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_complement_symmetry(self, k, seed):
        m = random_model(k, 4, 3, seed, head_std=3.0)
        b = random_batch(20, 4, 3, seed)
        np.testing.assert_allclose(head_probabilities(m, swap(b)), 1.0 - head_probabilities(m, b), atol=1e-12)
        np.testing.assert_allclose(mixture_probabilities(m, swap(b)), 1.0 - mixture_probabilities(m, b), atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**31 - 1), st.floats(-1e3, 1e3))
    def test_reward_shift_invariance(self, k, seed, c):
        m = random_model(k, 4, 3, seed)
        b = random_batch(20, 4, 3, seed)
        shifted = m.copy()
        shifted.head_bias[seed % k] += c
        np.testing.assert_allclose(head_probabilities(shifted, b), head_probabilities(m, b), atol=1e-12)
        assert abs(total_loss(shifted, b, 0.5) - total_loss(m, b, 0.5)) < 1e-12

    def test_stability_large_margins(self):
        m = random_model(3, 2, 2, 0)
        m.head_weights = np.array([[1e4, 0.0], [-1e4, 0.0], [0.0, 1.0]])
        b = random_batch(40, 2, 2, 0)
        b.winner[:, 0], b.loser[:, 0] = 0.5, -0.5
        p = mixture_probabilities(m, b)
        assert np.all(np.isfinite(p)) and np.all((p > 0) & (p < 1))
        for a in (0.0, 0.5):
            assert math.isfinite(total_loss(m, b, a))
        assert math.isfinite(mle_loss(m, swap(b)))

    def test_pair_dim_mismatch(self):
        m = random_model(2, 4, 3, 0)
        with pytest.raises(DimensionError):
            mixture_probability(m, PreferenceExample(np.zeros(3), np.zeros(5), np.zeros(5)))

    def test_winner_loser_dim_mismatch(self):
        with pytest.raises(DimensionError):
            PreferenceExample(np.zeros(3), np.zeros(5), np.zeros(4))


class TestLosses:
    def test_constant_half(self):
        m = MixtureModel(np.zeros((2, 3)), np.zeros(2), _fixed_router(2, 2))
        b = random_batch(10, 3, 2, 0)
        assert abs(mle_loss(m, b) - math.log(2.0)) < 1e-15

    def test_single_example(self):
        m = MixtureModel(np.array([[math.log(9.0)]]), np.zeros(1), _fixed_router(1, 1))
        ex = PreferenceExample([0.0], [1.0], [0.0])
        assert abs(mle_loss(m, [ex]) - (-math.log(0.9))) < 1e-14
        assert abs(mle_loss(m, [ex]) - 0.10536051565782628) < 1e-14

    def test_duplicated_batch(self):
        m = random_model(3, 4, 3, 5)
        exs = random_batch(17, 4, 3, 5).examples()
        assert abs(mle_loss(m, exs + exs) - mle_loss(m, exs)) < 1e-14
        assert abs(reg_loss(m, exs + exs) - reg_loss(m, exs)) < 1e-14

    def test_empty_batch(self):
        m = random_model(2, 4, 3, 0)
        for fn in (mle_loss, reg_loss):
            with pytest.raises(EmptyBatchError):
                fn(m, [])

    def test_uniform_entropy(self):
        m = MixtureModel(np.zeros((4, 2)), np.zeros(4), _fixed_router(4, 3))
        assert abs(reg_loss(m, random_batch(5, 2, 3, 0)) - (-math.log(4.0))) < 1e-12
        assert abs(reg_loss(m, random_batch(5, 2, 3, 0)) + 1.3863) < 1e-4

    def test_one_hot_entropy(self):
        m = MixtureModel(np.zeros((3, 2)), np.zeros(3), _fixed_router(3, 3, [60.0, 0.0, 0.0]))
        assert abs(reg_loss(m, random_batch(5, 2, 3, 0))) < 1e-20

    def test_clamped_exact_zero(self):
        m = MixtureModel(np.zeros((2, 2)), np.zeros(2), _fixed_router(2, 3, [1000.0, 0.0]))
        assert reg_loss(m, random_batch(5, 2, 3, 0)) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0.1, 20.0))
    def test_entropy_bound(self, k, seed, scale):
        m = random_model(k, 3, 3, seed, router_scale=scale)
        r = reg_loss(m, random_batch(30, 3, 3, seed))
        assert -math.log(k) - 1e-9 <= r <= 0.0

    def test_total_alpha_zero(self):
        m = random_model(3, 4, 3, 1)
        b = random_batch(20, 4, 3, 1)
        assert total_loss(m, b, 0.0) == mle_loss(m, b)

    def test_total_is_affine(self):
        m = random_model(3, 4, 3, 2)
        b = random_batch(20, 4, 3, 2)
        assert abs(total_loss(m, b, 0.5) - (mle_loss(m, b) + 0.5 * reg_loss(m, b))) < 1e-14
        for a1, a2 in [(0.0, 0.5), (0.5, 10.0), (0.1, 3.3)]:
            lhs = total_loss(m, b, a2) - total_loss(m, b, a1)
            assert abs(lhs - (a2 - a1) * reg_loss(m, b)) < 1e-12

    def test_negative_alpha(self):
        m = random_model(2, 4, 3, 0)
        with pytest.raises(ValueError):
            total_loss(m, random_batch(3, 4, 3, 0), -0.1)

    def test_loss_terms_single_pass(self):
        m = random_model(3, 4, 3, 9)
        b = random_batch(25, 4, 3, 9)
        mle, reg, ent = loss_terms(m, b)
        assert abs(mle - mle_loss(m, b)) < 1e-14
        assert abs(reg - reg_loss(m, b)) < 1e-14
        assert ent == -reg


class TestModelTypes:
    def test_heads_match_k(self):
        with pytest.raises(ValueError):
            MixtureModel(np.zeros((3, 2)), np.zeros(3), RouterParams.zeros(2, 2))

    def test_permuted_preserves_predictions(self):
        m = random_model(4, 3, 2, 4)
        b = random_batch(30, 3, 2, 4)
        p = m.permuted([2, 0, 3, 1])
        np.testing.assert_allclose(mixture_probabilities(p, b), mixture_probabilities(m, b), atol=1e-15)

    def test_from_heads_roundtrip(self):
        m = random_model(3, 3, 2, 0)
        again = MixtureModel.from_heads(m.heads, m.router)
        np.testing.assert_array_equal(again.head_weights, m.head_weights)
        np.testing.assert_array_equal(again.head_bias, m.head_bias)
