import math

import numpy as np
import pytest

from conftest import random_batch, random_model
from micro_pref import stage1
from micro_pref.core_model import (
    MixtureModel,
    PreferenceBatch,
    RouterParams,
    bt_probability,
    head_deltas,
    mle_loss,
    reg_loss,
    router_forward,
    total_loss,
)
from micro_pref.population import make_population, sample_corpus
from micro_pref.stage1 import (
    Adam,
    NonFiniteGradientError,
    Stage1Config,
    TrainingDivergedError,
    compute_gradients,
    grad_check,
    init_model,
    model_from_vector,
    model_vector,
    train_stage1,
    warmup_lr,
)


def _central_differences(fn, model, step=1e-5, coords=None):
    theta = model_vector(model)
    coords = range(theta.size) if coords is None else coords
    out = []
    for i in coords:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        out.append((fn(model_from_vector(model, tp)) - fn(model_from_vector(model, tm))) / (2 * step))
    return np.array(out)


class TestGradients:
    def test_k1_textbook(self):
        m = random_model(1, 5, 3, 0)
        b = random_batch(1, 5, 3, 0)
        g = compute_gradients(m, b, 0.5)
        delta = float(head_deltas(m, b)[0, 0])
        expected = (bt_probability(delta) - 1.0) * (b.winner[0] - b.loser[0])
        np.testing.assert_allclose(g.head_weights[0], expected, rtol=1e-12, atol=1e-15)
        # a single-head router is constant, so it receives no gradient
        assert np.abs(g.router.output_weights).max() < 1e-15

    @pytest.mark.parametrize("k,d", [(1, 4), (3, 4), (3, 16), (5, 16)])
    def test_full_central_differences(self, k, d):
        m = random_model(k, d, 3, 100 + k + d)
        b = random_batch(12, d, 3, 100 + k + d)
        analytic = compute_gradients(m, b, 0.5).flat()
        numeric = _central_differences(lambda mm: total_loss(mm, b, 0.5), m)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        assert rel.max() < 1e-4

    def test_alpha_only_changes_router_by_entropy_gradient(self):
        m = random_model(3, 6, 4, 21)
        b = random_batch(15, 6, 4, 21)
        g0 = compute_gradients(m, b, 0.0)
        g5 = compute_gradients(m, b, 0.5)
        np.testing.assert_array_equal(g0.head_weights, g5.head_weights)
        np.testing.assert_array_equal(g0.head_bias, g5.head_bias)
        diff = g5.flat() - g0.flat()
        entropy_grad = _central_differences(lambda mm: reg_loss(mm, b), m)
        np.testing.assert_allclose(diff, 0.5 * entropy_grad, atol=1e-9)

    def test_bias_gradient_is_zero(self):
        m = random_model(4, 5, 3, 2)
        g = compute_gradients(m, random_batch(10, 5, 3, 2), 0.5)
        assert np.all(g.head_bias == 0)

    def test_bundle_losses(self):
        m = random_model(3, 5, 3, 4)
        b = random_batch(10, 5, 3, 4)
        g = compute_gradients(m, b, 0.5)
        assert abs(g.loss - total_loss(m, b, 0.5)) < 1e-13
        assert abs(g.mle_loss + 0.5 * g.reg_loss - g.loss) < 1e-15

    def test_non_finite_carries_index(self):
        m = random_model(2, 3, 2, 0)
        b = random_batch(6, 3, 2, 0)
        b.prompt_ctx[4, 0] = np.nan
        with pytest.raises(NonFiniteGradientError) as err:
            compute_gradients(m, b, 0.5)
        assert err.value.index == 4

    def test_floored_router_rejected(self):
        m = random_model(2, 3, 2, 0)
        m.router.floor = 0.1
        with pytest.raises(ValueError):
            compute_gradients(m, random_batch(3, 3, 2, 0), 0.5)

    def test_accumulation_fusion(self):
        # mean over equal microbatches equals the gradient of their union
        m = random_model(3, 5, 4, 8)
        b = random_batch(32, 5, 4, 8)
        parts = [compute_gradients(m, b.subset(range(i, i + 4)), 0.5).flat() for i in range(0, 32, 4)]
        np.testing.assert_allclose(np.mean(parts, axis=0), compute_gradients(m, b, 0.5).flat(), atol=1e-14)


class TestGradCheck:
    def test_passes_on_correct_gradient(self):
        m = random_model(3, 8, 4, 1)
        rep = grad_check(m, random_batch(10, 8, 4, 1), 0.5)
        assert rep.passed and rep.max_rel_error < 1e-4
        assert rep.checked >= len(stage1.bias_coordinates(m))
        assert not rep.discretization_warning

    def test_fault_injection(self):
        m = random_model(3, 8, 4, 1)
        b = random_batch(10, 8, 4, 1)
        g = compute_gradients(m, b, 0.5).flat()
        i = int(np.argmax(np.abs(g)))
        g[i] = -g[i]
        rep = grad_check(m, b, 0.5, analytic=g, coords=np.array([i, 0, 1]))
        assert not rep.passed
        assert [f[0] for f in rep.failing] == [i]

    def test_large_step_warns(self):
        m = random_model(3, 8, 4, 1, head_std=3.0)
        rep = grad_check(m, random_batch(10, 8, 4, 1), 0.5, step=1e-1)
        assert rep.discretization_warning

    def test_bad_step(self):
        m = random_model(2, 3, 2, 0)
        with pytest.raises(ValueError):
            grad_check(m, random_batch(3, 3, 2, 0), 0.5, step=0.0)


class TestOptimizer:
    def test_adam_first_step(self):
        opt = Adam(3)
        theta = np.array([1.0, -2.0, 0.5])
        g = np.array([0.3, -0.1, 0.0])
        out = opt.step(theta, g, 0.01)
        # bias-corrected first step is lr * g / (|g| + eps)
        np.testing.assert_allclose(out, theta - 0.01 * g / (np.abs(g) + 1e-8), atol=1e-15)

    def test_decoupled_weight_decay(self):
        opt = Adam(2, weight_decay=0.1)
        theta = np.array([1.0, 1.0])
        out = opt.step(theta, np.zeros(2), 0.5)
        np.testing.assert_allclose(out, theta * (1 - 0.05))

    def test_warmup(self):
        assert warmup_lr(1.0, 1, 4) == 0.25
        assert warmup_lr(1.0, 4, 4) == 1.0
        assert warmup_lr(1.0, 100, 4) == 1.0
        assert warmup_lr(1.0, 1, 0) == 1.0

    def test_single_step_descent(self):
        for seed in range(20):
            m = random_model(3, 6, 4, seed)
            b = random_batch(32, 6, 4, seed)
            g = compute_gradients(m, b, 0.5)
            stepped = model_from_vector(m, model_vector(m) - 1e-4 * g.flat())
            assert total_loss(stepped, b, 0.5) < g.loss


@pytest.fixture(scope="module")
def planted():
    spec = make_population(2, 8, 0.25, 3, head_scale=4.0, head_cosine=-0.8)
    return spec, sample_corpus(spec, 2000, tag="train"), sample_corpus(spec, 2000, tag="held")


class TestTraining:
    def test_config_defaults(self):
        c = Stage1Config()
        assert (c.alpha, c.learning_rate, c.batch_size, c.grad_accum_steps, c.warmup_ratio) == (0.5, 2e-3, 4, 8, 0.05)
        assert c.hidden == 128 and c.weight_decay == 0.0

    def test_config_validation(self):
        for bad in (dict(alpha=-1), dict(learning_rate=0), dict(warmup_ratio=1.5), dict(k=0)):
            with pytest.raises(ValueError):
                Stage1Config(**bad).validate()

    def test_determinism(self, planted):
        _, train, _ = planted
        cfg = Stage1Config(epochs=2, seed=4, hidden=16)
        a, ha = train_stage1(train, cfg)
        b, hb = train_stage1(train, cfg)
        np.testing.assert_array_equal(model_vector(a), model_vector(b))
        assert [r.total_loss for r in ha] == [r.total_loss for r in hb]

    def test_log_rows(self, planted):
        _, train, _ = planted
        cfg = Stage1Config(epochs=2, hidden=16, batch_size=4, grad_accum_steps=8)
        _, hist = train_stage1(train, cfg)
        assert len(hist) == 2 * math.ceil(2000 / 32)
        assert [r.step for r in hist] == list(range(1, len(hist) + 1))
        for r in hist:
            assert abs(r.total_loss - (r.mle_loss + 0.5 * r.reg_loss)) < 1e-12
            assert r.mean_router_entropy == -r.reg_loss

    def test_loss_bounded_below(self, planted):
        _, train, _ = planted
        for k, alpha in [(2, 0.5), (3, 10.0)]:
            _, hist = train_stage1(train, Stage1Config(k=k, alpha=alpha, epochs=2, hidden=16, learning_rate=1e-2))
            assert min(r.total_loss for r in hist) >= -alpha * math.log(k)

    def test_ragged_accumulation(self, planted):
        # 2000 is not a multiple of 3*7, so the last group takes the per-microbatch path
        _, train, _ = planted
        sub = train.subset(range(50))
        model, hist = train_stage1(sub, Stage1Config(batch_size=3, grad_accum_steps=7, hidden=8))
        assert len(hist) == math.ceil(math.ceil(50 / 3) / 7)
        assert np.all(np.isfinite(model_vector(model)))

    def test_corpus_smaller_than_batch(self, planted):
        _, train, _ = planted
        with pytest.raises(ValueError):
            train_stage1(train.subset([0, 1]), Stage1Config(batch_size=4))

    def test_permutation_invariance(self, planted):
        _, train, held = planted
        cfg = Stage1Config(k=3, epochs=2, seed=2, hidden=16, learning_rate=1e-2)
        init = init_model(cfg, 8, train.prompt_ctx.shape[1])
        a, _ = train_stage1(train, cfg, model=init)
        b, _ = train_stage1(train, cfg, model=init.permuted([2, 0, 1]))
        acc_a = np.sort(np.mean(head_deltas(a, held) > 0, axis=0))
        acc_b = np.sort(np.mean(head_deltas(b, held) > 0, axis=0))
        np.testing.assert_allclose(acc_a, acc_b, atol=1e-6)
        np.testing.assert_allclose(b.head_weights, a.head_weights[[2, 0, 1]], atol=1e-9)

    def test_entropy_pressure(self, planted):
        _, train, held = planted
        ent = {}
        for alpha in (0.0, 10.0):
            m, _ = train_stage1(train, Stage1Config(alpha=alpha, epochs=5, hidden=16, learning_rate=1e-2))
            f = router_forward(m.router, held.prompt_ctx)
            ent[alpha] = float(np.mean(-np.sum(f * np.log(f), axis=1)))
        assert ent[10.0] > ent[0.0]

    def test_training_reduces_loss(self, planted):
        _, train, held = planted
        cfg = Stage1Config(epochs=5, hidden=16, learning_rate=1e-2)
        init = init_model(cfg, 8, train.prompt_ctx.shape[1])
        m, _ = train_stage1(train, cfg)
        assert total_loss(m, held, 0.5) < total_loss(init, held, 0.5)
        # close a good part of the gap to the true population's own loss
        start, oracle = mle_loss(init, held), mle_loss(planted[0].true_model(), held)
        assert mle_loss(m, held) < start - 0.3 * (start - oracle)

    def test_divergence_reports_step(self, planted, monkeypatch):
        _, train, _ = planted
        real = stage1.compute_gradients
        calls = {"n": 0}

        def flaky(model, batch, alpha):
            calls["n"] += 1
            g = real(model, batch, alpha)
            if calls["n"] >= 3:
                g.mle_loss = float("nan")
            return g

        monkeypatch.setattr(stage1, "compute_gradients", flaky)
        with pytest.raises(TrainingDivergedError) as err:
            train_stage1(train, Stage1Config(hidden=8))
        assert err.value.step == 3 and math.isfinite(err.value.last_finite_loss)

    def test_k_mismatch_with_initial_model(self, planted):
        _, train, _ = planted
        m = MixtureModel(np.zeros((3, 8)), np.zeros(3), RouterParams.zeros(3, train.prompt_ctx.shape[1], 4))
        with pytest.raises(ValueError):
            train_stage1(train, Stage1Config(k=2), model=m)

    def test_input_not_mutated(self, planted):
        _, train, _ = planted
        cfg = Stage1Config(hidden=8)
        init = init_model(cfg, 8, train.prompt_ctx.shape[1])
        before = model_vector(init).copy()
        snapshot = PreferenceBatch(train.prompt_ctx.copy(), train.winner.copy(), train.loser.copy())
        train_stage1(train, cfg, model=init)
        np.testing.assert_array_equal(model_vector(init), before)
        np.testing.assert_array_equal(train.winner, snapshot.winner)
