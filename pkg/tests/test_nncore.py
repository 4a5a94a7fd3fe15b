import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from hqcae import nncore
from hqcae.models import QuantumLayer
from hqcae.nncore import AdamState, Dense, LossConfig, Sequential, TrainConfig
from hqcae.qsim import QuantumLayerSpec


class TestLosses:
    def test_mse(self):
        x = np.array([[1.0, 2.0]])
        assert nncore.mse_loss(x, x) == 0.0
        assert nncore.mse_loss(np.array([[1.0, 0.0]]), np.zeros((1, 2))) == 0.5
        assert nncore.mse_loss(np.array([[1.0, 1.0], [0.0, 0.0]]), np.zeros((2, 2))) == 0.5

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            nncore.mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_kl(self):
        assert nncore.kl_loss(np.zeros(3), np.zeros(3)) == 0.0
        assert nncore.kl_loss(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)
        assert nncore.kl_loss(np.array([0.0]), np.array([math.log(2)])) == pytest.approx(
            0.5 * (2 - math.log(2) - 1), abs=1e-12
        )
        assert nncore.kl_loss(np.array([0.0]), np.array([math.log(2)])) == pytest.approx(0.15343, abs=1e-5)

    def test_kl_nonfinite(self):
        with pytest.raises(ValueError):
            nncore.kl_loss(np.array([np.inf]), np.array([0.0]))

    @given(
        arrays(float, 5, elements=st.floats(-5, 5)),
        arrays(float, 5, elements=st.floats(-5, 5)),
    )
    def test_kl_nonnegative(self, mu, logvar):
        assert nncore.kl_loss(mu, logvar) >= -1e-12

    def test_latent_reg(self):
        c = np.array([0.5, -1.0])
        assert nncore.latent_reg_loss(c, c) == 0.0
        assert nncore.latent_reg_loss(np.array([1.0, 1.0]), np.zeros(2)) == 2.0
        assert nncore.latent_reg_loss(np.array([3.0]), np.array([1.0])) == 4.0
        _, gc = nncore.latent_reg_grads(np.array([3.0]), np.array([1.0]))
        np.testing.assert_allclose(gc, [-4.0])

    def test_latent_reg_dim_mismatch(self):
        with pytest.raises(ValueError):
            nncore.latent_reg_loss(np.zeros(3), np.zeros(2))

    @pytest.mark.parametrize(
        "alpha, beta, expected", [(0, 0, 0.5), (1, 1, 1.0), (0.1, 0.5, 0.63)]
    )
    def test_total(self, alpha, beta, expected):
        assert nncore.total_loss(0.5, 0.2, 0.3, LossConfig(alpha, beta)) == pytest.approx(expected)

    def test_total_rejects_negative(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=-1)

    def test_model_kinds(self):
        assert [LossConfig(a, b).kind for a, b in [(0, 0), (0, 1), (1, 0), (1, 1)]] == [
            "ae", "vae", "ae+reg", "vae+reg"
        ]

    def test_bce(self):
        assert nncore.bce_loss(np.array([0.5, 0.5]), np.array([0, 1])) == pytest.approx(math.log(2))
        assert nncore.bce_loss(np.array([0.9]), np.array([0])) == pytest.approx(-math.log(0.1))
        assert nncore.bce_loss(np.array([1.0, 0.0]), np.array([1, 0])) < 1e-6


class TestReparameterize:
    def test_zero_eps(self):
        mu = np.array([0.3, -2.0])
        z, _ = nncore.reparameterize(mu, np.array([1.0, 2.0]), eps=np.zeros(2))
        np.testing.assert_array_equal(z, mu)

    def test_unit_variance(self):
        z, _ = nncore.reparameterize(np.array([2.0]), np.array([0.0]), eps=np.array([1.0]))
        np.testing.assert_allclose(z, [3.0])

    def test_seeded(self):
        a, _ = nncore.reparameterize(np.zeros(4), np.zeros(4), np.random.default_rng(3))
        b, _ = nncore.reparameterize(np.zeros(4), np.zeros(4), np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_clamped(self):
        z, _ = nncore.reparameterize(np.array([1.0]), np.array([-1e6]), eps=np.array([5.0]))
        assert z[0] == pytest.approx(1.0 + math.exp(-5.0) * 5.0)
        z, _ = nncore.reparameterize(np.array([0.0]), np.array([1e6]), eps=np.array([1.0]))
        assert np.isfinite(z).all()


class TestAdam:
    def test_zero_gradient(self):
        p = np.array([1.0, 2.0])
        state = AdamState()
        state.m = [np.array([1.0, 1.0])]
        state.v = [np.array([1.0, 1.0])]
        nncore.adam_step([p], [np.zeros(2)], state)
        # bias correction uses t=1 while moments decayed from their prior values
        assert state.t == 1
        np.testing.assert_allclose(state.m[0], [0.9, 0.9])
        np.testing.assert_allclose(state.v[0], [0.999, 0.999])

    def test_zero_gradient_fresh(self):
        p = np.array([1.0, 2.0])
        nncore.adam_step([p], [np.zeros(2)], AdamState())
        np.testing.assert_array_equal(p, [1.0, 2.0])

    def test_first_and_second_step(self):
        p = np.array([0.0])
        state = AdamState(lr=1e-3)
        nncore.adam_step([p], [np.array([1.0])], state)
        assert p[0] == pytest.approx(-1e-3, rel=1e-6)
        before = p[0]
        nncore.adam_step([p], [np.array([1.0])], state)
        assert p[0] - before == pytest.approx(-1e-3, abs=1e-6)

    @given(arrays(float, 6, elements=st.floats(-1e3, 1e3)))
    def test_first_step_bounded(self, g):
        p = np.zeros(6)
        nncore.adam_step([p], [g], AdamState())
        assert np.all(np.abs(p) <= 1e-3 * (1 + 1e-6))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nncore.adam_step([np.zeros(2)], [np.zeros(3)], AdamState())


def _stack_loss(stack, x, target):
    return float(np.sum((stack.forward(x) - target) ** 2))


def _check_stack(stack, x, target):
    for layer in stack:
        for g in layer.grads.values():
            g[...] = 0
    out = stack.forward(x)
    g_x = stack.backward(2 * (out - target))
    f = lambda: _stack_loss(stack, x, target)
    for layer in stack:
        for key, p in layer.params.items():
            assert oracles.grad_close(layer.grads[key], oracles.central_diff(f, p)), (layer, key)
    assert oracles.grad_close(g_x, oracles.central_diff(f, x))


@settings(max_examples=40, deadline=None)
@given(
    widths=st.lists(st.integers(1, 16), min_size=2, max_size=4),
    acts=st.lists(st.sampled_from(["tanh", "sigmoid", "identity", "relu"]), min_size=3, max_size=3),
    seed=st.integers(0, 10_000),
)
def test_dense_backprop_matches_finite_differences(widths, acts, seed):
    rng = np.random.default_rng(seed)
    layers = [Dense(a, b, acts[i % 3], rng) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
    for layer in layers:
        layer.params["bias"][:] = rng.normal(size=layer.out_dim)
    x = rng.normal(size=(3, widths[0]))
    # keep relu pre-activations away from the kink so central differences are valid
    stack = Sequential(layers)
    a = x
    for layer in layers:
        pre = a @ layer.params["weights"].T + layer.params["bias"]
        if layer.activation == "relu" and np.min(np.abs(pre)) < 1e-3:
            return
        a = layer.forward(a)
    _check_stack(stack, x, rng.normal(size=(3, widths[-1])))


@pytest.mark.parametrize("embedding", ["amplitude", "angle"])
@pytest.mark.parametrize("measurement", ["expval", "probs"])
def test_hybrid_stack_chain_rule(embedding, measurement):
    rng = np.random.default_rng(17)
    spec = QuantumLayerSpec(2, 2, embedding, measurement)
    stack = Sequential(
        [Dense(5, spec.input_dim, "tanh", rng), QuantumLayer(spec, rng), Dense(spec.output_dim, 3, "identity", rng)]
    )
    _check_stack(stack, rng.normal(size=(4, 5)), rng.normal(size=(4, 3)))


class _Quadratic:
    """Linear model y = x @ w; used to exercise the training loop."""

    def __init__(self, dim):
        self.w = np.ones(dim)
        self.g = np.zeros(dim)

    def parameters(self):
        return [self.w]

    def gradients(self):
        return [self.g]

    def zero_grad(self):
        self.g[...] = 0

    def loss_and_backward(self, x, y, rng):
        r = x @ self.w
        self.g += 2 * x.T @ r / len(x)
        return float(np.mean(r**2))

    def evaluate_loss(self, x, y):
        return float(np.mean((x @ self.w) ** 2))


class TestTrainLoop:
    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            nncore.train_loop(_Quadratic(2), np.zeros((0, 2)), TrainConfig())

    def test_patience_zero_stops_on_first_stall(self):
        model = _Quadratic(2)
        model.w[:] = 0  # already optimal: epoch 2 cannot improve
        res = nncore.train_loop(model, np.ones((20, 2)), TrainConfig(patience=0, max_epochs=50))
        assert res.epochs_run == 2
        assert res.best_epoch == 1

    def test_restores_best(self):
        model = _Quadratic(3)
        rng = np.random.default_rng(0)
        res = nncore.train_loop(model, rng.normal(size=(200, 3)), TrainConfig(max_epochs=30, batch_size=16))
        best = min(h["val_loss"] for h in res.history)
        assert res.best_val_loss == best
        assert [h["epoch"] for h in res.history] == list(range(1, res.epochs_run + 1))

    def test_divergence(self):
        class Bad(_Quadratic):
            def loss_and_backward(self, x, y, rng):
                return float("nan")

        with pytest.raises(nncore.TrainingDivergedError):
            nncore.train_loop(Bad(2), np.ones((10, 2)), TrainConfig())

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(100, 3))
        a, b = _Quadratic(3), _Quadratic(3)
        ha = nncore.train_loop(a, x, TrainConfig(max_epochs=5, batch_size=8, seed=4)).history
        hb = nncore.train_loop(b, x, TrainConfig(max_epochs=5, batch_size=8, seed=4)).history
        assert ha == hb
        np.testing.assert_array_equal(a.w, b.w)
