"""Model-module tests: parameter layout, forward/backward oracles, SGD, schedule."""

import numpy as np
import pytest

from fedsim.model import (
    Batch,
    ModelSpec,
    ParamVector,
    TrainingDivergedError,
    dropout_masks,
    forward,
    init_params,
    loss_and_grad,
    lr_schedule,
    sgd_step,
)


def naive_forward(values, dims, x, masks=None):
    """Independent reference: plain-Python loops, no numpy matmul."""
    n, _ = x.shape
    h = [list(row) for row in x.tolist()]
    off = 0
    n_layers = len(dims) - 1
    for layer in range(n_layers):
        fan_in, fan_out = dims[layer], dims[layer + 1]
        w = [
            [float(values[off + i * fan_out + j]) for j in range(fan_out)]
            for i in range(fan_in)
        ]
        off += fan_in * fan_out
        b = [float(values[off + j]) for j in range(fan_out)]
        off += fan_out
        nxt = []
        for r in range(n):
            row = []
            for j in range(fan_out):
                acc = b[j]
                for i in range(fan_in):
                    acc += h[r][i] * w[i][j]
                if layer < n_layers - 1:
                    acc = max(acc, 0.0)
                    if masks is not None:
                        acc *= masks[layer][r][j]
                row.append(acc)
            nxt.append(row)
        h = nxt
    import math

    return np.array([1.0 / (1.0 + math.exp(-row[0])) for row in h])


def small_spec(input_dim=4, hidden=(5, 3), dropout=0.0):
    return ModelSpec(input_dim=input_dim, hidden_dims=hidden, dropout_rate=dropout)


def _relu_margin_ok(spec, params, x, margin):
    """True when no hidden pre-activation sits within ``margin`` of zero."""
    from fedsim.backends.numpy_backend import unpack_layers

    layers = unpack_layers(params.values, spec.dims)
    h = x
    for w, b in layers[:-1]:
        z = h @ w + b
        if np.min(np.abs(z)) < margin:
            return False
        h = np.maximum(z, 0.0)
    return True


class TestSpecAndInit:
    def test_param_count_tiny(self):
        spec = ModelSpec(input_dim=4, hidden_dims=(2,), dropout_rate=0.0)
        assert spec.param_count == (4 + 1) * 2 + (2 + 1) * 1 == 13
        assert len(init_params(spec, seed=0)) == 13

    def test_param_count_law_random_specs(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            depth = int(rng.integers(1, 4))
            hidden = tuple(int(rng.integers(1, 9)) for _ in range(depth))
            d = int(rng.integers(1, 12))
            spec = ModelSpec(input_dim=d, hidden_dims=hidden, dropout_rate=0.0)
            dims = (d, *hidden, 1)
            expected = sum((fi + 1) * fo for fi, fo in zip(dims[:-1], dims[1:]))
            assert spec.param_count == expected
            assert len(init_params(spec, seed=3).values) == expected

    def test_init_deterministic(self):
        spec = small_spec()
        a = init_params(spec, seed=42)
        b = init_params(spec, seed=42)
        assert np.array_equal(a.values, b.values)
        c = init_params(spec, seed=43)
        assert not np.array_equal(a.values, c.values)

    def test_biases_zero_and_weights_bounded(self):
        spec = ModelSpec(input_dim=6, hidden_dims=(4, 3), dropout_rate=0.0)
        params = init_params(spec, seed=5)
        off = 0
        for fan_in, fan_out in zip(spec.dims[:-1], spec.dims[1:]):
            w = params.values[off : off + fan_in * fan_out]
            off += fan_in * fan_out
            b = params.values[off : off + fan_out]
            off += fan_out
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            assert np.all(np.abs(w) <= limit)
            assert np.all(b == 0.0)

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec(input_dim=0, hidden_dims=(4,))
        with pytest.raises(ValueError):
            ModelSpec(input_dim=3, hidden_dims=())
        with pytest.raises(ValueError):
            ModelSpec(input_dim=3, hidden_dims=(4,), dropout_rate=1.0)


class TestForward:
    def test_all_zero_params_give_half(self):
        spec = small_spec()
        params = ParamVector(np.zeros(spec.param_count), spec.digest())
        batch = Batch(np.random.default_rng(0).normal(size=(7, 4)), np.zeros(7))
        probs = forward(spec, params, batch, mode="eval")
        assert np.allclose(probs, 0.5)

    def test_identity_single_unit(self):
        # weights arranged so the logit equals the input
        spec = ModelSpec(input_dim=1, hidden_dims=(1,), dropout_rate=0.0)
        values = np.zeros(spec.param_count)
        values[0] = 1.0  # hidden weight
        values[2] = 1.0  # output weight
        params = ParamVector(values, spec.digest())
        batch = Batch(np.array([[0.0], [2.0]]), np.array([0.0, 1.0]))
        probs = forward(spec, params, batch, mode="eval")
        assert probs[0] == pytest.approx(0.5, abs=1e-15)
        assert probs[1] == pytest.approx(1.0 / (1.0 + np.exp(-2.0)), abs=1e-12)

    def test_matches_naive_reference_eval(self):
        rng = np.random.default_rng(11)
        for _ in range(8):
            hidden = tuple(int(rng.integers(1, 7)) for _ in range(int(rng.integers(1, 4))))
            spec = ModelSpec(input_dim=int(rng.integers(1, 6)), hidden_dims=hidden, dropout_rate=0.0)
            params = init_params(spec, seed=int(rng.integers(1 << 30)))
            x = rng.normal(size=(int(rng.integers(1, 9)), spec.input_dim))
            batch = Batch(x, np.zeros(x.shape[0]))
            got = forward(spec, params, batch, mode="eval")
            want = naive_forward(params.values, spec.dims, x)
            assert np.max(np.abs(got - want)) < 1e-12

    def test_matches_naive_reference_train_masks(self):
        rng = np.random.default_rng(12)
        spec = ModelSpec(input_dim=5, hidden_dims=(6, 4), dropout_rate=0.3)
        params = init_params(spec, seed=99)
        x = rng.normal(size=(6, 5))
        batch = Batch(x, np.zeros(6))
        got = forward(spec, params, batch, mode="train", dropout_seed=314)
        masks = dropout_masks(spec, 6, 314)
        want = naive_forward(params.values, spec.dims, x, [m.tolist() for m in masks])
        assert np.max(np.abs(got - want)) < 1e-12

    def test_dimension_mismatch_rejected(self):
        spec = small_spec()
        params = init_params(spec, seed=1)
        bad = Batch(np.zeros((3, 5)), np.zeros(3))
        with pytest.raises(ValueError):
            forward(spec, params, bad)

    def test_train_eval_dropout_consistency(self):
        # inverted dropout is unbiased: averaging a hidden unit's
        # post-dropout activation over many masks recovers the eval value.
        # Checked on a single-hidden-layer model where the relation is exact.
        spec = ModelSpec(input_dim=4, hidden_dims=(6,), dropout_rate=0.3)
        params = init_params(spec, seed=21)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 4))
        from fedsim.backends import get_backend
        from fedsim.backends.numpy_backend import unpack_layers

        w, b = unpack_layers(params.values, spec.dims)[0]
        eval_act = np.maximum(x @ w + b, 0.0)[0]

        n_seeds = 10_000
        acc = np.zeros(6)
        acc2 = np.zeros(6)
        for s in range(n_seeds):
            mask = dropout_masks(spec, 1, s)[0][0]
            act = eval_act * mask
            acc += act
            acc2 += act * act
        mean = acc / n_seeds
        var = acc2 / n_seeds - mean**2
        se = np.sqrt(np.maximum(var, 0.0) / n_seeds)
        diff = np.abs(mean - eval_act)
        assert np.all(diff <= 3.0 * se + 1e-12)
        del get_backend

    def test_forward_deterministic(self):
        spec = ModelSpec(input_dim=3, hidden_dims=(4,), dropout_rate=0.3)
        params = init_params(spec, seed=8)
        batch = Batch(np.random.default_rng(1).normal(size=(5, 3)), np.zeros(5))
        a = forward(spec, params, batch, mode="train", dropout_seed=77)
        b = forward(spec, params, batch, mode="train", dropout_seed=77)
        assert np.array_equal(a, b)


class TestLossAndGrad:
    def test_perfect_predictions_near_zero_loss(self):
        # logit +/-40 saturates the sigmoid to within 1e-17 of the label
        spec = ModelSpec(input_dim=1, hidden_dims=(1,), dropout_rate=0.0)
        values = np.zeros(spec.param_count)
        values[0] = 1.0
        values[2] = 40.0
        params = ParamVector(values, spec.digest())
        batch = Batch(np.array([[5.0]]), np.array([1.0]))
        loss, _ = loss_and_grad(spec, params, batch)
        assert loss < 1e-8

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(23)
        h = 1e-5
        worst = 0.0
        checked = 0
        while checked < 12:
            hidden = tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 3))))
            spec = ModelSpec(input_dim=int(rng.integers(1, 4)), hidden_dims=hidden, dropout_rate=0.0)
            if spec.param_count > 50:
                continue
            params = init_params(spec, seed=int(rng.integers(1 << 30)))
            x = rng.normal(size=(4, spec.input_dim))
            y = rng.integers(0, 2, size=4).astype(float)
            batch = Batch(x, y)
            if not _relu_margin_ok(spec, params, x, margin=1e-3):
                continue  # pre-activation too close to the relu kink for h=1e-5
            checked += 1
            _, grad = loss_and_grad(spec, params, batch)
            num = np.empty_like(grad.values)
            for j in range(len(params)):
                vp = params.values.copy()
                vp[j] += h
                lp, _ = loss_and_grad(spec, ParamVector(vp, spec.digest()), batch)
                vm = params.values.copy()
                vm[j] -= h
                lm, _ = loss_and_grad(spec, ParamVector(vm, spec.digest()), batch)
                num[j] = (lp - lm) / (2 * h)
            scale = np.maximum(np.abs(num), 1e-3)
            rel = np.max(np.abs(grad.values - num) / scale)
            worst = max(worst, rel)
        assert worst < 1e-5

    def test_gradient_with_dropout_matches_finite_differences(self):
        # same dropout mask on both sides of the difference quotient
        spec = ModelSpec(input_dim=3, hidden_dims=(4,), dropout_rate=0.3)
        params = init_params(spec, seed=17)
        rng = np.random.default_rng(5)
        batch = Batch(rng.normal(size=(5, 3)), rng.integers(0, 2, 5).astype(float))
        _, grad = loss_and_grad(spec, params, batch, dropout_seed=123)
        h = 1e-5
        num = np.empty_like(grad.values)
        for j in range(len(params)):
            vp = params.values.copy()
            vp[j] += h
            lp, _ = loss_and_grad(spec, ParamVector(vp, spec.digest()), batch, dropout_seed=123)
            vm = params.values.copy()
            vm[j] -= h
            lm, _ = loss_and_grad(spec, ParamVector(vm, spec.digest()), batch, dropout_seed=123)
            num[j] = (lp - lm) / (2 * h)
        scale = np.maximum(np.abs(num), 1e-3)
        assert np.max(np.abs(grad.values - num) / scale) < 1e-5

    def test_identical_rows_equal_single_row_grad(self):
        spec = small_spec()
        params = init_params(spec, seed=2)
        row = np.random.default_rng(9).normal(size=(1, 4))
        one = Batch(row, np.array([1.0]))
        many = Batch(np.repeat(row, 6, axis=0), np.ones(6))
        _, g1 = loss_and_grad(spec, params, one)
        _, g6 = loss_and_grad(spec, params, many)
        assert np.allclose(g1.values, g6.values, atol=1e-14)

    def test_nonfinite_loss_rejected(self):
        spec = small_spec()
        huge = ParamVector(np.full(small_spec().param_count, 1e200), spec.digest())
        batch = Batch(np.ones((2, 4)) * 1e200, np.array([0.0, 1.0]))
        with pytest.raises((TrainingDivergedError, ValueError)), np.errstate(all="ignore"):
            # Batch validation itself rejects non-finite features; force
            # divergence through parameters instead.
            loss_and_grad(spec, huge, Batch(np.ones((2, 4)) * 1e8, np.array([0.0, 1.0])))


class TestSgdAndSchedule:
    def test_lr_zero_no_change(self):
        spec = small_spec()
        p = init_params(spec, seed=3)
        g = ParamVector(np.ones(len(p)), spec.digest())
        assert np.array_equal(sgd_step(p, g, 0.0).values, p.values)

    def test_arithmetic(self):
        p = ParamVector(np.array([1.0, 2.0]), "x")
        g = ParamVector(np.array([1.0, -1.0]), "x")
        out = sgd_step(p, g, 0.5)
        assert np.array_equal(out.values, np.array([0.5, 2.5]))

    def test_two_steps_equal_double_lr(self):
        p = ParamVector(np.array([0.3, -0.7, 1.1]), "x")
        g = ParamVector(np.array([0.5, 0.25, -1.0]), "x")
        twice = sgd_step(sgd_step(p, g, 0.1), g, 0.1)
        once = sgd_step(p, g, 0.2)
        assert np.allclose(twice.values, once.values, atol=1e-16)

    def test_lr_schedule(self):
        assert lr_schedule(0, 0.1, 0.5) == 0.1
        assert lr_schedule(5, 0.1, 1.0) == 0.1
        assert lr_schedule(2, 0.1, 0.5) == pytest.approx(0.025)
        with pytest.raises(ValueError):
            lr_schedule(-1, 0.1, 0.5)
        with pytest.raises(ValueError):
            lr_schedule(1, 0.1, 0.0)
