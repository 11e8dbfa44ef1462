"""Backend parity: the compiled kernels must agree with the numpy fallback."""

import numpy as np
import pytest

from fedsim.backends import available_backends, backend_name, numpy_backend
from fedsim.model import ModelSpec, dropout_masks, init_params

compiled = pytest.importorskip(
    "fedsim.backends._core", reason="compiled backend not built"
)


def random_case(rng, with_masks):
    depth = int(rng.integers(1, 4))
    hidden = tuple(int(rng.integers(1, 40)) for _ in range(depth))
    spec = ModelSpec(
        input_dim=int(rng.integers(1, 30)),
        hidden_dims=hidden,
        dropout_rate=0.3 if with_masks else 0.0,
    )
    params = init_params(spec, seed=int(rng.integers(1 << 30)))
    n = int(rng.integers(1, 70))
    x = np.ascontiguousarray(rng.normal(size=(n, spec.input_dim)))
    y = rng.integers(0, 2, n).astype(np.float64)
    masks = dropout_masks(spec, n, int(rng.integers(1 << 30))) if with_masks else None
    return spec, params, x, y, masks


@pytest.mark.parametrize("with_masks", [False, True])
def test_forward_parity(with_masks):
    rng = np.random.default_rng(61)
    for _ in range(20):
        spec, params, x, y, masks = random_case(rng, with_masks)
        a = compiled.forward(params.values, spec.dims, x, masks)
        b = numpy_backend.forward(params.values, spec.dims, x, masks)
        assert np.max(np.abs(a - b)) < 1e-12


@pytest.mark.parametrize("with_masks", [False, True])
def test_loss_and_grad_parity(with_masks):
    rng = np.random.default_rng(62)
    for _ in range(20):
        spec, params, x, y, masks = random_case(rng, with_masks)
        loss_a, grad_a = compiled.loss_and_grad(params.values, spec.dims, x, y, masks)
        loss_b, grad_b = numpy_backend.loss_and_grad(params.values, spec.dims, x, y, masks)
        assert loss_a == pytest.approx(loss_b, rel=1e-12, abs=1e-14)
        scale = np.maximum(np.abs(grad_b), 1.0)
        assert np.max(np.abs(grad_a - grad_b) / scale) < 1e-12


def test_sign_align_parity():
    rng = np.random.default_rng(63)
    for _ in range(30):
        n = int(rng.integers(1, 500))
        a = np.round(rng.normal(size=n), 1)
        b = np.round(rng.normal(size=n), 1)
        assert compiled.sign_align_count(a, b) == numpy_backend.sign_align_count(a, b)


def test_active_backend_is_listed():
    assert backend_name() in available_backends()
