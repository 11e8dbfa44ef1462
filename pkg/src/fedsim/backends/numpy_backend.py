"""Pure-numpy training kernels (fallback backend).

Semantics are shared with the compiled backend in ``_core.pyx``:

* parameters live in one flat float64 vector, laid out per layer as the
  weight matrix W (fan_in x fan_out, row-major) followed by the bias;
* hidden activations are relu, optionally multiplied by a pre-scaled
  dropout mask (entries 0 or 1/(1-p)) supplied by the caller;
* the head is a single sigmoid unit trained with mean binary
  cross-entropy, computed from logits for numerical stability.

Dropout masks are generated outside the kernels so both backends consume
identical masks; backends may differ only in floating-point rounding.
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def unpack_layers(values: np.ndarray, dims) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (no copies) of each layer's (W, b) inside the flat vector."""
    layers = []
    off = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = values[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = values[off : off + fan_out]
        off += fan_out
        layers.append((w, b))
    if off != values.shape[0]:
        raise ValueError(f"parameter vector length {values.shape[0]} != layout size {off}")
    return layers


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(values: np.ndarray, dims, x: np.ndarray, masks=None) -> np.ndarray:
    """Class-1 probabilities for a batch; ``masks=None`` means eval mode."""
    layers = unpack_layers(values, dims)
    h = x
    for i, (w, b) in enumerate(layers[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        if masks is not None:
            h = h * masks[i]
    w, b = layers[-1]
    logits = h @ w + b
    return _sigmoid(logits[:, 0])


def loss_and_grad(values: np.ndarray, dims, x: np.ndarray, y: np.ndarray, masks=None):
    """Mean BCE loss and its exact gradient (flat, same layout as values)."""
    layers = unpack_layers(values, dims)
    n_batch = x.shape[0]

    # forward, keeping pre-activations and post-dropout activations
    hs = [x]
    zs = []
    h = x
    for i, (w, b) in enumerate(layers[:-1]):
        z = h @ w + b
        zs.append(z)
        h = np.maximum(z, 0.0)
        if masks is not None:
            h = h * masks[i]
        hs.append(h)
    w_out, b_out = layers[-1]
    logits = (h @ w_out + b_out)[:, 0]

    # stable BCE from logits: mean(max(z,0) - z*y + log(1+exp(-|z|)))
    loss = float(
        np.mean(np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits))))
    )

    grad = np.zeros_like(values)
    g_layers = unpack_layers(grad, dims)

    dz = (_sigmoid(logits) - y) / n_batch  # (b,)
    gw, gb = g_layers[-1]
    gw[:, 0] = hs[-1].T @ dz
    gb[0] = dz.sum()
    dh = np.outer(dz, w_out[:, 0])

    for i in range(len(layers) - 2, -1, -1):
        d = dh
        if masks is not None:
            d = d * masks[i]
        d = d * (zs[i] > 0.0)
        gw, gb = g_layers[i]
        gw[...] = hs[i].T @ d
        gb[...] = d.sum(axis=0)
        if i > 0:
            dh = d @ layers[i][0].T

    return loss, grad


def sign_align_count(a: np.ndarray, b: np.ndarray) -> int:
    """Number of positions where sign(a) == sign(b); zero is its own class."""
    return int(np.count_nonzero(np.sign(a) == np.sign(b)))
