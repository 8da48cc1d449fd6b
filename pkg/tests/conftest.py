"""Shared fixtures and oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from setdefense.network import (MODE_DET, Network, conv, dense, dropout,
                                flatten, maxpool, relu, softmax)

# ---------------------------------------------------------------------------
# small-network templates; together they cover every layer kind


def template_dense(class_count=3):
    return [flatten(), dense(5), relu(), dense(class_count), softmax()], (1, 3, 3)


def template_conv(class_count=3):
    return [conv(2, 2), relu(), flatten(), dense(class_count), softmax()], (1, 5, 5)


def template_full(class_count=3):
    return ([conv(2, 3), relu(), maxpool(2), flatten(), dense(6), relu(),
             dropout(0.3), dense(class_count), softmax()], (1, 7, 7))


def template_two_channel(class_count=3):
    return ([conv(3, 2), maxpool(2), conv(2, 2), relu(), flatten(),
             dropout(0.25), dense(class_count), softmax()], (2, 6, 6))


TEMPLATES = (template_dense, template_conv, template_full, template_two_channel)


def make_network(index: int, rng: np.random.Generator):
    """Deterministic small network + params + input, cycling over templates."""
    specs, input_shape = TEMPLATES[index % len(TEMPLATES)](class_count=3)
    network = Network(specs, input_shape)
    params = network.init_params(rng)
    x = rng.uniform(0.0, 1.0, size=input_shape)
    return network, params, x


# ---------------------------------------------------------------------------
# finite-difference oracles (central differences, step 1e-4)

FD_STEP = 1e-4


def fd_input_gradient(network, params, x, label, mode=MODE_DET, seed=None):
    """Central finite differences of the loss w.r.t. every input coordinate.

    When the network is stochastic, a fresh generator with the same seed is
    created per evaluation so every probe sees the identical dropout mask.
    """

    def loss_at(arr):
        rng = None if seed is None else np.random.default_rng(seed)
        return network.loss_and_input_gradient(params, arr, label, mode, rng).loss

    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        hi = x.copy()
        lo = x.copy()
        hi[idx] += FD_STEP
        lo[idx] -= FD_STEP
        grad[idx] = (loss_at(hi) - loss_at(lo)) / (2 * FD_STEP)
        it.iternext()
    return grad


def fd_parameter_gradient(network, params, batch, labels, name, coords,
                          mode=MODE_DET, seed=None):
    """Central finite differences for selected coordinates of one parameter."""

    def loss_at():
        rng = None if seed is None else np.random.default_rng(seed)
        loss, _ = network.parameter_gradients(params, batch, labels, mode, rng)
        return loss

    values = {}
    tensor = params.tensors[name]
    for idx in coords:
        original = tensor.data[idx]
        tensor.data[idx] = original + FD_STEP
        up = loss_at()
        tensor.data[idx] = original - FD_STEP
        down = loss_at()
        tensor.data[idx] = original
        values[idx] = (up - down) / (2 * FD_STEP)
    return values


def relative_error(a, b, floor=1e-4):
    """Symmetric relative error, switching to absolute error below ``floor``.

    Central differences resolve a loss of order 1 only to ~1e-10 absolute at
    step 1e-4, so coordinates where both gradients are smaller than ``floor``
    are compared absolutely instead of relatively.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    err = np.abs(a - b) / np.where(scale > floor, scale, 1.0)
    return float(np.max(err)) if err.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
