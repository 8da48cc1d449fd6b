"""Adam optimizer over named parameter collections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import ModelParameters, NetworkError
from .tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParameters, grads: dict, state: AdamState, lr: float) -> ModelParameters:
    """One Adam update; returns fresh parameters and mutates ``state`` in place."""
    for name, grad in grads.items():
        if name not in params.tensors:
            raise NetworkError(f"gradient for unknown parameter {name}")
        if np.shape(grad) != params.tensors[name].shape:
            raise NetworkError(
                f"gradient shape {np.shape(grad)} does not match parameter {name} "
                f"shape {params.tensors[name].shape}"
            )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    updated = {}
    for name, tensor in params.tensors.items():
        if name not in grads:
            updated[name] = tensor.copy()
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        updated[name] = Tensor(tensor.data - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return ModelParameters(updated, params.dropout_rates)
