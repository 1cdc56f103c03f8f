"""Adam with a step-based learning-rate schedule.

The effective rate is base_lr * decay_factor ** floor(t / decay_period)
with t counting completed steps from 0, so the rate halves for the first
time on the 25,001st step under the defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 0.001
    decay_factor: float = 0.5
    decay_period: int = 25_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_lr(self) -> float:
        if self.decay_period <= 0:
            return self.lr
        return self.lr * self.decay_factor ** (self.t // self.decay_period)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns fresh parameter tensors."""
    for name in params:
        if grads.get(name) is None:
            raise ContractError(f"adam_step: no gradient for parameter {name!r}")
    lr = state.effective_lr()
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    new_params: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / bc1
        vhat = v / bc2
        step = lr * mhat / (np.sqrt(vhat) + state.eps)
        new_params[name] = Tensor((p.data - step).astype(p.dtype), requires_grad=True, dtype=p.dtype)
    return new_params, state


def adam_state_arrays(state: AdamState) -> dict[str, np.ndarray]:
    """Flatten an AdamState for PTT1 storage under reserved names."""
    out: dict[str, np.ndarray] = {}
    for name, arr in state.m.items():
        out[f"adam.m.{name}"] = arr
    for name, arr in state.v.items():
        out[f"adam.v.{name}"] = arr
    out["adam.t"] = np.array([state.t], dtype=np.float32)
    return out


def adam_state_from_arrays(arrays: dict[str, np.ndarray], **kwargs) -> AdamState:
    state = AdamState(**kwargs)
    for name, arr in arrays.items():
        if name.startswith("adam.m."):
            state.m[name[len("adam.m.") :]] = arr.copy()
        elif name.startswith("adam.v."):
            state.v[name[len("adam.v.") :]] = arr.copy()
        elif name == "adam.t":
            state.t = int(arr[0])
    return state
