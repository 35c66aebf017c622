"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, param_index: int, name: str | None = None):
        label = f" ({name})" if name else ""
        super().__init__(f"non-finite gradient in parameter {param_index}{label}; step rejected")
        self.param_index = param_index


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = [np.zeros(p.data.size) for p in params]
        state.v = [np.zeros(p.data.size) for p in params]
        return state


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray | None] | None = None) -> None:
    """One in-place Adam update.

    ``grads`` defaults to each parameter's accumulated ``grad``; a missing
    gradient counts as zero.  Every gradient is checked before any parameter
    moves, so a rejected step leaves state and parameters untouched.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"Adam state tracks {len(state.m)} parameters, got {len(params)}")
    flat = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].size != p.data.size:
            raise ValueError(f"Adam state size mismatch at parameter {i}: {state.m[i].size} vs {p.data.size}")
        g = np.zeros(p.data.size) if g is None else np.asarray(g, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(i, p.name)
        flat.append(g)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, flat, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).reshape(p.data.shape)


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step(self.state, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.state.t)])}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self.state.m[i][:] = arrays[f"m.{i}"].reshape(-1)
            self.state.v[i][:] = arrays[f"v.{i}"].reshape(-1)
