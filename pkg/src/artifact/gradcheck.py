"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    def fraction_below(self, tol: float) -> float:
        return float(np.mean(self.rel_error < tol)) if self.rel_error.size else 1.0


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _central(loss_fn, flat: np.ndarray, j: int, h: float) -> float:
    orig = flat[j]
    flat[j] = orig + h
    up = loss_fn().item()
    flat[j] = orig - h
    down = loss_fn().item()
    flat[j] = orig
    return (up - down) / (2 * h)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    samples: Sequence[tuple[int, int]] | None = None,
    h: float | Sequence[float] = 1e-5,
) -> GradCheckResult:
    """Compare d loss / d param against central differences.

    ``samples`` lists ``(param_index, flat_index)`` pairs; all entries of all
    params are checked when omitted.  ``h`` may be a decreasing ladder of
    steps: each entry then uses the mean of the two adjacent steps whose
    estimates agree best, which avoids both roundoff at tiny steps and
    activation kinks inside wide steps.  The choice never looks at the
    analytic gradient.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss, keep_intermediate=False)
    if samples is None:
        samples = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    analytic = np.array([
        0.0 if params[i].grad is None else params[i].grad.reshape(-1)[j] for i, j in samples
    ])
    steps = [float(h)] if np.isscalar(h) else [float(v) for v in h]
    numeric = np.empty(len(samples))
    with no_grad():
        for k, (i, j) in enumerate(samples):
            flat = params[i].data.reshape(-1)
            est = [_central(loss_fn, flat, j, step) for step in steps]
            if len(est) == 1:
                numeric[k] = est[0]
            else:
                gaps = [abs(a - b) for a, b in zip(est, est[1:])]
                m = int(np.argmin(gaps))
                numeric[k] = 0.5 * (est[m] + est[m + 1])
    return GradCheckResult(analytic, numeric, relative_error(analytic, numeric))
