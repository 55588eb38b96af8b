"""Central finite-difference gradient checks, evaluated in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, default_dtype


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    checked: int
    failures: int

    @property
    def ok(self) -> bool:
        return self.failures == 0


def agrees(analytic: float, numeric: float, rtol: float = 1e-3, atol: float = 1e-5) -> bool:
    diff = abs(analytic - numeric)
    return diff <= atol or diff <= rtol * max(abs(analytic), abs(numeric))


def check_gradients(
    fn: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    *,
    h: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare the tape gradient of ``fn`` against central differences.

    ``fn`` receives fresh float64 tensors built from ``arrays`` and must
    return a scalar. With ``max_coords`` only that many randomly chosen
    coordinates per input are differenced.
    """
    rng = rng or np.random.default_rng(0)
    base = [np.array(a, dtype=np.float64) for a in arrays]
    with default_dtype(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in base]
        backward(fn(leaves))
        analytic = [np.zeros_like(a) if t.grad is None else np.array(t.grad, dtype=np.float64)
                    for a, t in zip(base, leaves)]

        def evaluate(i, flat_idx, delta):
            probe = [a.copy() for a in base]
            probe[i].reshape(-1)[flat_idx] += delta
            return fn([Tensor(a) for a in probe]).item()

        max_rel = max_abs = 0.0
        checked = failures = 0
        for i, a in enumerate(base):
            n = a.size
            coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            for idx in coords:
                num = (evaluate(i, idx, h) - evaluate(i, idx, -h)) / (2 * h)
                ana = analytic[i].reshape(-1)[idx]
                diff = abs(ana - num)
                max_abs = max(max_abs, diff)
                if diff > atol:
                    max_rel = max(max_rel, diff / max(abs(ana), abs(num)))
                checked += 1
                failures += not agrees(ana, num, rtol, atol)
    return GradCheckResult(max_rel, max_abs, checked, failures)
