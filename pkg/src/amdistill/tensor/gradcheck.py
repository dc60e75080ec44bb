"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import Tensor, no_grad


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    indices: np.ndarray
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
               tol: float = 1e-6, n_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare backward gradients of scalar ``fn`` at ``x`` with central differences.

    The relative error is measured against the larger of the two gradients'
    max-magnitudes, so coordinates whose true gradient is ~0 don't dominate.
    ``n_coords`` limits the check to a random subset of coordinates.

    Raises:
        NonDeterministicError: two forward passes at the same point disagree.
    """
    base = np.array(x.data, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    loss = fn(probe)
    with no_grad():
        again = fn(Tensor(base.copy()))
    if not np.array_equal(np.asarray(loss.data), np.asarray(again.data)):
        raise NonDeterministicError("fn returned different values for identical inputs")

    if loss.requires_grad:
        loss.backward()
    analytic_full = probe.grad if probe.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=n_coords, replace=False))

    numeric = np.empty(idx.size, dtype=np.float64)
    with no_grad():
        for k, i in enumerate(idx):
            plus = flat.copy()
            plus[i] += step
            minus = flat.copy()
            minus[i] -= step
            fp = float(fn(Tensor(plus.reshape(base.shape))).data)
            fm = float(fn(Tensor(minus.reshape(base.shape))).data)
            numeric[k] = (fp - fm) / (2 * step)
    analytic = analytic_full.reshape(-1)[idx].astype(np.float64)

    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    err = np.abs(analytic - numeric).max(initial=0.0)
    rel = 0.0 if scale == 0.0 else err / scale
    return GradCheckReport(analytic, numeric, idx, float(rel), tol)
