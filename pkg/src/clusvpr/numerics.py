"""Dense-array helpers and the finite-difference gradient oracle.

Every learnable module in the package is differentiated by torch autograd.
Analytic gradients are validated against :func:`finite_diff_grad`, which is
plain numpy and never touches autograd.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float64


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax of a 1-D vector."""
    v = np.asarray(v, dtype=np.float64)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input contains non-finite values")
    z = v / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``indices`` restricts the estimate to a subset of flat coordinates; the
    remaining entries of the result are NaN.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if indices is None else list(indices)
    grad = np.full(flat.size, np.nan) if indices is not None else np.zeros(flat.size)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


@dataclass(frozen=True)
class GradCheckReport:
    parameter: str
    max_relative_error: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.parameter}: max rel err {self.max_relative_error:.3e} "
            f"over {self.checked} coords (tol {self.tolerance:g})"
        )


def check_parameter_gradients(
    loss_fn: Callable[[], torch.Tensor],
    named_params: Sequence[tuple[str, torch.Tensor]],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradCheckReport]:
    """Compare autograd gradients of ``loss_fn`` with central differences.

    ``loss_fn`` must be deterministic and close over the given parameters.
    With ``max_coords`` set, tensors larger than that are checked on a random
    subset of coordinates drawn from ``rng``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = [p for _, p in named_params]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    reports = []
    for (name, p), g in zip(named_params, grads):
        analytic = np.zeros(p.shape) if g is None else g.detach().cpu().numpy()
        size = p.numel()
        if max_coords is not None and size > max_coords:
            idx = np.sort(rng.choice(size, size=max_coords, replace=False))
        else:
            idx = np.arange(size)
        original = p.detach().clone()

        def f(values, p=p):
            with torch.no_grad():
                p.copy_(torch.as_tensor(values, dtype=p.dtype))
                return float(loss_fn())

        try:
            numeric = finite_diff_grad(f, original.cpu().numpy(), h=h, indices=idx)
        finally:
            with torch.no_grad():
                p.copy_(original)
        err = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx])
        reports.append(GradCheckReport(name, float(err.max(initial=0.0)), tolerance, len(idx)))
    return reports
