"""Central finite-difference gradient checking.

The checker compares analytic gradients against central differences with a
step of 1e-5 scaled by coordinate magnitude, on a seeded random sample of at
least 64 coordinates per tensor (all of them for smaller tensors).  The
reported figure is the normalized difference

    |analytic - numeric| / max(|analytic|, |numeric|, 1)

i.e. absolute error for sub-unit gradients, relative above, which guards the
denominator for near-zero gradients.  Requires double precision.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericalError


@dataclass
class GradCheckReport:
    max_error: float = 0.0
    worst: str = ""
    per_tensor: dict = field(default_factory=dict)
    coords_checked: int = 0

    def merge(self, name: str, err: float, count: int) -> None:
        self.per_tensor[name] = err
        self.coords_checked += count
        if err > self.max_error:
            self.max_error = err
            self.worst = name

    def passed(self, tol: float) -> bool:
        return self.max_error <= tol


def _sample_coords(rng: np.random.Generator, size: int, max_coords: int) -> np.ndarray:
    if size <= max_coords:
        return np.arange(size)
    return rng.choice(size, size=max_coords, replace=False)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)


def check_tensor(fn, arr: np.ndarray, analytic_grad: np.ndarray, *,
                 rng: np.random.Generator, coords: int = 64) -> tuple[float, int]:
    """Finite-difference check of d fn / d arr against ``analytic_grad``.

    ``fn`` is a scalar-valued closure re-evaluating the computation from the
    (possibly modified) contents of ``arr``; it is called twice per coordinate.
    Returns (max normalized error, number of coordinates probed).
    """
    if arr.dtype != np.float64:
        raise NumericalError("grad_check requires float64 (verify precision)")
    flat = arr.reshape(-1)
    gflat = analytic_grad.reshape(-1)
    idx = _sample_coords(rng, flat.size, coords)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        h = 1e-5 * max(1.0, abs(orig))
        flat[i] = orig + h
        f_plus = fn()
        flat[i] = orig - h
        f_minus = fn()
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalError("non-finite loss during finite differencing")
        numeric = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, relative_error(float(gflat[i]), numeric))
    return worst, len(idx)


def check_many(fn, tensors: dict, grads: dict, *, seed: int = 0,
               coords: int = 64) -> GradCheckReport:
    """Run :func:`check_tensor` over a dict of named arrays.

    ``tensors`` maps name -> ndarray (modified in place during probing),
    ``grads`` maps name -> analytic gradient of the same shape.
    """
    report = GradCheckReport()
    rng = np.random.default_rng(seed)
    for name in tensors:
        err, n = check_tensor(fn, tensors[name], grads[name], rng=rng, coords=coords)
        report.merge(name, err, n)
    return report
