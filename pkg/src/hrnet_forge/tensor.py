"""Dense tensor value type and precision-mode plumbing.

Feature maps are 4-D ``(batch, channels, height, width)`` arrays; parameters
may have other ranks (conv weights are 4-D, batch-norm scales 1-D).  Two
precision modes exist: ``verify`` runs float64 with finiteness checks after
every kernel, ``fast`` runs float32 with no checks.
"""
from __future__ import annotations

import numpy as np

VERIFY = "verify"
FAST = "fast"

_DTYPES = {VERIFY: np.float64, FAST: np.float32}


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(_DTYPES[precision])
    except KeyError:
        raise ConfigError(f"unknown precision {precision!r} (expected verify|fast)")


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class NumericalError(ArithmeticError):
    """Raised when a non-finite value is produced in verify mode."""


class ConfigError(ValueError):
    """Raised for invalid configuration values (field name in the message)."""


class Tensor:
    """A named dense array with an optional gradient buffer.

    ``grad`` is lazily allocated and always matches ``data``'s shape.  ``kind``
    tags what the tensor is used for ("conv_weight", "bn_gamma", "bias", ...)
    so the optimizer can apply weight decay selectively.
    """

    __slots__ = ("data", "grad", "name", "kind")

    def __init__(self, data: np.ndarray, name: str = "", kind: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.name = name
        self.kind = kind

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {self.data.shape} for {self.name!r}"
            )
        self.ensure_grad()
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor({self.name!r}, shape={tuple(self.shape)}, kind={self.kind!r})"


def assert_finite(arr: np.ndarray, where: str) -> None:
    """Checked-error finiteness guard used after kernels in verify mode."""
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.isfinite(arr).sum())
        raise NumericalError(f"{bad} non-finite value(s) after {where}")


def check_feature_map(arr: np.ndarray, where: str = "input") -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise ShapeError(f"{where} must be 4-D (n, c, h, w), got shape {arr.shape}")
    return arr
