"""Orthogonal bases shared by all projected layers."""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass

import numpy as np


class BasisKind(str, enum.Enum):
    DCT3 = "dct3"
    IDENTITY = "identity"


@dataclass(frozen=True, eq=False)
class OrthoBasis:
    """A dense orthogonal ``order x order`` matrix stored in float64.

    Columns are the projection directions. ``entries`` is read-only.
    """

    order: int
    entries: np.ndarray
    kind: BasisKind

    def __post_init__(self):
        self.entries.flags.writeable = False

    def columns(self, indices) -> np.ndarray:
        return self.entries[:, np.asarray(indices, dtype=np.int64)]

    def orthogonality_residual(self) -> float:
        """max |QᵀQ - I| over all entries."""
        Q = self.entries
        return float(np.abs(Q.T @ Q - np.eye(self.order)).max())


def _check_order(n) -> int:
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ValueError(f"basis order must be a positive integer, got {n!r}")
    return int(n)


def build_dct3(n: int) -> OrthoBasis:
    """Build the orthonormal DCT-3 matrix of order ``n``.

    Entry ``(i, j)`` is ``sqrt(2/n) * cos(i (2j+1) pi / (2n))`` with row 0
    divided by ``sqrt(2)``. The integer products ``i (2j+1)`` are formed
    exactly before the single division by ``2n``. The DCT-2 matrix is the
    transpose and is never stored.

    >>> build_dct3(1).entries
    array([[1.]])
    """
    n = _check_order(n)
    idx = np.arange(n, dtype=np.int64)
    # rows are the frequency index i, columns the sample index j
    products = idx[:, None] * (2 * idx[None, :] + 1)
    Q = np.sqrt(2.0 / n) * np.cos(products * (np.pi / (2 * n)))
    Q[0, :] /= np.sqrt(2.0)
    return OrthoBasis(order=n, entries=Q, kind=BasisKind.DCT3)


def build_identity(n: int) -> OrthoBasis:
    n = _check_order(n)
    return OrthoBasis(order=n, entries=np.eye(n), kind=BasisKind.IDENTITY)


_BUILDERS = {BasisKind.DCT3: build_dct3, BasisKind.IDENTITY: build_identity}
_registry: dict[tuple[BasisKind, int], OrthoBasis] = {}
_lock = threading.Lock()


def get_basis(n: int, kind: BasisKind | str = BasisKind.DCT3) -> OrthoBasis:
    """Return the cached basis of the given order, building it on first use."""
    kind = BasisKind(kind)
    key = (kind, _check_order(n))
    with _lock:
        basis = _registry.get(key)
        if basis is None:
            basis = _BUILDERS[kind](key[1])
            _registry[key] = basis
    return basis


def clear_cache() -> None:
    with _lock:
        _registry.clear()
