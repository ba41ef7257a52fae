"""8-bit grouped affine quantization of the error-feedback buffer."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .projector import Selection, project_up
from .transform import OrthoBasis

DEFAULT_GROUP_SIZE = 256
META_BYTES_PER_GROUP = 16  # float64 scale + float64 zero point


class EfMode(str, enum.Enum):
    NONE = "none"
    DENSE = "dense"
    QUANT8 = "quant8"


@dataclass
class QuantBuffer:
    """Flat uint8 codes with one ``(scale, zero_point)`` pair per group.

    Element ``k`` dequantizes to ``zeros[k // group_size] + scales[...] * codes[k]``.
    """

    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    shape: tuple[int, int]
    group_size: int = DEFAULT_GROUP_SIZE

    @property
    def n_groups(self) -> int:
        return int(self.scales.size)

    @property
    def nbytes(self) -> int:
        return int(self.codes.size) + META_BYTES_PER_GROUP * self.n_groups


def quantize(x, group_size: int = DEFAULT_GROUP_SIZE) -> QuantBuffer:
    """Min-max affine quantization to 8 bits per flat group.

    Codes are rounded half away from zero; a constant group gets scale 1 and
    all-zero codes so it dequantizes exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {x.shape}")
    if group_size < 1:
        raise ValueError("group_size must be positive")
    if x.size == 0:
        raise ValueError("cannot quantize an empty matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    flat = np.ascontiguousarray(x.reshape(-1))
    codes, scales, zeros = _kernels.active().quantize_groups(flat, int(group_size))
    return QuantBuffer(codes=codes, scales=scales, zeros=zeros,
                       shape=(int(x.shape[0]), int(x.shape[1])), group_size=int(group_size))


def dequantize(q: QuantBuffer) -> np.ndarray:
    flat = _kernels.active().dequantize_groups(q.codes, q.scales, q.zeros, q.group_size)
    return flat.reshape(q.shape)


def accumulate_error(buffer, G_t, g_t, Q: OrthoBasis | None, sel: Selection | None,
                     mode: EfMode = EfMode.DENSE, up=None, group_size: int = DEFAULT_GROUP_SIZE):
    """Store the projection residual ``G_t - up(g_t)`` under ``mode``.

    ``up`` may be given directly (dense projectors); otherwise the residual
    uses ``project_up(g_t, Q, sel)``. ``buffer`` is the previous buffer and
    is only used for the shape check: ``G_t`` already contains its
    dequantized contents. Returns ``None`` when ``mode`` is ``NONE``.
    """
    mode = EfMode(mode)
    G_t = np.asarray(G_t, dtype=np.float64)
    if buffer is not None:
        shape = buffer.shape if isinstance(buffer, QuantBuffer) else np.shape(buffer)
        if tuple(shape) != G_t.shape:
            raise ValueError(f"error buffer shape {tuple(shape)} != gradient shape {G_t.shape}")
    if mode is EfMode.NONE:
        return None
    if up is None:
        up = project_up(g_t, Q, sel)
    if up.shape != G_t.shape:
        raise ValueError(f"reconstruction shape {up.shape} != gradient shape {G_t.shape}")
    residual = G_t - up
    if mode is EfMode.DENSE:
        return residual
    return quantize(residual, group_size)


def read_error(buffer) -> np.ndarray | None:
    """Dense view of a stored buffer (``None`` stays ``None``)."""
    if buffer is None:
        return None
    if isinstance(buffer, QuantBuffer):
        return dequantize(buffer)
    return buffer
