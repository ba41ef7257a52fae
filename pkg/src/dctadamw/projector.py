"""Column selection from an orthogonal basis, projections and baseline projectors.

Side convention (GaLore): a gradient ``G`` of shape ``(n, m)`` is projected
on the side of its smaller dimension.

* ``Side.RIGHT`` (``n >= m``): ``S = G Q``, scores are column norms of ``S``,
  ``g = G Q_r`` has shape ``(n, r)`` and ``up(g) = g Q_rᵀ``.
* ``Side.LEFT`` (``n < m``): ``S = Qᵀ G``, scores are row norms of ``S``,
  ``g = Q_rᵀ G`` has shape ``(r, m)`` and ``up(g) = Q_r g``.

``Q_r`` always stacks *columns* of the basis. Dense projectors (SVD, random)
play the same role as ``Q_r`` and go through the ``*_dense`` helpers.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .transform import OrthoBasis


class Side(str, enum.Enum):
    RIGHT = "right"
    LEFT = "left"


class NormMode(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"


class ProjectorKind(str, enum.Enum):
    DCT_SELECT = "dct"
    SVD = "svd"
    RANDOM = "random"
    RANDPERM = "randperm"
    IDENTITY_COLS = "identity"

    @property
    def uses_indices(self) -> bool:
        return self in (ProjectorKind.DCT_SELECT, ProjectorKind.RANDPERM, ProjectorKind.IDENTITY_COLS)


@dataclass(frozen=True, eq=False)
class Selection:
    """``r`` distinct basis column indices plus the projection side.

    For ranked selections the indices are in descending score order, ties
    broken by ascending index.
    """

    indices: np.ndarray
    side: Side
    norm_mode: NormMode = NormMode.L1

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("selection needs a non-empty 1-D index array")
        if np.unique(idx).size != idx.size:
            raise ValueError("selection indices must be distinct")
        if idx.min() < 0:
            raise ValueError("selection indices must be non-negative")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "side", Side(self.side))
        object.__setattr__(self, "norm_mode", NormMode(self.norm_mode))

    @property
    def rank(self) -> int:
        return int(self.indices.size)

    def key(self) -> tuple:
        return (self.side.value, tuple(int(i) for i in self.indices))

    def __eq__(self, other):
        if not isinstance(other, Selection):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _as_matrix(G, name="G") -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {G.shape}")
    return G


def _check_rank(r, n, m) -> int:
    if isinstance(r, bool) or int(r) != r or r < 1:
        raise ValueError(f"rank must be a positive integer, got {r!r}")
    if r > min(n, m):
        raise ValueError(f"rank {r} exceeds min(n, m) = {min(n, m)}")
    return int(r)


def projected_dim(shape, side: Side) -> int:
    """Length of the axis that gets compressed to ``r``."""
    return shape[1] if Side(side) is Side.RIGHT else shape[0]


def resolve_side(shape, order: int | None = None) -> Side:
    """Pick the projection side for a gradient of ``shape``.

    Without ``order`` this is the plain GaLore rule. With a shared basis of
    ``order``, a layer whose preferred axis does not match the basis falls
    back to the other side when that axis does match (e.g. a ``(1024, 4096)``
    layer with a 4096 basis is right-projected).
    """
    n, m = shape
    preferred = Side.RIGHT if n >= m else Side.LEFT
    if order is None:
        return preferred
    if projected_dim(shape, preferred) == order:
        return preferred
    other = Side.LEFT if preferred is Side.RIGHT else Side.RIGHT
    if projected_dim(shape, other) == order:
        return other
    raise ValueError(f"no side of a {n}x{m} gradient matches basis order {order}")


def _check_side_order(G, Q: OrthoBasis, side: Side):
    if projected_dim(G.shape, side) != Q.order:
        raise ValueError(
            f"{side.value} projection of a {G.shape[0]}x{G.shape[1]} matrix needs "
            f"basis order {projected_dim(G.shape, side)}, got {Q.order}"
        )


def alignment_matrix(G, Q: OrthoBasis, side: Side | None = None) -> np.ndarray:
    """``S = G Q`` (right) or ``S = Qᵀ G`` (left)."""
    G = _as_matrix(G)
    side = resolve_side(G.shape, Q.order) if side is None else Side(side)
    _check_side_order(G, Q, side)
    return G @ Q.entries if side is Side.RIGHT else Q.entries.T @ G


def alignment_scores(S, side: Side, norm_mode: NormMode) -> np.ndarray:
    """Per-direction norms of ``S`` (L1 norm or squared L2 norm)."""
    p = 1 if NormMode(norm_mode) is NormMode.L1 else 2
    axis = 0 if Side(side) is Side.RIGHT else 1
    return _kernels.active().axis_scores(np.ascontiguousarray(S, dtype=np.float64), p, axis)


def alignment_energies(G, Q: OrthoBasis, side: Side | None = None) -> np.ndarray:
    """``‖q_iᵀ G‖²`` (left) or ``‖G q_i‖²`` (right) for every basis column."""
    G = _as_matrix(G)
    side = resolve_side(G.shape, Q.order) if side is None else Side(side)
    S = alignment_matrix(G, Q, side)
    return np.square(S).sum(axis=0 if side is Side.RIGHT else 1)


# ---------------------------------------------------------------------------
# selection and projection
# ---------------------------------------------------------------------------

def select(G, Q: OrthoBasis, r: int, norm_mode: NormMode = NormMode.L1,
           side: Side | None = None) -> tuple[Selection, np.ndarray]:
    """Rank the basis columns by their alignment with ``G`` and keep the top ``r``.

    Returns the selection and ``S`` so that callers can read the projected
    gradient straight out of ``S`` instead of multiplying again.
    """
    G = _as_matrix(G)
    n, m = G.shape
    r = _check_rank(r, n, m)
    side = resolve_side(G.shape, Q.order) if side is None else Side(side)
    _check_side_order(G, Q, side)
    S = G @ Q.entries if side is Side.RIGHT else Q.entries.T @ G
    scores = alignment_scores(S, side, norm_mode)
    idx = _kernels.active().rank_top(scores, r)
    return Selection(idx, side, NormMode(norm_mode)), S


def take_projected(S, sel: Selection) -> np.ndarray:
    """The projected gradient read from a cached ``S``."""
    if sel.side is Side.RIGHT:
        return S[:, sel.indices]
    return S[sel.indices, :]


def _check_indices(sel: Selection, Q: OrthoBasis):
    if sel.indices.max() >= Q.order:
        raise ValueError(f"selection index {int(sel.indices.max())} out of range for order {Q.order}")


def project_down(G, Q: OrthoBasis, sel: Selection) -> np.ndarray:
    G = _as_matrix(G)
    _check_indices(sel, Q)
    _check_side_order(G, Q, sel.side)
    return project_down_dense(G, Q.columns(sel.indices), sel.side)


def project_up(g, Q: OrthoBasis, sel: Selection) -> np.ndarray:
    g = _as_matrix(g, "g")
    _check_indices(sel, Q)
    return project_up_dense(g, Q.columns(sel.indices), sel.side)


def project_down_dense(G, P, side: Side) -> np.ndarray:
    G = _as_matrix(G)
    if Side(side) is Side.RIGHT:
        if G.shape[1] != P.shape[0]:
            raise ValueError(f"cannot right-project {G.shape} with projector {P.shape}")
        return G @ P
    if G.shape[0] != P.shape[0]:
        raise ValueError(f"cannot left-project {G.shape} with projector {P.shape}")
    return P.T @ G


def project_up_dense(g, P, side: Side) -> np.ndarray:
    g = _as_matrix(g, "g")
    if Side(side) is Side.RIGHT:
        if g.shape[1] != P.shape[1]:
            raise ValueError(f"low-rank shape {g.shape} does not match projector {P.shape}")
        return g @ P.T
    if g.shape[0] != P.shape[1]:
        raise ValueError(f"low-rank shape {g.shape} does not match projector {P.shape}")
    return P @ g


def reconstruction_error(G, Q: OrthoBasis, sel: Selection) -> float:
    """``‖G - up(down(G))‖_F²``."""
    G = _as_matrix(G)
    return float(np.square(G - project_up(project_down(G, Q, sel), Q, sel)).sum())


def reconstruction_error_dense(G, P, side: Side) -> float:
    G = _as_matrix(G)
    return float(np.square(G - project_up_dense(project_down_dense(G, P, side), P, side)).sum())


# ---------------------------------------------------------------------------
# switching between consecutive subspaces
# ---------------------------------------------------------------------------

def switch_matrix(Q: OrthoBasis, sel_prev: Selection, sel_crt: Selection) -> np.ndarray:
    """``R = Q_prevᵀ Q_crt`` computed by index matching.

    Both selections come from one orthogonal basis, so ``R[a, b]`` is 1 when
    ``prev[a] == crt[b]`` and 0 otherwise.
    """
    if sel_prev.rank != sel_crt.rank:
        raise ValueError(f"rank mismatch: {sel_prev.rank} vs {sel_crt.rank}")
    _check_indices(sel_prev, Q)
    _check_indices(sel_crt, Q)
    return _kernels.active().match_matrix(sel_prev.indices, sel_crt.indices)


def switch_matrix_dense(P_prev, P_crt) -> np.ndarray:
    if P_prev.shape != P_crt.shape:
        raise ValueError(f"projector shapes differ: {P_prev.shape} vs {P_crt.shape}")
    return P_prev.T @ P_crt


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def svd_projector(G, r: int, side: Side | None = None) -> np.ndarray:
    """Top-``r`` singular vectors on the projection side.

    Right side returns ``V[:, :r]`` (``m x r``), left side ``U[:, :r]``
    (``n x r``), where ``G = U diag(s) Vᵀ``.
    """
    G = _as_matrix(G)
    if not np.all(np.isfinite(G)):
        raise ValueError("SVD projector requires finite entries")
    n, m = G.shape
    r = _check_rank(r, n, m)
    side = resolve_side(G.shape) if side is None else Side(side)
    U, _, Vt = np.linalg.svd(G, full_matrices=False)
    if side is Side.RIGHT:
        return np.ascontiguousarray(Vt[:r].T)
    return np.ascontiguousarray(U[:, :r])


def random_semi_orthogonal(n: int, r: int, seed) -> np.ndarray:
    """Orthonormalised ``n x r`` standard Gaussian draw."""
    r = _check_rank(r, n, n)
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, r))
    P, T = np.linalg.qr(A)
    # sign fix makes the factorisation unique
    return P * np.sign(np.where(np.diag(T) == 0, 1.0, np.diag(T)))


def randperm_selection(n: int, r: int, seed, side: Side = Side.RIGHT) -> Selection:
    """``r`` of ``n`` indices drawn without replacement (identity-basis columns)."""
    r = _check_rank(r, n, n)
    rng = np.random.default_rng(seed)
    return Selection(rng.permutation(n)[:r], side, NormMode.L1)
