"""DCT-AdamW: AdamW whose moments live in a low-rank subspace of a shared basis.

Per step and layer, with ``t`` counting from 1::

    G_t  = grad + EF                         (EF read from the previous step)
    R    = update_subspace(G_t)              (re-select every T_u steps)
    g_t  = down(G_t)                         (read from S on refresh steps)
    EF   = G_t - up(g_t)                     (dense, 8-bit or dropped)
    m_t  = b1 * rot(m_{t-1}, R) + (1 - b1) g_t
    v_t  = b2 * |rot(v_{t-1}, R)| + (1 - b2) g_t²
    θ   -= lr * up(m̂ / (eps + sqrt(v̂))) + lr * wd * θ

``rot`` is ``x R`` for right projection and ``Rᵀ x`` for left projection,
so the rotation always acts on the ``r`` axis.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .efq import EfMode, QuantBuffer, accumulate_error, read_error
from .projector import (
    NormMode,
    ProjectorKind,
    Selection,
    Side,
    project_down_dense,
    project_up_dense,
    projected_dim,
    random_semi_orthogonal,
    randperm_selection,
    resolve_side,
    select,
    svd_projector,
    switch_matrix_dense,
    take_projected,
)
from .transform import OrthoBasis, get_basis


@dataclass
class Hyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    update_period: int = 200
    rank: int = 8
    ef_mode: EfMode = EfMode.NONE
    projector: ProjectorKind = ProjectorKind.DCT_SELECT
    norm_mode: NormMode = NormMode.L1
    group_size: int = 256
    seed: int = 0

    def __post_init__(self):
        self.ef_mode = EfMode(self.ef_mode)
        self.projector = ProjectorKind(self.projector)
        self.norm_mode = NormMode(self.norm_mode)
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if int(self.update_period) != self.update_period or self.update_period < 1:
            raise ValueError(f"update_period must be a positive integer, got {self.update_period}")
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValueError(f"rank must be a positive integer, got {self.rank}")
        if self.group_size < 1:
            raise ValueError("group_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("ef_mode", "projector", "norm_mode"):
            d[k] = d[k].value
        return d


@dataclass
class LayerState:
    shape: tuple[int, int]
    side: Side
    m: np.ndarray
    v: np.ndarray
    sel_crt: Selection | None = None
    sel_prev: Selection | None = None
    proj_crt: np.ndarray | None = None
    ef: np.ndarray | QuantBuffer | None = None
    step: int = 0
    layer_id: int = 0
    # diagnostics of the most recent step
    last_recon_error: float = float("nan")
    last_grad_sq: float = float("nan")

    @property
    def recon_ratio(self) -> float:
        if self.last_grad_sq == 0.0:
            return 0.0
        return self.last_recon_error / self.last_grad_sq

    @property
    def nbytes(self) -> int:
        total = self.m.nbytes + self.v.nbytes
        for sel in (self.sel_crt, self.sel_prev):
            if sel is not None:
                total += sel.indices.nbytes
        if self.proj_crt is not None:
            total += self.proj_crt.nbytes
        if isinstance(self.ef, QuantBuffer):
            total += self.ef.nbytes
        elif self.ef is not None:
            total += self.ef.nbytes
        return int(total)


def init_state(shape, h: Hyper, Q: OrthoBasis | None = None, layer_id: int = 0) -> LayerState:
    n, m = (int(s) for s in shape)
    if h.rank > min(n, m):
        raise ValueError(f"rank {h.rank} exceeds min(n, m) = {min(n, m)} for shape {(n, m)}")
    if h.projector is ProjectorKind.DCT_SELECT and Q is not None:
        side = resolve_side((n, m), Q.order)
    else:
        side = resolve_side((n, m))
    low = (n, h.rank) if side is Side.RIGHT else (h.rank, m)
    return LayerState(shape=(n, m), side=side, m=np.zeros(low), v=np.zeros(low), layer_id=layer_id)


def _index_basis(state: LayerState, h: Hyper, Q: OrthoBasis | None) -> OrthoBasis:
    if h.projector is ProjectorKind.DCT_SELECT:
        if Q is None:
            raise ValueError("the dct projector needs a basis")
        return Q
    return get_basis(projected_dim(state.shape, state.side), "identity")


def _rotate_indices(x, prev: Selection, crt: Selection, side: Side) -> np.ndarray:
    """``x R`` (right) or ``Rᵀ x`` (left) for the 0/1 index-match ``R``."""
    kern = _kernels.active()
    if side is Side.RIGHT:
        return kern.reindex_cols(np.ascontiguousarray(x), prev.indices, crt.indices)
    return kern.reindex_cols(np.ascontiguousarray(x.T), prev.indices, crt.indices).T.copy()


def _rotate_dense(x, R, side: Side) -> np.ndarray:
    return x @ R if side is Side.RIGHT else R.T @ x


def _is_refresh(t: int, h: Hyper) -> bool:
    return t == 1 or t % h.update_period == 0


def _refresh(G_t, state: LayerState, h: Hyper, Q: OrthoBasis | None, t: int):
    """Run the subspace update for step ``t``; returns ``(R, g_or_None)``.

    ``R`` is ``None`` when it is the identity. ``g`` is the projected
    gradient when it falls out of the selection for free.
    """
    if t > 1 and h.projector.uses_indices:
        state.sel_prev = state.sel_crt
    if not _is_refresh(t, h):
        return None, None

    kind = h.projector
    rng_key = [int(h.seed), int(state.layer_id), int(t)]
    if kind.uses_indices:
        basis = _index_basis(state, h, Q)
        if kind is ProjectorKind.RANDPERM:
            state.sel_crt = randperm_selection(basis.order, h.rank, rng_key, state.side)
            g = None
        else:
            state.sel_crt, S = select(G_t, basis, h.rank, h.norm_mode, state.side)
            g = take_projected(S, state.sel_crt)
        if t == 1 or state.sel_prev == state.sel_crt:
            return None, g
        return (state.sel_prev, state.sel_crt), g

    P_prev = state.proj_crt
    if kind is ProjectorKind.SVD:
        state.proj_crt = svd_projector(G_t, h.rank, state.side)
    else:
        state.proj_crt = random_semi_orthogonal(projected_dim(state.shape, state.side), h.rank, rng_key)
    if t == 1:
        return None, None
    return switch_matrix_dense(P_prev, state.proj_crt), None


def update_subspace(G_t, state: LayerState, h: Hyper, Q: OrthoBasis | None = None) -> np.ndarray:
    """Subspace update for the upcoming step; returns the ``r x r`` switching matrix.

    Advances the selection held in ``state`` but not ``state.step``.
    """
    t = state.step + 1
    R, _ = _refresh(np.asarray(G_t, dtype=np.float64), state, h, Q, t)
    if R is None:
        return np.eye(h.rank)
    if isinstance(R, tuple):
        return _kernels.active().match_matrix(R[0].indices, R[1].indices)
    return R


def current_projector(state: LayerState, h: Hyper, Q: OrthoBasis | None = None) -> np.ndarray:
    """Dense ``Q_r`` of the current subspace."""
    if h.projector.uses_indices:
        return _index_basis(state, h, Q).columns(state.sel_crt.indices)
    return state.proj_crt


def step(theta, grad, state: LayerState, h: Hyper, Q: OrthoBasis | None = None,
         lr: float | None = None) -> np.ndarray:
    """One DCT-AdamW step for a single matrix parameter; returns the new parameter."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.shape or theta.shape != state.shape:
        raise ValueError(f"expected shape {state.shape}, got theta {theta.shape} grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    lr = h.lr if lr is None else lr
    t = state.step + 1

    G = grad
    if h.ef_mode is not EfMode.NONE and state.ef is not None:
        G = grad + read_error(state.ef)

    R, g = _refresh(G, state, h, Q, t)
    P = current_projector(state, h, Q)
    if g is None:
        g = project_down_dense(G, P, state.side)
    G_rec = project_up_dense(g, P, state.side)

    state.ef = accumulate_error(state.ef, G, g, None, None, h.ef_mode, up=G_rec, group_size=h.group_size)
    state.last_grad_sq = float(np.square(G).sum())
    state.last_recon_error = float(np.square(G - G_rec).sum())

    m, v = state.m, state.v
    if isinstance(R, tuple):
        m = _rotate_indices(m, R[0], R[1], state.side)
        v = _rotate_indices(v, R[0], R[1], state.side)
    elif R is not None:
        m = _rotate_dense(m, R, state.side)
        v = np.abs(_rotate_dense(v, R, state.side))

    b1, b2 = h.beta1, h.beta2
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * (g * g)
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    u = m_hat / (h.eps + np.sqrt(v_hat))

    state.m, state.v, state.step = m, v, t
    return theta - lr * project_up_dense(u, P, state.side) - lr * h.weight_decay * theta


# ---------------------------------------------------------------------------
# full-rank reference
# ---------------------------------------------------------------------------

@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamMoments":
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def nbytes(self) -> int:
        return int(self.m.nbytes + self.v.nbytes)


def adamw_reference_step(theta, grad, moments: AdamMoments, h: Hyper, lr: float | None = None) -> np.ndarray:
    """Textbook AdamW with bias correction and decoupled weight decay."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(theta))):
        raise FloatingPointError("non-finite input to AdamW step")
    lr = h.lr if lr is None else lr
    t = moments.step + 1
    b1, b2 = h.beta1, h.beta2
    moments.m = b1 * moments.m + (1 - b1) * grad
    moments.v = b2 * moments.v + (1 - b2) * (grad * grad)
    moments.step = t
    m_hat = moments.m / (1 - b1 ** t)
    v_hat = moments.v / (1 - b2 ** t)
    return theta - lr * (m_hat / (h.eps + np.sqrt(v_hat))) - lr * h.weight_decay * theta


# ---------------------------------------------------------------------------
# multi-parameter driver
# ---------------------------------------------------------------------------

class DCTAdamW:
    """Steps a dict of named 2-D parameters.

    Parameters listed in ``full_rank`` (and any non-matrix parameter) use
    the reference AdamW. The DCT basis is built once per distinct order.
    """

    def __init__(self, shapes: dict, hyper: Hyper, full_rank=()):
        self.hyper = hyper
        self.full_rank = set(full_rank)
        self.states: dict[str, LayerState] = {}
        self.moments: dict[str, AdamMoments] = {}
        self.bases: dict[str, OrthoBasis | None] = {}
        for layer_id, (name, shape) in enumerate(shapes.items()):
            shape = tuple(shape)
            if name in self.full_rank or len(shape) != 2:
                self.moments[name] = AdamMoments.zeros(shape)
                continue
            Q = None
            if hyper.projector is ProjectorKind.DCT_SELECT:
                Q = get_basis(projected_dim(shape, resolve_side(shape)), "dct3")
            self.bases[name] = Q
            self.states[name] = init_state(shape, hyper, Q, layer_id)

    def step(self, params: dict, grads: dict, lr: float | None = None) -> dict:
        out = {}
        for name, theta in params.items():
            if name in self.states:
                out[name] = step(theta, grads[name], self.states[name], self.hyper, self.bases[name], lr)
            else:
                out[name] = adamw_reference_step(theta, grads[name], self.moments[name], self.hyper, lr)
        return out

    def recon_ratio(self) -> float:
        """Pooled ``Σ error / Σ ‖G‖²`` over projected layers for the last step."""
        err = sum(s.last_recon_error for s in self.states.values())
        tot = sum(s.last_grad_sq for s in self.states.values())
        return 0.0 if tot == 0 else err / tot

    @property
    def state_bytes(self) -> int:
        return sum(s.nbytes for s in self.states.values()) + sum(m.nbytes for m in self.moments.values())


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"DCTW"
FORMAT_VERSION = 1


def _blob_entry(arr, blobs, offset):
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    data = le.tobytes()
    blobs.append(data)
    return {"dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}, offset + len(data)


def save_checkpoint(path, states: dict, hyper: Hyper | None = None) -> None:
    """Write layer states to ``path``.

    Layout: ``b"DCTW"``, uint32 version, uint64 header length (all
    little-endian), UTF-8 JSON header, then the raw little-endian array
    bytes. Header ``offset`` values count from the first byte after the
    header.
    """
    blobs: list[bytes] = []
    offset = 0
    layers = {}
    for name, st in states.items():
        arrays = {"m": st.m, "v": st.v}
        if st.sel_crt is not None:
            arrays["indices_crt"] = st.sel_crt.indices
        if st.sel_prev is not None:
            arrays["indices_prev"] = st.sel_prev.indices
        if st.proj_crt is not None:
            arrays["proj_crt"] = st.proj_crt
        ef_meta = None
        if isinstance(st.ef, QuantBuffer):
            arrays["ef_codes"] = st.ef.codes
            arrays["ef_scales"] = st.ef.scales
            arrays["ef_zeros"] = st.ef.zeros
            ef_meta = {"kind": "quant8", "group_size": st.ef.group_size, "shape": list(st.ef.shape)}
        elif st.ef is not None:
            arrays["ef"] = st.ef
            ef_meta = {"kind": "dense"}
        entries = {}
        for key, arr in arrays.items():
            entries[key], offset = _blob_entry(arr, blobs, offset)
        sel = st.sel_crt or st.sel_prev
        layers[name] = {
            "shape": list(st.shape),
            "side": st.side.value,
            "norm_mode": sel.norm_mode.value if sel is not None else None,
            "step": st.step,
            "layer_id": st.layer_id,
            "ef": ef_meta,
            "arrays": entries,
        }
    header = {"format": "dctadamw-state", "version": FORMAT_VERSION,
              "hyper": hyper.to_dict() if hyper else None, "layers": layers}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, Hyper | None]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a DCT-AdamW checkpoint")
    version, head_len = struct.unpack_from("<IQ", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + head_len].decode("utf-8"))
    body = start + head_len

    def arr(entry):
        a = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]), count=math.prod(entry["shape"]),
                          offset=body + entry["offset"])
        return a.reshape(entry["shape"]).astype(a.dtype.newbyteorder("="))

    states = {}
    for name, L in header["layers"].items():
        a = {k: arr(e) for k, e in L["arrays"].items()}
        side = Side(L["side"])
        norm = NormMode(L["norm_mode"]) if L["norm_mode"] else NormMode.L1
        ef = None
        if L["ef"] is not None and L["ef"]["kind"] == "quant8":
            ef = QuantBuffer(a["ef_codes"], a["ef_scales"], a["ef_zeros"],
                             tuple(L["ef"]["shape"]), L["ef"]["group_size"])
        elif L["ef"] is not None:
            ef = a["ef"]
        states[name] = LayerState(
            shape=tuple(L["shape"]), side=side, m=a["m"], v=a["v"],
            sel_crt=Selection(a["indices_crt"], side, norm) if "indices_crt" in a else None,
            sel_prev=Selection(a["indices_prev"], side, norm) if "indices_prev" in a else None,
            proj_crt=a.get("proj_crt"), ef=ef, step=L["step"], layer_id=L["layer_id"],
        )
    hyper = Hyper(**header["hyper"]) if header["hyper"] else None
    return states, hyper
