"""Memory accounting for projection matrices and projector benchmarks."""
from __future__ import annotations

import csv
import enum
import time
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from itertools import product

import numpy as np

from .projector import (
    NormMode,
    Side,
    random_semi_orthogonal,
    randperm_selection,
    reconstruction_error,
    reconstruction_error_dense,
    select,
    svd_projector,
)
from .transform import build_dct3, get_basis

MIB = 2 ** 20
SWEEP_COLUMNS = ("n", "r", "trial", "projector", "norm_mode", "ratio", "elapsed_us")


class Method(str, enum.Enum):
    SVD = "svd"
    DCT = "dct"


def mib_string(nbytes: int) -> str:
    """Bytes as MiB rounded half-up to two decimals."""
    value = (Decimal(int(nbytes)) / Decimal(MIB)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{value} MiB"


@dataclass
class MemoryReport:
    method: Method
    L: int
    n: int
    r: int
    elem_bytes: int
    index_bytes: int
    total_elements: int
    total_bytes: int
    human: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        return d


def memory_model(method, L: int, n: int, r: int, elem_bytes: int = 2, index_bytes: int = 4) -> MemoryReport:
    """Extra storage needed by the projection matrices of ``L`` square ``n x n`` layers.

    SVD keeps one ``n x r`` matrix per layer (``L n r`` reals). DCT keeps one
    shared ``n x n`` basis plus ``r`` integer indices per layer.
    """
    method = Method(method)
    for name, val in (("L", L), ("n", n), ("r", r), ("elem_bytes", elem_bytes), ("index_bytes", index_bytes)):
        if val < 1:
            raise ValueError(f"{name} must be positive, got {val}")
    if method is Method.SVD:
        elements = L * n * r
        nbytes = elements * elem_bytes
    else:
        elements = n * n + L * r
        nbytes = n * n * elem_bytes + L * r * index_bytes
    return MemoryReport(method, L, n, r, elem_bytes, index_bytes, elements, nbytes, mib_string(nbytes))


@dataclass
class TimingReport:
    n: int
    trials: int
    dct_mean_s: float
    dct_median_s: float
    dct_p90_s: float
    svd_mean_s: float
    svd_median_s: float
    svd_p90_s: float

    @property
    def ratio(self) -> float:
        """Median SVD time over median selection time."""
        return self.svd_median_s / self.dct_median_s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        return d


def _time(fn, trials: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    out = np.empty(trials)
    for k in range(trials):
        t0 = time.perf_counter()
        fn()
        out[k] = time.perf_counter() - t0
    return out


def bench_selection_vs_svd(n: int, trials: int = 5, seed: int = 0, rank: int | None = None,
                           warmup: int = 2) -> TimingReport:
    """Time ``select`` (matmul + norms + sort) against a full SVD on the same matrix."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if n < 64:
        raise ValueError(f"benchmark order must be at least 64, got {n}")
    rank = max(1, n // 8) if rank is None else rank
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    Q = get_basis(n)
    dct = _time(lambda: select(G, Q, rank, NormMode.L1), trials, warmup)
    svd = _time(lambda: np.linalg.svd(G), trials, warmup)
    return TimingReport(
        n=n, trials=trials,
        dct_mean_s=float(dct.mean()), dct_median_s=float(np.median(dct)), dct_p90_s=float(np.percentile(dct, 90)),
        svd_mean_s=float(svd.mean()), svd_median_s=float(np.median(svd)), svd_p90_s=float(np.percentile(svd, 90)),
    )


def contractivity_sweep(dims, ranks, trials: int, seed: int = 0) -> list[dict]:
    """Reconstruction-error ratios of every projector on random Gaussian matrices.

    ``ranks`` entries may be integers or fractions of ``n`` (floats < 1).
    Rows follow ``SWEEP_COLUMNS``; the same matrix is shared by all
    projectors within a trial.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rows = []
    for n in dims:
        Q = build_dct3(n)
        rank_list = sorted({_resolve_rank(r, n) for r in ranks})
        for r, trial in product(rank_list, range(trials)):
            rng = np.random.default_rng([seed, n, r, trial])
            G = rng.standard_normal((n, n))
            total = float(np.square(G).sum())

            def add(name, norm, fn):
                t0 = time.perf_counter()
                err = fn()
                rows.append({"n": n, "r": r, "trial": trial, "projector": name, "norm_mode": norm,
                             "ratio": err / total, "elapsed_us": (time.perf_counter() - t0) * 1e6})

            for mode in (NormMode.L1, NormMode.L2):
                add("dct", mode.value,
                    lambda mode=mode: reconstruction_error(G, Q, select(G, Q, r, mode)[0]))
            add("svd", "", lambda: reconstruction_error_dense(G, svd_projector(G, r), Side.RIGHT))
            add("random", "", lambda: reconstruction_error_dense(
                G, random_semi_orthogonal(n, r, [seed, n, r, trial]), Side.RIGHT))
            add("randperm", "", lambda: reconstruction_error(
                G, get_basis(n, "identity"), randperm_selection(n, r, [seed, n, r, trial])))
    return rows


def _resolve_rank(r, n: int) -> int:
    if isinstance(r, float) and r < 1:
        return max(1, int(round(r * n)))
    r = int(r)
    if not 1 <= r <= n:
        raise ValueError(f"rank {r} outside [1, {n}]")
    return r


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
