"""Desk-scale training tasks with analytic gradients.

A two-layer network ``Ŷ = act(X W1) W2`` is trained on synthetic data with
either the low-rank optimizer or full-rank AdamW, logging one record per
step.
"""
from __future__ import annotations

import csv
import enum
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .optimizer import AdamMoments, DCTAdamW, Hyper, adamw_reference_step

RECORD_COLUMNS = ("step", "train_loss", "grad_fro_norm", "recon_error_ratio", "step_time_us")


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"
    LINEAR = "linear"


class Loss(str, enum.Enum):
    MSE = "mse"
    SOFTMAX_CE = "softmax_ce"


class TaskKind(str, enum.Enum):
    PLANTED = "planted"
    CLASSIFICATION = "classification"


@dataclass
class TaskSpec:
    kind: TaskKind = TaskKind.PLANTED
    d_in: int = 64
    d_h: int = 64
    d_out: int = 64
    n_samples: int = 1024
    teacher_rank: int = 4
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        for name in ("d_in", "d_h", "d_out", "n_samples", "teacher_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.teacher_rank > min(self.d_in, self.d_out):
            raise ValueError(f"teacher_rank {self.teacher_rank} exceeds min(d_in, d_out)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def loss(self) -> Loss:
        return Loss.MSE if self.kind is TaskKind.PLANTED else Loss.SOFTMAX_CE


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    spec: TaskSpec


def gen_task(spec: TaskSpec) -> Dataset:
    """Sample inputs and targets from a rank-``teacher_rank`` linear teacher.

    ``Y = X A B + noise`` with ``A`` scaled by ``1/sqrt(d_in)`` and ``B`` by
    ``1/sqrt(teacher_rank)`` so targets have unit variance. For the
    classification task the teacher scores are turned into one-hot labels.
    """
    rng = np.random.default_rng(spec.seed)
    X = rng.standard_normal((spec.n_samples, spec.d_in))
    A = rng.standard_normal((spec.d_in, spec.teacher_rank)) / math.sqrt(spec.d_in)
    B = rng.standard_normal((spec.teacher_rank, spec.d_out)) / math.sqrt(spec.teacher_rank)
    Y = X @ A @ B
    if spec.noise_std > 0:
        Y = Y + spec.noise_std * rng.standard_normal(Y.shape)
    if spec.kind is TaskKind.CLASSIFICATION:
        Y = np.eye(spec.d_out)[np.argmax(Y, axis=1)]
    return Dataset(X, Y, spec)


@dataclass
class MlpModel:
    W1: np.ndarray
    W2: np.ndarray
    activation: Activation = Activation.TANH

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if self.W1.shape[1] != self.W2.shape[0]:
            raise ValueError(f"inconsistent shapes {self.W1.shape} and {self.W2.shape}")

    @classmethod
    def init(cls, d_in, d_h, d_out, seed=0, activation=Activation.TANH) -> "MlpModel":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((d_in, d_h)) / math.sqrt(d_in),
                   rng.standard_normal((d_h, d_out)) / math.sqrt(d_h), activation)

    def params(self) -> dict:
        return {"W1": self.W1, "W2": self.W2}

    def shapes(self) -> dict:
        return {"W1": self.W1.shape, "W2": self.W2.shape}

    def predict(self, X) -> np.ndarray:
        return _act(X @ self.W1, self.activation) @ self.W2


def _act(Z, activation):
    if activation is Activation.TANH:
        return np.tanh(Z)
    if activation is Activation.RELU:
        return np.maximum(Z, 0.0)
    return Z


def _act_grad(Z, H, activation):
    if activation is Activation.TANH:
        return 1.0 - H * H
    if activation is Activation.RELU:
        return (Z > 0).astype(Z.dtype)
    return np.ones_like(Z)


def forward_backward(model: MlpModel, X, Y, loss: Loss = Loss.MSE):
    """Loss and analytic gradients ``(loss, dW1, dW2)``.

    MSE is ``Σ (Ŷ - Y)² / batch``; softmax cross-entropy takes one-hot (or
    probability) targets and is averaged over the batch.
    """
    loss = Loss(loss)
    b = X.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        Z = X @ model.W1
        H = _act(Z, model.activation)
        out = H @ model.W2
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite forward pass")
        if loss is Loss.MSE:
            diff = out - Y
            value = float(np.square(diff).sum() / b)
            d_out = 2.0 * diff / b
        else:
            shifted = out - out.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            value = float(-(Y * logp).sum() / b)
            d_out = (np.exp(logp) * Y.sum(axis=1, keepdims=True) - Y) / b
    if not math.isfinite(value):
        raise FloatingPointError(f"loss is {value}")
    gW2 = H.T @ d_out
    dZ = (d_out @ model.W2.T) * _act_grad(Z, H, model.activation)
    gW1 = X.T @ dZ
    return value, gW1, gW2


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    hyper: Hyper = field(default_factory=Hyper)
    optimizer: str = "dct-adamw"          # or "adamw" for the full-rank baseline
    steps: int = 2000
    batch_size: int = 64
    schedule: str = "constant"            # or "cosine"
    warmup_steps: int = 0
    min_lr_ratio: float = 0.1
    activation: Activation = Activation.TANH
    full_rank: tuple = ()
    init_seed: int = 0
    data_seed: int = 0

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if self.optimizer not in ("dct-adamw", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


def lr_at(cfg: TrainConfig, t: int) -> float:
    """Learning rate for 1-based step ``t``."""
    base = cfg.hyper.lr
    if cfg.warmup_steps and t <= cfg.warmup_steps:
        return base * t / cfg.warmup_steps
    if cfg.schedule == "constant":
        return base
    span = max(1, cfg.steps - cfg.warmup_steps)
    frac = min(1.0, (t - cfg.warmup_steps) / span)
    floor = base * cfg.min_lr_ratio
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * frac))


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)
    final_loss: float = float("nan")
    mean_recon_ratio: float = float("nan")
    wall_time: float = 0.0
    peak_state_bytes: int = 0
    diverged: bool = False
    message: str = ""

    def column(self, name) -> np.ndarray:
        return np.array([rec[name] for rec in self.records])

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        d["steps"] = len(self.records)
        return d

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS)
            w.writeheader()
            for rec in self.records:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})

    def write_json(self, path, extra: dict | None = None) -> None:
        payload = self.summary()
        if extra:
            payload.update(extra)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _batches(rng, n_samples, batch_size):
    """Endless stream of index batches, sampled without replacement per epoch."""
    while True:
        perm = rng.permutation(n_samples)
        for start in range(0, n_samples - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def train(task, cfg: TrainConfig) -> RunMetrics:
    """Train the two-layer model on ``task`` (a ``TaskSpec`` or ``Dataset``)."""
    data = gen_task(task) if isinstance(task, TaskSpec) else task
    spec = data.spec
    if spec.n_samples < cfg.batch_size:
        raise ValueError(f"n_samples {spec.n_samples} < batch_size {cfg.batch_size}")
    model = MlpModel.init(spec.d_in, spec.d_h, spec.d_out, cfg.init_seed, cfg.activation)
    params = model.params()
    if cfg.optimizer == "adamw":
        moments = {k: AdamMoments.zeros(v.shape) for k, v in params.items()}
        opt = None
    else:
        opt = DCTAdamW(model.shapes(), cfg.hyper, cfg.full_rank)

    rng = np.random.default_rng(cfg.data_seed)
    batches = _batches(rng, spec.n_samples, cfg.batch_size)
    metrics = RunMetrics()
    peak = 0
    t_start = time.perf_counter()
    for t in range(1, cfg.steps + 1):
        idx = next(batches)
        t0 = time.perf_counter()
        model.W1, model.W2 = params["W1"], params["W2"]
        try:
            value, gW1, gW2 = forward_backward(model, data.X[idx], data.Y[idx], spec.loss)
        except FloatingPointError as exc:
            metrics.diverged, metrics.message = True, f"step {t}: {exc}"
            break
        if not math.isfinite(value):
            metrics.diverged, metrics.message = True, f"step {t}: loss is {value}"
            break
        grads = {"W1": gW1, "W2": gW2}
        lr = lr_at(cfg, t)
        if opt is None:
            params = {k: adamw_reference_step(params[k], grads[k], moments[k], cfg.hyper, lr) for k in params}
            ratio, state_bytes = 0.0, sum(m.nbytes for m in moments.values())
        else:
            params = opt.step(params, grads, lr)
            ratio, state_bytes = opt.recon_ratio(), opt.state_bytes
        peak = max(peak, state_bytes)
        metrics.records.append({
            "step": t,
            "train_loss": value,
            "grad_fro_norm": math.sqrt(float(np.square(gW1).sum() + np.square(gW2).sum())),
            "recon_error_ratio": ratio,
            "step_time_us": (time.perf_counter() - t0) * 1e6,
        })
    model.W1, model.W2 = params["W1"], params["W2"]
    metrics.wall_time = time.perf_counter() - t_start
    metrics.peak_state_bytes = int(peak)
    if metrics.records:
        metrics.mean_recon_ratio = float(np.mean(metrics.column("recon_error_ratio")))
    if not metrics.diverged:
        try:
            metrics.final_loss = forward_backward(model, data.X, data.Y, spec.loss)[0]
        except FloatingPointError as exc:
            metrics.diverged, metrics.message = True, f"final evaluation: {exc}"
    return metrics
