"""Command-line entry point.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import ast
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

from . import analysis
from .harness import TaskSpec, TrainConfig, train
from .optimizer import Hyper
from .transform import build_dct3

OUTPUT_ENV = "DCTADAMW_OUTPUT_DIR"
DTYPE_BYTES = {"bf16": 2, "bfloat16": 2, "fp16": 2, "fp32": 4, "float32": 4}

# every run seeds the task, the initialisation, batching and the projector
HYPER_KEYS = {f.name for f in fields(Hyper)} - {"seed"}
TASK_KEYS = ({f.name for f in fields(TaskSpec)} - {"seed", "kind"}) | {"task"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"hyper", "init_seed", "data_seed"}
RUN_KEYS = {"seeds", "output_dir", "formats", "workers"}
ALL_KEYS = HYPER_KEYS | TASK_KEYS | TRAIN_KEYS | RUN_KEYS

DEFAULT_RUN = {"seeds": "0", "output_dir": "runs", "formats": "csv,json", "workers": 1}


_COMMENT = re.compile(r"(^|\s)#.*$")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _COMMENT.sub("", raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = _parse_value(value)
    return out


def _parse_overrides(tokens: list[str]) -> dict:
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise UsageError(f"missing value for --{key}") from None
        out[key.replace("-", "_")] = _parse_value(value)
    return out


def _seed_list(value) -> list[int]:
    if isinstance(value, int):
        return [value]
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    try:
        return [int(s) for s in str(value).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {value!r}") from None


def build_run(cfg: dict):
    """Validate a merged flat config; returns ``(task_kwargs, train_kwargs, hyper_kwargs, run)``."""
    unknown = set(cfg) - ALL_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    run = {**DEFAULT_RUN, **{k: cfg[k] for k in RUN_KEYS if k in cfg}}
    hyper = {k: cfg[k] for k in HYPER_KEYS if k in cfg}
    task = {("kind" if k == "task" else k): cfg[k] for k in TASK_KEYS if k in cfg}
    tr = {k: cfg[k] for k in TRAIN_KEYS if k in cfg}
    if isinstance(tr.get("full_rank"), str):
        tr["full_rank"] = tuple(s.strip() for s in tr["full_rank"].split(",") if s.strip())
    run["seeds"] = _seed_list(run["seeds"])
    if not run["seeds"]:
        raise UsageError("at least one seed is required")
    # fail fast: build every object once before any run starts
    try:
        TrainConfig(hyper=Hyper(**hyper), **tr)
        spec = TaskSpec(**task)
        if tr.get("batch_size", TrainConfig.batch_size) > spec.n_samples:
            raise ValueError("batch_size exceeds n_samples")
        rank = hyper.get("rank", Hyper.rank)
        if rank > min(spec.d_in, spec.d_h, spec.d_out):
            raise ValueError(f"rank {rank} exceeds the smallest layer dimension")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return task, tr, hyper, run


def _one_run(args):
    task, tr, hyper, seed, out_dir, formats = args
    spec = TaskSpec(**{**task, "seed": seed})
    cfg = TrainConfig(hyper=Hyper(**{**hyper, "seed": seed}), init_seed=seed, data_seed=seed, **tr)
    metrics = train(spec, cfg)
    stem = Path(out_dir) / f"run_seed{seed}"
    if "csv" in formats:
        metrics.write_csv(stem.with_suffix(".csv"))
    if "json" in formats:
        metrics.write_json(stem.with_suffix(".json"),
                           extra={"seed": seed, "hyper": cfg.hyper.to_dict(), "task": task, "train": tr})
    return seed, metrics.final_loss, metrics.diverged, metrics.message


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_dct_check(args) -> int:
    ok = True
    for n in args.n:
        if n < 1:
            raise UsageError(f"basis order must be positive, got {n}")
    for n in args.n:
        res = build_dct3(n).orthogonality_residual()
        good = res <= 1e-10 * n
        ok &= good
        print(f"n={n:<6d} max|QᵀQ-I| = {res:.3e}  {'ok' if good else 'FAIL'}")
    return 0 if ok else 1


def _out_dir(args) -> Path:
    path = Path(os.environ.get(OUTPUT_ENV) or args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_bench(args) -> int:
    out = _out_dir(args)
    if args.kind == "projection":
        try:
            ranks = [float(r) if "." in r else int(r) for r in args.ranks.split(",")]
            dims = [int(d) for d in args.dims.split(",")]
            rows = analysis.contractivity_sweep(dims, ranks, args.trials, args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        analysis.write_sweep_csv(rows, out / "projection_sweep.csv")
        violations = [r for r in rows if r["projector"] == "dct" and r["norm_mode"] == "l2"
                      and r["ratio"] > 1 - r["r"] / r["n"] + 1e-12]
        summary = {}
        for r in rows:
            key = f"n={r['n']},r={r['r']},{r['projector']}{('-' + r['norm_mode']) if r['norm_mode'] else ''}"
            summary.setdefault(key, []).append(r["ratio"])
        summary = {k: sum(v) / len(v) for k, v in summary.items()}
        _write_json(out / "projection_summary.json", {"mean_ratio": summary, "rows": len(rows),
                                                      "l2_bound_violations": len(violations)})
        print(f"{len(rows)} rows -> {out / 'projection_sweep.csv'}")
        for k, v in summary.items():
            print(f"  {k:<32s} {v:.4f}")
        return 1 if violations else 0

    reports = []
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
        for n in sizes:
            rep = analysis.bench_selection_vs_svd(n, args.trials, args.seed)
            reports.append(rep)
            print(f"n={n:<5d} select {rep.dct_median_s * 1e3:9.2f} ms   svd {rep.svd_median_s * 1e3:9.2f} ms"
                  f"   ratio {rep.ratio:7.2f}")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_json(out / "timing.json", [r.to_dict() for r in reports])
    return 0 if all(r.ratio > 1 for r in reports) else 1


def cmd_memory(args) -> int:
    reports = []
    for dtype in args.dtype:
        if dtype not in DTYPE_BYTES:
            raise UsageError(f"unknown dtype {dtype!r}; choose from {', '.join(DTYPE_BYTES)}")
        for r in args.r:
            if r > args.n:
                print(f"warning: r={r} exceeds n={args.n}", file=sys.stderr)
            for method in ("svd", "dct"):
                reports.append(analysis.memory_model(method, args.L, args.n, r, DTYPE_BYTES[dtype], args.index_bytes))
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=2))
        return 0
    print(f"{'method':<6s} {'bytes/elem':>10s} {'r':>6s} {'memory':>14s}")
    for rep in reports:
        print(f"{rep.method.value:<6s} {rep.elem_bytes:>10d} {rep.r:>6d} {rep.human:>14s}")
    return 0


def cmd_train(args, extra) -> int:
    if not args.config:
        raise UsageError("--config is required")
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = parse_config(path.read_text())
    cfg.update(_parse_overrides(extra))
    if args.seeds is not None:
        cfg["seeds"] = args.seeds
    task, tr, hyper, run = build_run(cfg)
    out = Path(os.environ.get(OUTPUT_ENV) or run["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    formats = {f.strip() for f in str(run["formats"]).split(",")}
    jobs = [(task, tr, hyper, seed, str(out), formats) for seed in run["seeds"]]
    if int(run["workers"]) > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=int(run["workers"])) as pool:
            results = list(pool.map(_one_run, jobs))
    else:
        results = [_one_run(j) for j in jobs]
    failed = False
    for seed, loss, diverged, msg in results:
        print(f"seed {seed}: final_loss {loss:.6g}" + (f"  DIVERGED ({msg})" if diverged else ""))
        failed |= diverged
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _int_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dctadamw", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    dct = sub.add_parser("dct", help="basis utilities")
    dsub = dct.add_subparsers(dest="dct_command", required=True)
    chk = dsub.add_parser("check", help="orthogonality residual of DCT bases")
    chk.add_argument("n", nargs="*", type=int, default=[1, 2, 3, 16, 64, 128, 1024])

    bench = sub.add_parser("bench", help="projection sweeps and timing")
    bench.add_argument("kind", choices=["projection", "timing"])
    bench.add_argument("--dims", default="8,16,64")
    bench.add_argument("--ranks", default="1,0.25,0.5", help="integers or fractions of n")
    bench.add_argument("--sizes", default="512,1024,2048")
    bench.add_argument("--trials", type=int, default=5)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", default="bench")

    mem = sub.add_parser("memory", help="projection-matrix memory model")
    mem.add_argument("--L", type=int, default=224)
    mem.add_argument("--n", type=int, default=4096)
    mem.add_argument("--r", type=_int_list, default=[32, 256, 512])
    mem.add_argument("--dtype", nargs="+", default=["bf16", "fp32"])
    mem.add_argument("--index-bytes", type=int, default=4)
    mem.add_argument("--json", action="store_true")

    tr = sub.add_parser("train", help="train on a synthetic task; extra --key value pairs override the config")
    tr.add_argument("--config")
    tr.add_argument("--seeds")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if extra and args.command != "train":
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "dct":
            return cmd_dct_check(args)
        if args.command == "bench":
            return cmd_bench(args)
        if args.command == "memory":
            return cmd_memory(args)
        return cmd_train(args, extra)
    except UsageError as exc:
        print(f"dctadamw: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
