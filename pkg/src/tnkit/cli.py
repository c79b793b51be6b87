"""
Command-line entry point: ``train``, ``bench``, ``tensorize`` and ``eval``.

Exit codes: 0 on success, 1 on configuration or input errors, 2 on
numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import gc
import itertools
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from tnkit import autodiff as ad
from tnkit.models import MPSLayer, embed, tensorize_matrix
from tnkit.serialization import load_tensors, save_tensors
from tnkit.training import (ConfigError, NumericError, TrainConfig, build_model, evaluate,
                            read_csv, read_kv, train)

BENCH_COLUMNS = ["bond_dim", "auto_stack", "auto_unbind", "inline_input", "inline_mats",
                 "traced", "phase", "wall_ms_median", "peak_live_tensor_bytes",
                 "first_call_ms", "max_deviation"]


###############################################################################
#                                    BENCH                                    #
###############################################################################
def _bool_list(text: str) -> List[bool]:
    out = []
    for tok in text.split(","):
        t = tok.strip().lower()
        if t not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {tok!r}")
        out.append(t == "true")
    return out


def _int_list(text: str) -> List[int]:
    try:
        vals = [int(t) for t in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"expected integers: {exc}") from exc
    if any(v <= 0 for v in vals):
        raise ConfigError("values must be positive")
    return vals


@dataclass
class BenchConfig:
    """Sweep definition for ``bench``; every list is a comma-separated value in the file."""

    bond_dims: List[int] = field(default_factory=lambda: [10, 50])
    n_features: int = 100
    in_dim: int = 2
    out_dim: int = 10
    batch_size: int = 100
    reps: int = 5
    auto_stack: List[bool] = field(default_factory=lambda: [True, False])
    auto_unbind: List[bool] = field(default_factory=lambda: [True, False])
    inline_input: List[bool] = field(default_factory=lambda: [False])
    inline_mats: List[bool] = field(default_factory=lambda: [True, False])
    traced: List[bool] = field(default_factory=lambda: [True, False])
    phases: List[str] = field(default_factory=lambda: ["inference", "train"])
    seed: int = 0

    @classmethod
    def from_dict(cls, raw) -> "BenchConfig":
        cfg = cls()
        parsers = {"bond_dims": _int_list, "auto_stack": _bool_list, "auto_unbind": _bool_list,
                   "inline_input": _bool_list, "inline_mats": _bool_list, "traced": _bool_list,
                   "phases": lambda t: [p.strip() for p in t.split(",")]}
        for key, text in raw.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown bench key {key!r}")
            if key in parsers:
                setattr(cfg, key, parsers[key](text))
            else:
                try:
                    setattr(cfg, key, int(text))
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        if cfg.reps < 5:
            raise ConfigError("reps must be at least 5")
        if any(p not in ("train", "inference") for p in cfg.phases):
            raise ConfigError(f"phases must be train or inference, got {cfg.phases}")
        for key in ("n_features", "in_dim", "out_dim", "batch_size"):
            if getattr(cfg, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        return cfg


def _bench_model(cfg: BenchConfig, d: int, a_s: bool, a_u: bool, ii: bool, im: bool) -> MPSLayer:
    return MPSLayer(n_features=cfg.n_features + 1, in_dim=cfg.in_dim, out_dim=cfg.out_dim,
                    bond_dim=d, init_std=1e-9, seed=cfg.seed, auto_stack=a_s,
                    auto_unbind=a_u, inline_input=ii, inline_mats=im)


def _step(model: MPSLayer, x: np.ndarray, y: np.ndarray, phase: str) -> np.ndarray:
    if phase == "inference":
        with ad.no_grad():
            return model(x).value
    model.zero_grad()
    out = model(x)
    ad.cross_entropy(out, y).backward()
    return out.value


def run_bench(cfg: BenchConfig, log=None) -> List[dict]:
    """
    Time every cell of the sweep and return one row per cell.

    ``first_call_ms`` is the cold start: wall time from a fresh network to
    its first result at the bench batch (for traced cells this includes the
    batch-1 trace), as the median over ``reps`` fresh networks. A step is a
    forward, plus the backward in the train phase. ``wall_ms_median`` is the
    median of the second step of each of those networks, timed right after
    its cold start; peak bytes is the largest peak over those second steps.
    ``max_deviation`` is the largest
    output difference relative to the reference cell (all flags off except
    both inline flags, untraced), scaled by the reference's max magnitude.
    """
    rng = np.random.default_rng(cfg.seed)
    x = embed(rng.uniform(size=(cfg.batch_size, cfg.n_features)), "unit", cfg.in_dim)
    y = rng.integers(0, cfg.out_dim, size=cfg.batch_size)
    rows = []
    for d in cfg.bond_dims:
        with ad.no_grad():
            ref = _bench_model(cfg, d, False, False, True, True)(x).value
        scale = max(float(np.max(np.abs(ref))), np.finfo(float).tiny)
        grid = itertools.product(cfg.auto_stack, cfg.auto_unbind, cfg.inline_input,
                                 cfg.inline_mats, cfg.traced, cfg.phases)
        for a_s, a_u, ii, im, traced, phase in grid:
            cold, times, peak, dev, model = [], [], 0, 0.0, None
            for _ in range(cfg.reps):
                model = None
                gc.collect()        # drop the previous network before building the next
                model = _bench_model(cfg, d, a_s, a_u, ii, im)
                t0 = time.perf_counter()
                if traced:
                    model.trace(np.zeros((1,) + x.shape[1:]))
                _step(model, x, y, phase)
                cold.append((time.perf_counter() - t0) * 1e3)
                # steady sample right after its cold start, so machine drift hits both alike
                model.memory.reset_peak()
                t0 = time.perf_counter()
                out = _step(model, x, y, phase)
                times.append((time.perf_counter() - t0) * 1e3)
                peak = max(peak, model.memory.peak_bytes)
                dev = max(dev, float(np.max(np.abs(out - ref))) / scale)
            first_ms = float(np.median(cold))
            row = {"bond_dim": d, "auto_stack": a_s, "auto_unbind": a_u, "inline_input": ii,
                   "inline_mats": im, "traced": traced, "phase": phase,
                   "wall_ms_median": float(np.median(times)),
                   "peak_live_tensor_bytes": int(peak),
                   "first_call_ms": first_ms, "max_deviation": dev}
            rows.append(row)
            if log is not None:
                log(" ".join(f"{k}={v}" for k, v in row.items()))
    return rows


def write_bench_csv(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    if path.parent:
        path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (str(v).lower() if isinstance(v, bool) else v) for k, v in row.items()})


###############################################################################
#                                  COMMANDS                                   #
###############################################################################
def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    log = None if args.quiet else (lambda s: print(s, file=sys.stderr))
    res = train(cfg, args.out, log=log)
    print(json.dumps({"final_accuracy": res["final_accuracy"],
                      "final_loss": res["records"][-1]["loss"], "out": str(args.out)}))
    return 0


def cmd_bench(args) -> int:
    cfg = BenchConfig.from_dict(read_kv(args.config))
    log = None if args.quiet else (lambda s: print(s, file=sys.stderr))
    write_bench_csv(args.out, run_bench(cfg, log=log))
    return 0


def _load_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix == ".npy":
            return np.load(path)
        if path.suffix == ".tkro":
            tensors = load_tensors(path)
            if len(tensors) != 1:
                raise ConfigError(f"{path} must hold exactly one tensor")
            return next(iter(tensors.values()))
        return np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read matrix {path}: {exc}") from exc


def cmd_tensorize(args) -> int:
    w = _load_matrix(args.matrix)
    try:
        res = tensorize_matrix(w, args.n, args.d, max_rank=args.max_rank)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rel = float(np.linalg.norm(res.to_dense() - w) / max(np.linalg.norm(w), np.finfo(float).tiny))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensors(out / "mpo.tkro", {f"site_{i}": c for i, c in enumerate(res.cores)})
    report = {"n": args.n, "d": args.d, "max_rank": args.max_rank,
              "dense_elements": int(w.size), "mpo_elements": res.n_elements,
              "compression_ratio": w.size / res.n_elements, "bond_dims": res.bond_dims,
              "relative_error": rel, "truncation_error": res.truncation_error}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    return 0


def cmd_eval(args) -> int:
    model_path = Path(args.model)
    cfg_path = Path(args.config) if args.config else model_path.parent / "config.txt"
    cfg = TrainConfig.from_file(cfg_path)
    model = build_model(cfg)
    try:
        model.load(model_path)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load model {model_path}: {exc}") from exc
    x, y = read_csv(args.data)
    if x.shape[1] != cfg.n_features:
        raise ConfigError(f"data has {x.shape[1]} features, model expects {cfg.n_features}")
    if cfg.traced:
        model.trace(np.zeros((1, cfg.n_features, cfg.in_dim)))
    loss, acc = evaluate(model, cfg, x, y)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite evaluation loss {loss}")
    print(json.dumps({"accuracy": acc, "loss": loss, "n_samples": int(len(x))}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tnkit", description="Tensor-network training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="time the memory-mode sweep")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--quiet", action="store_true")
    b.set_defaults(func=cmd_bench)

    z = sub.add_parser("tensorize", help="decompose a dense matrix into an MPO")
    z.add_argument("--matrix", required=True)
    z.add_argument("--n", type=int, required=True)
    z.add_argument("--d", type=int, required=True)
    z.add_argument("--max-rank", type=int, default=None)
    z.add_argument("--out", required=True)
    z.set_defaults(func=cmd_tensorize)

    e = sub.add_parser("eval", help="report accuracy of a saved model on a CSV dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", default=None, help="defaults to config.txt next to the model")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
