"""
Optimizers, datasets, run configuration and the training loop.

A run is fully described by a :class:`TrainConfig`; with a fixed ``seed``
the metrics it writes are byte-identical across runs (wall-clock timings go
to a separate file).
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from tnkit import autodiff as ad
from tnkit.autodiff import Variable, cross_entropy, mse
from tnkit.models import MPSLayer, TTN, embed
from tnkit.network import TensorNetwork

__all__ = [
    "Adam", "adam_step", "AdamState", "cross_entropy", "mse",
    "two_gaussians", "parity", "read_csv", "write_csv",
    "TrainConfig", "ConfigError", "NumericError", "build_model", "load_dataset",
    "evaluate", "train",
]


class ConfigError(ValueError):
    """Invalid configuration or unreadable dataset."""


class NumericError(ArithmeticError):
    """Loss or parameters became non-finite."""


###############################################################################
#                                    ADAM                                     #
###############################################################################
@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
              state: AdamState, lr: float, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """
    One bias-corrected Adam update, in place on ``params``.

    ``weight_decay`` is classic L2: ``weight_decay * param`` is added to the
    gradient before the moment updates. Missing gradients count as zero.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ValueError("params, grads and optimizer state have different lengths")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.zeros_like(p) if g is None else g
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a list of :class:`Variable` parameters (reads ``.grad``)."""

    def __init__(self, params: Sequence[Variable], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        if not self.params:
            raise ValueError("optimizer got an empty parameter list")
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.value for p in self.params], [p.grad for p in self.params],
                  self.state, self.lr, self.betas, self.eps, self.weight_decay)


###############################################################################
#                                  DATASETS                                   #
###############################################################################
def two_gaussians(n_samples: int, n_features: int, seed=0, spread: float = 0.15,
                  means: Tuple[float, float] = (0.35, 0.65)) -> Tuple[np.ndarray, np.ndarray]:
    """Two isotropic Gaussian classes in ``[0, 1]^n`` (clipped)."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n_samples)
    centers = np.where(y[:, None] == 1, means[1], means[0])
    x = np.clip(centers + spread * rng.normal(size=(n_samples, n_features)), 0.0, 1.0)
    return x, y.astype(np.int64)


def parity(n_samples: int, n_features: int, seed=0) -> Tuple[np.ndarray, np.ndarray]:
    """Random bit strings labelled by the parity of their sum."""
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, size=(n_samples, n_features)).astype(np.float64)
    return x, (x.sum(axis=1) % 2).astype(np.int64)


def read_csv(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """Read a CSV with a header row, float features and an integer label last."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    if len(rows) < 2:
        raise ConfigError(f"dataset {path} has no data rows")
    body = [r for r in rows[1:] if r]
    width = len(rows[0])
    if width < 2 or any(len(r) != width for r in body):
        raise ConfigError(f"dataset {path} has ragged rows or fewer than two columns")
    try:
        x = np.array([[float(v) for v in r[:-1]] for r in body])
        labels = [float(r[-1]) for r in body]
    except ValueError as exc:
        raise ConfigError(f"dataset {path}: {exc}") from exc
    if any(l != int(l) for l in labels):
        raise ConfigError(f"dataset {path}: labels must be integers")
    return x, np.array(labels, dtype=np.int64)


def write_csv(path: Union[str, Path], x: np.ndarray, y: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
        for row, label in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


###############################################################################
#                                   CONFIG                                    #
###############################################################################
def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class TrainConfig:
    """Everything needed to reproduce a training run."""

    model: str = "mps_layer"            # mps_layer | ttn
    n_features: int = 16                # input features (the layer adds an output core)
    in_dim: int = 2
    out_dim: int = 2
    bond_dim: int = 8
    out_position: Optional[int] = None
    init_std: float = 1e-9
    arity: int = 2                      # ttn only
    embedding: str = "unit"
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    optimizer: str = "adam"
    seed: int = 0
    auto_stack: bool = True
    auto_unbind: bool = False
    inline_input: bool = False
    inline_mats: bool = False
    traced: bool = True
    dataset: str = "two_gaussians"      # two_gaussians | parity | path to a CSV file
    n_samples: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ["n_features", "in_dim", "out_dim", "bond_dim", "batch_size",
                    "learning_rate", "n_samples", "arity"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "weight_decay", "init_std", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.model not in ("mps_layer", "ttn"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.optimizer != "adam":
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, raw: Dict[str, str]) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, text in raw.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kind = str(kinds[key])
            try:
                if text.strip().lower() in ("none", "") and "Optional" in kind:
                    values[key] = None
                elif "bool" in kind:
                    values[key] = _parse_bool(text)
                elif "int" in kind:
                    values[key] = int(text)
                elif "float" in kind:
                    values[key] = float(text)
                else:
                    values[key] = text.strip()
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        return cls(**values)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TrainConfig":
        return cls.from_dict(read_kv(path))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def read_kv(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a flat ``key = value`` file (``#`` comments allowed)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return dict(parser["run"])


###############################################################################
#                                  TRAINING                                   #
###############################################################################
def build_model(cfg: TrainConfig) -> TensorNetwork:
    if cfg.model == "mps_layer":
        return MPSLayer(n_features=cfg.n_features + 1, in_dim=cfg.in_dim, out_dim=cfg.out_dim,
                        bond_dim=cfg.bond_dim, out_position=cfg.out_position,
                        init_std=cfg.init_std, seed=cfg.seed,
                        auto_stack=cfg.auto_stack, auto_unbind=cfg.auto_unbind,
                        inline_input=cfg.inline_input, inline_mats=cfg.inline_mats)
    depth = int(round(np.log(cfg.n_features) / np.log(cfg.arity))) if cfg.arity > 1 else 1
    if cfg.arity ** depth != cfg.n_features:
        raise ConfigError(f"ttn needs n_features = arity**depth, got {cfg.n_features}")
    return TTN(cfg.arity, depth, cfg.in_dim, cfg.bond_dim, out_dim=cfg.out_dim,
               init_std=cfg.init_std if cfg.init_std > 0 else 1.0, seed=cfg.seed,
               auto_stack=cfg.auto_stack, auto_unbind=cfg.auto_unbind)


def load_dataset(cfg: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    if cfg.dataset == "two_gaussians":
        x, y = two_gaussians(cfg.n_samples, cfg.n_features, seed=cfg.seed)
    elif cfg.dataset == "parity":
        x, y = parity(cfg.n_samples, cfg.n_features, seed=cfg.seed)
    else:
        x, y = read_csv(cfg.dataset)
    if x.shape[1] != cfg.n_features:
        raise ConfigError(f"dataset has {x.shape[1]} features, config says {cfg.n_features}")
    if y.min() < 0 or y.max() >= cfg.out_dim:
        raise ConfigError(f"labels must lie in [0, {cfg.out_dim})")
    return x, y


def _embed(cfg: TrainConfig, x: np.ndarray) -> np.ndarray:
    try:
        return embed(x, cfg.embedding, cfg.in_dim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def evaluate(model: TensorNetwork, cfg: TrainConfig, x: np.ndarray, y: np.ndarray,
             batch_size: Optional[int] = None) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy of ``model`` on ``(x, y)``."""
    batch_size = batch_size or cfg.batch_size
    total_loss, correct = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            scores = model(_embed(cfg, xb))
            total_loss += cross_entropy(scores, yb).item() * len(xb)
            correct += int(np.sum(np.argmax(scores.value, axis=1) == yb))
    return total_loss / len(x), correct / len(x)


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss ({value}) {where}")


def train(cfg: TrainConfig, out_dir: Union[str, Path, None] = None, log=None) -> dict:
    """
    Train according to ``cfg``; write artifacts to ``out_dir`` if given.

    Artifacts: ``metrics.jsonl`` (one record per epoch, epoch 0 is the
    initial evaluation), ``timing.jsonl`` (wall-clock per epoch),
    ``model.tkro`` (parameters after reset), ``config.txt`` and, for
    synthetic datasets, ``train.csv``.
    """
    x, y = load_dataset(cfg)
    model = build_model(cfg)
    if cfg.traced:
        model.trace(np.zeros((1, cfg.n_features, cfg.in_dim)))
    # parameters are collected after tracing: tracing may move them into stacked buffers
    opt = Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        if cfg.dataset in ("two_gaussians", "parity"):
            write_csv(out / "train.csv", x, y)
    records, timings = [], []

    def emit(epoch: int, batch_loss: float, t0: float) -> None:
        loss, acc = evaluate(model, cfg, x, y)
        _check_finite(loss, f"at epoch {epoch}")
        rec = {"epoch": epoch, "loss": loss, "accuracy": acc, "batch_loss": batch_loss,
               "peak_live_tensor_bytes": int(model.memory.peak_bytes)}
        records.append(rec)
        timings.append({"epoch": epoch, "wall_ms": (time.perf_counter() - t0) * 1e3})
        if log is not None:
            log(f"epoch {epoch:4d}  loss {loss:.6f}  acc {acc:.4f}")

    t0 = time.perf_counter()
    model.memory.reset_peak()
    emit(0, float("nan"), t0)
    records[0]["batch_loss"] = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.memory.reset_peak()
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            scores = model(_embed(cfg, x[idx]))
            loss = cross_entropy(scores, y[idx])
            _check_finite(loss.item(), f"in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(idx))
        emit(epoch, float(np.sum(losses) / len(x)), t0)

    model.reset()
    if out is not None:
        with (out / "metrics.jsonl").open("w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with (out / "timing.jsonl").open("w") as fh:
            for rec in timings:
                fh.write(json.dumps(rec) + "\n")
        model.save(out / "model.tkro")
    return {"model": model, "records": records, "timings": timings,
            "final_accuracy": records[-1]["accuracy"]}
