"""Joint training: Adam on the augmented Lagrangian inside, dual/penalty
updates outside, with validation-driven model selection and checkpointing.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict, field
from typing import Optional

import numpy as np

from .dag import (LagrangianState, acyclicity, augmented_lagrangian,
                  dual_penalty_update)
from .model import GanfModel
from .tensor import GradientTape, NumericError, Tensor


class TrainingAbort(RuntimeError):
    """Training hit a non-recoverable numeric failure."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or incompatible."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.1
    grad_clip: float = 1.0
    clip_mode: str = "global"           # or "elementwise"
    flow_blocks: int = 6
    hidden_dim: int = 32
    flow_hidden: int = 32
    flow_type: str = "maf"
    batch_size: int = 32
    inner_epochs: int = 10
    max_outer_iters: int = 20
    h_tol: float = 1e-8
    eta: float = 10.0
    gamma: float = 0.5
    plateau_patience: int = 3
    seed: int = 0
    mode: str = "graph"

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.eta <= 1.0:
            raise ValueError(f"eta must exceed 1, got {self.eta}")
        for name in ("lr", "lr_decay", "grad_clip", "batch_size", "inner_epochs",
                     "max_outer_iters", "h_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class Adam:
    """Standard Adam with per-parameter moments."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            if p.grad is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * p.grad
            self.v[name] = b2 * self.v[name] + (1 - b2) * p.grad ** 2
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(params: dict[str, Tensor], clip: float, mode: str = "global") -> float:
    """Clip gradients in place; returns the pre-clip global norm."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if mode == "global":
        if total > clip:
            scale = clip / total
            for g in grads:
                g *= scale
    elif mode == "elementwise":
        for g in grads:
            np.clip(g, -clip, clip, out=g)
    else:
        raise ValueError(f"unknown clip mode {mode!r}")
    return total


@dataclass
class TrainState:
    model: GanfModel
    lagrangian: LagrangianState
    optimizer: Adam
    lr: float
    best_val: float = -np.inf
    best_arrays: Optional[dict[str, np.ndarray]] = None
    best_val_seen: float = -np.inf
    stale_epochs: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def _validation_log_density(model: GanfModel, windows: np.ndarray,
                            batch_size: int) -> float:
    totals, _ = model.score_windows(windows, batch_size=batch_size)
    return float(-totals.mean())


def inner_optimize(state: TrainState, train_windows: np.ndarray,
                   val_windows: np.ndarray, config: TrainConfig,
                   rng: np.random.Generator) -> TrainState:
    """One inner subproblem: ``inner_epochs`` of Adam on the augmented Lagrangian."""
    model = state.model
    params = model.parameters()
    n_windows = train_windows.shape[0]
    for _ in range(config.inner_epochs):
        order = rng.permutation(n_windows)
        epoch_loss = 0.0
        epoch_nll = 0.0
        n_batches = 0
        for lo in range(0, n_windows, config.batch_size):
            batch = train_windows[order[lo:lo + config.batch_size]]
            for p in params.values():
                p.zero_grad()
            tape = GradientTape()
            with tape:
                nll = model.batch_nll(batch)
                loss = augmented_lagrangian(nll, model.adjacency, state.lagrangian) \
                    if model.mode == "graph" else nll
            if not np.isfinite(loss.item()):
                raise TrainingAbort(
                    f"non-finite loss at epoch {state.epoch}; "
                    f"best validation snapshot is retained in TrainState.best_arrays")
            tape.backward(loss)
            clip_gradients(params, config.grad_clip, config.clip_mode)
            state.optimizer.step(params, state.lr)
            model.remask_diagonal()
            epoch_loss += loss.item()
            epoch_nll += nll.item()
            n_batches += 1
        val_ld = _validation_log_density(model, val_windows, config.batch_size) \
            if val_windows.size else float("nan")
        record = {
            "kind": "epoch", "outer": state.lagrangian.k, "epoch": state.epoch,
            "train_loss": epoch_loss / n_batches, "train_nll": epoch_nll / n_batches,
            "val_log_density": val_ld, "lr": state.lr,
            "h": acyclicity(model.adjacency.data),
            "lambda": state.lagrangian.lam, "c": state.lagrangian.c,
        }
        # model selection + plateau learning-rate decay on validation log-density.
        # In graph mode only constraint-feasible iterates are eligible: an early
        # high-likelihood snapshot with a cyclic A is not a usable model.
        feasible = model.mode != "graph" or abs(record["h"]) < config.h_tol
        if feasible and np.isfinite(val_ld) and val_ld > state.best_val:
            state.best_val = val_ld
            state.best_arrays = {k: v.copy() for k, v in model.all_arrays().items()}
        if np.isfinite(val_ld) and val_ld > state.best_val_seen:
            state.best_val_seen = val_ld
            state.stale_epochs = 0
        else:
            state.stale_epochs += 1
            if state.stale_epochs >= config.plateau_patience:
                state.lr *= config.lr_decay
                state.stale_epochs = 0
                record["lr_decayed_to"] = state.lr
        state.history.append(record)
        state.epoch += 1
    return state


def train(train_windows: np.ndarray, val_windows: np.ndarray,
          config: TrainConfig) -> tuple[GanfModel, np.ndarray, list[dict]]:
    """Full outer loop; returns (best model, adjacency, history).

    Stops when |h(A)| < h_tol or after ``max_outer_iters`` outer iterations
    (the latter flagged in the history).
    """
    rng = np.random.default_rng(config.seed)
    n_series = train_windows.shape[1]
    input_dim = train_windows.shape[3]
    model = GanfModel(
        n_series=n_series, input_dim=input_dim, hidden_dim=config.hidden_dim,
        flow_blocks=config.flow_blocks, flow_hidden=config.flow_hidden,
        flow_type=config.flow_type, mode=config.mode, seed=config.seed)
    state = TrainState(model=model, lagrangian=LagrangianState.initial(rng),
                       optimizer=Adam(), lr=config.lr)
    if model.mode != "graph":
        state.lagrangian = LagrangianState(lam=0.0, c=0.0)

    converged = False
    while state.lagrangian.k < config.max_outer_iters:
        # each outer subproblem is a fresh minimization: restart the schedule
        state.lr = config.lr
        state.stale_epochs = 0
        inner_optimize(state, train_windows, val_windows, config, rng)
        h_now = acyclicity(model.adjacency.data)
        state.lagrangian = dual_penalty_update(
            state.lagrangian, h_now, eta=config.eta, gamma=config.gamma)
        state.history.append({
            "kind": "outer", "outer": state.lagrangian.k, "h": h_now,
            "lambda": state.lagrangian.lam, "c": state.lagrangian.c,
        })
        if abs(h_now) < config.h_tol:
            converged = True
            break

    if state.best_arrays is not None:
        _load_arrays(model, state.best_arrays)
    final_h = acyclicity(model.adjacency.data)
    state.history.append({
        "kind": "final", "converged": converged or abs(final_h) < config.h_tol,
        "warning": None if converged or abs(final_h) < config.h_tol
        else f"outer budget exhausted with |h|={abs(final_h):.3e}",
        "h": final_h, "best_val_log_density": state.best_val,
    })
    return model, model.adjacency.data.copy(), state.history


def _load_arrays(model: GanfModel, arrays: dict[str, np.ndarray]):
    targets = model.parameters()
    targets["A"] = model.adjacency
    for name, value in arrays.items():
        if name not in targets:
            raise CheckpointError(f"unknown array {name!r} for this model")
        if targets[name].shape != value.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: model has {targets[name].shape}, "
                f"checkpoint has {value.shape}")
        targets[name].data = value.copy()


# ------------------------------------------------------------- checkpoints

_MAGIC = b"GANFCKPT"
_VERSION = 1


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def checkpoint_save(path, model: GanfModel, extra: Optional[dict] = None):
    """Binary container: magic, version, JSON header, little-endian f64 arrays."""
    arrays = model.all_arrays()
    names = sorted(arrays)
    header = {
        "config": model.config(),
        "config_hash": _config_hash(model.config()),
        "extra": extra or {},
        "arrays": [{"name": k, "shape": list(arrays[k].shape)} for k in names],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def checkpoint_load(path) -> GanfModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise CheckpointError(f"{path}: truncated header")
        version, blob_len = struct.unpack("<II", head)
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise CheckpointError(f"{path}: truncated header")
        header = json.loads(blob)
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    model = GanfModel(**header["config"])
    _load_arrays(model, arrays)
    return model


def write_history(path, history: list[dict]):
    """Line-delimited JSON records."""
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")
