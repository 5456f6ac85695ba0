"""History and dependency encoding for multiple interacting series.

A single LSTM cell, shared across all nodes, summarizes each series'
history into hidden states. A graph convolution then aggregates parent
hidden states and own history into fixed-length dependency vectors:

    D_t = ReLU(A H_t W1 + H_{t-1} W2) W3

with H_0 = 0 for the t = 1 boundary. The adjacency diagonal must be zero:
self-history enters through the H_{t-1} W2 term, never through self-loops.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import (NumericError, ShapeError, Tensor, add, matmul, mul,
                     relu, reshape, sigmoid, tanh)


class ContractError(ValueError):
    """A caller-side contract was violated (e.g. nonzero adjacency diagonal)."""


def masked_diag(a: np.ndarray) -> np.ndarray:
    """Copy of a square matrix with the diagonal zeroed."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"masked_diag expects a square matrix, got {a.shape}")
    out = a.copy()
    np.fill_diagonal(out, 0.0)
    return out


def offdiag_mask(n: int) -> np.ndarray:
    return 1.0 - np.eye(n)


class LstmCell:
    """Standard LSTM cell with one shared parameter set for all nodes."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        bound = 1.0 / math.sqrt(hidden_dim)
        u = lambda shape: rng.uniform(-bound, bound, size=shape)
        self.w_x = Tensor(u((input_dim, 4 * hidden_dim)), requires_grad=True)
        self.w_h = Tensor(u((hidden_dim, 4 * hidden_dim)), requires_grad=True)
        self.b = Tensor(u((4 * hidden_dim,)), requires_grad=True)

    def parameters(self, prefix: str = "rnn") -> dict[str, Tensor]:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h,
                f"{prefix}.b": self.b}

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        d = self.hidden_dim
        gates = add(add(matmul(x, self.w_x), matmul(h, self.w_h)), self.b)
        i = sigmoid(gates[:, 0 * d:1 * d])
        f = sigmoid(gates[:, 1 * d:2 * d])
        g = tanh(gates[:, 2 * d:3 * d])
        o = sigmoid(gates[:, 3 * d:4 * d])
        c_new = add(mul(f, c), mul(i, g))
        h_new = mul(o, tanh(c_new))
        return h_new, c_new


class EncoderParams:
    """The three square transforms of the dependency aggregation."""

    def __init__(self, hidden_dim: int, rng: np.random.Generator):
        self.hidden_dim = hidden_dim
        bound = 1.0 / math.sqrt(hidden_dim)
        u = lambda: rng.uniform(-bound, bound, size=(hidden_dim, hidden_dim))
        self.w1 = Tensor(u(), requires_grad=True)
        self.w2 = Tensor(u(), requires_grad=True)
        self.w3 = Tensor(u(), requires_grad=True)

    def parameters(self, prefix: str = "enc") -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.w2": self.w2,
                f"{prefix}.w3": self.w3}


def encode_hidden(cell: LstmCell, x: np.ndarray) -> list[Tensor]:
    """Unroll the shared cell over a (B, n, T, D) batch.

    Returns a list over t of (B*n, hidden) tensors; zero initial state.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected a (B, n, T, D) array, got shape {x.shape}")
    b, n, t_len, d_in = x.shape
    if d_in != cell.input_dim:
        raise ShapeError(f"encoder expects {cell.input_dim} attributes, got {d_in}")
    rows = b * n
    h = Tensor(np.zeros((rows, cell.hidden_dim)))
    c = Tensor(np.zeros((rows, cell.hidden_dim)))
    hidden: list[Tensor] = []
    for t in range(t_len):
        step_in = Tensor(np.ascontiguousarray(x[:, :, t, :].reshape(rows, d_in)))
        h, c = cell.step(step_in, h, c)
        if not np.all(np.isfinite(h.data)):
            bad = np.argwhere(~np.isfinite(h.data))[0]
            raise NumericError(f"non-finite hidden state at node row {bad[0]}, t={t}")
        hidden.append(h)
    return hidden


def encode_dependencies(params: EncoderParams, hidden: list[Tensor],
                        a: Tensor, batch: int, n: int) -> list[Tensor]:
    """Dependency vectors D_t = ReLU(A H_t W1 + H_{t-1} W2) W3 per time step.

    ``a`` is the (n, n) adjacency tensor; its diagonal must already be
    masked to zero. Returns a list over t of (B*n, hidden) tensors.
    """
    if a.shape != (n, n):
        raise ShapeError(f"adjacency shape {a.shape} does not match n={n}")
    if np.any(np.diag(a.data) != 0.0):
        raise ContractError("adjacency diagonal must be zero (masked) before aggregation")
    d = params.hidden_dim
    h_prev: Optional[Tensor] = None
    out: list[Tensor] = []
    for h_flat in hidden:
        h_t = reshape(h_flat, (batch, n, d))
        pre = matmul(matmul(a, h_t), params.w1)
        if h_prev is not None:
            pre = add(pre, matmul(h_prev, params.w2))
        dep = matmul(relu(pre), params.w3)
        out.append(reshape(dep, (batch * n, d)))
        h_prev = h_t
    return out
