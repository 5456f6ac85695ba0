"""Matrix exponential via scaling-and-squaring, differentiable on the tape.

The backward pass uses the block-matrix identity for the adjoint of the
Frechet derivative: the upper-right block of expm([[M^T, G], [0, M^T]])
equals the vector-Jacobian product of expm at M applied to G.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, _emit

# Pade-13 numerator coefficients (Higham's scaling-and-squaring method)
_B13 = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
)
_THETA13 = 5.371920351148152


def _check_square(m: np.ndarray, op: str):
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{op}: expected a square matrix, got shape {m.shape}")


def expm(m: np.ndarray) -> np.ndarray:
    """e^M by scaling-and-squaring with a degree-13 Pade core."""
    _check_square(m, "expm")
    n = m.shape[0]
    norm = np.linalg.norm(m, 1)
    s = 0
    if norm > _THETA13:
        s = max(0, int(math.ceil(math.log2(norm / _THETA13))))
    a = m / (2.0 ** s)

    ident = np.eye(n)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a2 @ a4
    b = _B13
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
    r = np.linalg.solve(v - u, v + u)
    for _ in range(s):
        r = r @ r
    return r


def expm_series(m: np.ndarray, terms: int = 20) -> np.ndarray:
    """Truncated Taylor series sum_{k<=terms} M^k / k!; test fallback."""
    _check_square(m, "expm_series")
    out = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for k in range(1, terms + 1):
        term = term @ m / k
        out = out + term
    return out


def expm_vjp(m: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Adjoint Frechet derivative of expm at M applied to G."""
    n = m.shape[0]
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = m.T
    block[n:, n:] = m.T
    block[:n, n:] = g
    return expm(block)[:n, n:]


def matrix_exponential(m: Tensor) -> Tensor:
    """Differentiable e^M for a square tape tensor."""
    _check_square(m.data, "matrix_exponential")
    md = m.data
    return _emit([m], expm(md), lambda g: (expm_vjp(md, g),))
