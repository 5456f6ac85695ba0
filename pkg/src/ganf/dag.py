"""Differentiable acyclicity constraint and augmented-Lagrangian bookkeeping.

The constraint h(A) = tr(e^{A o A}) - n is zero exactly when the support
of A is acyclic. Its closed-form gradient is (e^{A o A})^T o 2A.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .matexp import expm, matrix_exponential
from .tensor import ShapeError, Tensor, mul, sub, sum_


def _check_square(a: np.ndarray):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency matrix must be square, got shape {a.shape}")


def acyclicity(a: np.ndarray) -> float:
    """h(A) = tr(e^{A o A}) - n; non-negative, zero iff acyclic support."""
    a = np.asarray(a, dtype=np.float64)
    _check_square(a)
    # mathematically >= 0 since A o A is entrywise non-negative; clamp roundoff
    return max(float(np.trace(expm(a * a)) - a.shape[0]), 0.0)


def acyclicity_grad(a: np.ndarray) -> np.ndarray:
    """Closed-form gradient (e^{A o A})^T o 2A."""
    a = np.asarray(a, dtype=np.float64)
    _check_square(a)
    return expm(a * a).T * (2.0 * a)


def acyclicity_tensor(a: Tensor) -> Tensor:
    """h(A) as a tape expression, so dL/dA flows through the constraint."""
    _check_square(a.data)
    n = a.shape[0]
    e = matrix_exponential(mul(a, a))
    return sub(sum_(mul(e, Tensor(np.eye(n)))), Tensor(float(n)))


@dataclass(frozen=True)
class LagrangianState:
    """Dual variable, penalty weight, and outer-iteration bookkeeping."""
    lam: float
    c: float = 0.0
    k: int = 0
    h_prev: Optional[float] = None

    @classmethod
    def initial(cls, rng: np.random.Generator) -> "LagrangianState":
        # c starts at 0 per the outer-loop schedule; lam is drawn uniform
        return cls(lam=float(rng.uniform(0.0, 1.0)), c=0.0, k=0, h_prev=None)


def augmented_lagrangian(nll: Tensor, a: Tensor, state: LagrangianState) -> Tensor:
    """L_c = nll + lam * h(A) + (c/2) * h(A)^2."""
    h = acyclicity_tensor(a)
    out = nll
    if state.lam != 0.0:
        out = out + mul(Tensor(state.lam), h)
    if state.c != 0.0:
        out = out + mul(Tensor(0.5 * state.c), mul(h, h))
    return out


def dual_penalty_update(state: LagrangianState, h_now: float,
                        eta: float = 10.0, gamma: float = 0.5) -> LagrangianState:
    """One outer-iteration update: lam <- lam + c*h; c grows by eta on stall.

    c starts at 0 and, because eta-scaling of zero is a fixed point, is
    bootstrapped to 1 the first time progress stalls.
    """
    lam = state.lam + state.c * h_now
    c = state.c
    if state.k > 0 and state.h_prev is not None and abs(h_now) > gamma * abs(state.h_prev):
        c = eta * c if c > 0.0 else 1.0
    return replace(state, lam=lam, c=c, k=state.k + 1, h_prev=h_now)


def threshold_dag(a: np.ndarray, eps: float) -> tuple[list[tuple[int, int, float]], bool]:
    """Edges (parent j -> child i, weight) with |A_ij| > eps, plus an acyclicity verdict.

    Acyclicity is reported (via topological sort), not enforced.
    """
    a = np.asarray(a, dtype=np.float64)
    _check_square(a)
    if eps <= 0:
        raise ValueError("threshold eps must be positive")
    n = a.shape[0]
    edges = [(j, i, float(a[i, j]))
             for i in range(n) for j in range(n)
             if i != j and abs(a[i, j]) > eps]
    return edges, is_acyclic(n, [(j, i) for j, i, _ in edges])


def is_acyclic(n: int, edges: list[tuple[int, int]]) -> bool:
    """Kahn's algorithm on an edge list of (parent, child) pairs."""
    indeg = [0] * n
    children: list[list[int]] = [[] for _ in range(n)]
    for j, i in edges:
        children[j].append(i)
        indeg[i] += 1
    queue = [v for v in range(n) if indeg[v] == 0]
    seen = 0
    while queue:
        v = queue.pop()
        seen += 1
        for w in children[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                queue.append(w)
    return seen == n
