"""Conditional normalizing-flow blocks (masked autoregressive and affine
coupling) and their stacking with exact log-density.

Every block maps (x in R^D, condition in R^c) -> (z in R^D, logdet) with
z_i = (x_i - mu_i) * exp(alpha_i). Final mu/alpha layers are zero-initialized
so each block starts as the identity; alpha is soft-clamped to +-ALPHA_CLAMP.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import (GradientTape, NumericError, ShapeError, Tensor, add,
                     concat, exp, flip, matmul, mul, relu, sub, sum_, tanh)

ALPHA_CLAMP = 5.0
LOG_2PI = math.log(2.0 * math.pi)


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _clamp_alpha(a: Tensor) -> Tensor:
    # s * tanh(a / s): smooth, bounded log-scales
    s = ALPHA_CLAMP
    return mul(Tensor(s), tanh(mul(a, Tensor(1.0 / s))))


def _clamp_alpha_np(a: np.ndarray) -> np.ndarray:
    return ALPHA_CLAMP * np.tanh(a / ALPHA_CLAMP)


def _made_masks(input_dim: int, hidden: int) -> tuple[np.ndarray, np.ndarray]:
    """Strictly autoregressive MADE masks for one hidden layer.

    Output i may depend on inputs 1..i-1 only; for input_dim == 1 the
    hidden layer sees only the condition.
    """
    deg_in = np.arange(1, input_dim + 1)
    if input_dim > 1:
        deg_hidden = (np.arange(hidden) % (input_dim - 1)) + 1
    else:
        deg_hidden = np.zeros(hidden, dtype=int)
    deg_out = np.arange(1, input_dim + 1)
    mask_in = (deg_hidden[None, :] >= deg_in[:, None]).astype(np.float64)
    mask_out = (deg_out[None, :] > deg_hidden[:, None]).astype(np.float64)
    return mask_in, mask_out


class MafBlock:
    """One masked autoregressive transform conditioned on a context vector."""

    def __init__(self, input_dim: int, cond_dim: int, hidden: int,
                 rng: np.random.Generator):
        self.input_dim = input_dim
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.mask_in, self.mask_out = _made_masks(input_dim, hidden)
        fan = input_dim + cond_dim
        self.w_x = Tensor(_uniform_init(rng, fan, (input_dim, hidden)), requires_grad=True)
        self.w_c = Tensor(_uniform_init(rng, fan, (cond_dim, hidden)), requires_grad=True)
        self.b_h = Tensor(_uniform_init(rng, fan, (hidden,)), requires_grad=True)
        # zero-initialized heads: the block starts as the identity map
        self.w_mu = Tensor(np.zeros((hidden, input_dim)), requires_grad=True)
        self.b_mu = Tensor(np.zeros(input_dim), requires_grad=True)
        self.w_a = Tensor(np.zeros((hidden, input_dim)), requires_grad=True)
        self.b_a = Tensor(np.zeros(input_dim), requires_grad=True)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in
                (("w_x", self.w_x), ("w_c", self.w_c), ("b_h", self.b_h),
                 ("w_mu", self.w_mu), ("b_mu", self.b_mu),
                 ("w_a", self.w_a), ("b_a", self.b_a))}

    def _mu_alpha(self, x: Tensor, d: Tensor) -> tuple[Tensor, Tensor]:
        h = relu(add(add(matmul(x, mul(self.w_x, Tensor(self.mask_in))),
                         matmul(d, self.w_c)), self.b_h))
        mu = add(matmul(h, mul(self.w_mu, Tensor(self.mask_out))), self.b_mu)
        alpha = _clamp_alpha(add(matmul(h, mul(self.w_a, Tensor(self.mask_out))), self.b_a))
        return mu, alpha

    def _mu_alpha_np(self, x: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.maximum(x @ (self.w_x.data * self.mask_in)
                       + d @ self.w_c.data + self.b_h.data, 0.0)
        mu = h @ (self.w_mu.data * self.mask_out) + self.b_mu.data
        alpha = _clamp_alpha_np(h @ (self.w_a.data * self.mask_out) + self.b_a.data)
        return mu, alpha

    def forward(self, x: Tensor, d: Tensor) -> tuple[Tensor, Tensor]:
        mu, alpha = self._mu_alpha(x, d)
        z = mul(sub(x, mu), exp(alpha))
        return z, sum_(alpha, axis=-1)

    def inverse(self, z: np.ndarray, d: np.ndarray) -> np.ndarray:
        x = np.zeros_like(z)
        for i in range(self.input_dim):
            mu, alpha = self._mu_alpha_np(x, d)
            x[:, i] = z[:, i] * np.exp(-alpha[:, i]) + mu[:, i]
        return x


class CouplingBlock:
    """Affine coupling transform: half the coordinates pass through unchanged."""

    def __init__(self, input_dim: int, cond_dim: int, hidden: int,
                 rng: np.random.Generator, parity: int = 0):
        self.input_dim = input_dim
        self.cond_dim = cond_dim
        self.mask = ((np.arange(input_dim) % 2) == (parity % 2)).astype(np.float64)
        fan = input_dim + cond_dim
        self.w_h = Tensor(_uniform_init(rng, fan, (fan, hidden)), requires_grad=True)
        self.b_h = Tensor(_uniform_init(rng, fan, (hidden,)), requires_grad=True)
        self.w_mu = Tensor(np.zeros((hidden, input_dim)), requires_grad=True)
        self.b_mu = Tensor(np.zeros(input_dim), requires_grad=True)
        self.w_a = Tensor(np.zeros((hidden, input_dim)), requires_grad=True)
        self.b_a = Tensor(np.zeros(input_dim), requires_grad=True)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in
                (("w_h", self.w_h), ("b_h", self.b_h),
                 ("w_mu", self.w_mu), ("b_mu", self.b_mu),
                 ("w_a", self.w_a), ("b_a", self.b_a))}

    def _mu_alpha(self, x: Tensor, d: Tensor) -> tuple[Tensor, Tensor]:
        frozen = mul(x, Tensor(self.mask))
        h = relu(add(matmul(concat([frozen, d], axis=1), self.w_h), self.b_h))
        active = Tensor(1.0 - self.mask)
        mu = mul(add(matmul(h, self.w_mu), self.b_mu), active)
        alpha = mul(_clamp_alpha(add(matmul(h, self.w_a), self.b_a)), active)
        return mu, alpha

    def _mu_alpha_np(self, x: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.maximum(np.concatenate([x * self.mask, d], axis=1) @ self.w_h.data
                       + self.b_h.data, 0.0)
        active = 1.0 - self.mask
        mu = (h @ self.w_mu.data + self.b_mu.data) * active
        alpha = _clamp_alpha_np(h @ self.w_a.data + self.b_a.data) * active
        return mu, alpha

    def forward(self, x: Tensor, d: Tensor) -> tuple[Tensor, Tensor]:
        mu, alpha = self._mu_alpha(x, d)
        z = mul(sub(x, mu), exp(alpha))
        return z, sum_(alpha, axis=-1)

    def inverse(self, z: np.ndarray, d: np.ndarray) -> np.ndarray:
        # mu/alpha depend only on the frozen half, which z carries unchanged
        mu, alpha = self._mu_alpha_np(z, d)
        return z * np.exp(-alpha) + mu


class FlowStack:
    """Stacked conditional flow blocks with dimension reversal in between.

    Base distribution is the standard normal on R^D.
    """

    def __init__(self, input_dim: int, cond_dim: int, n_blocks: int = 6,
                 hidden: int = 32, kind: str = "maf",
                 rng: Optional[np.random.Generator] = None):
        if kind not in ("maf", "coupling"):
            raise ValueError(f"unknown flow kind {kind!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.cond_dim = cond_dim
        self.kind = kind
        if kind == "maf":
            self.blocks = [MafBlock(input_dim, cond_dim, hidden, rng)
                           for _ in range(n_blocks)]
        else:
            self.blocks = [CouplingBlock(input_dim, cond_dim, hidden, rng, parity=k)
                           for k in range(n_blocks)]

    def parameters(self, prefix: str = "flow") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, b in enumerate(self.blocks):
            out.update(b.parameters(f"{prefix}.block{k}"))
        return out

    def _check(self, x_cols: int, d_cols: int):
        if x_cols != self.input_dim:
            raise ShapeError(f"flow expects {self.input_dim} input dims, got {x_cols}")
        if d_cols != self.cond_dim:
            raise ShapeError(f"flow expects {self.cond_dim} condition dims, got {d_cols}")

    def forward(self, x: Tensor, d: Tensor) -> tuple[Tensor, Tensor]:
        """(z, total logdet) for a batch of rows."""
        self._check(x.shape[-1], d.shape[-1])
        logdet: Optional[Tensor] = None
        for k, block in enumerate(self.blocks):
            x, ld = block.forward(x, d)
            if not np.all(np.isfinite(x.data)):
                raise NumericError(f"non-finite flow output at block {k}")
            logdet = ld if logdet is None else add(logdet, ld)
            if k + 1 < len(self.blocks) and self.input_dim > 1:
                x = flip(x, axis=-1)
        return x, logdet

    def inverse(self, z: np.ndarray, d: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        self._check(z.shape[-1], d.shape[-1])
        for k in range(len(self.blocks) - 1, -1, -1):
            if k + 1 < len(self.blocks) and self.input_dim > 1:
                z = z[:, ::-1].copy()
            z = self.blocks[k].inverse(z, d)
        return z

    def log_prob(self, x: Tensor, d: Tensor) -> Tensor:
        """log p(x | d) = log N(f(x; d); 0, I) + sum of block logdets."""
        z, logdet = self.forward(x, d)
        z_sq = sum_(mul(z, z), axis=-1)
        log_q = sub(Tensor(-0.5 * self.input_dim * LOG_2PI),
                    mul(Tensor(0.5), z_sq))
        return add(log_q, logdet)

    def log_prob_np(self, x: np.ndarray, d: np.ndarray) -> np.ndarray:
        return self.log_prob(Tensor(np.asarray(x, dtype=np.float64)),
                             Tensor(np.asarray(d, dtype=np.float64))).data

    def sample(self, count: int, d: np.ndarray, seed: int) -> np.ndarray:
        """Draw count rows by inverting base-distribution samples; deterministic per seed."""
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((count, self.input_dim))
        d = np.asarray(d, dtype=np.float64)
        if d.ndim == 1:
            d = np.broadcast_to(d, (count, d.shape[0])).copy()
        return self.inverse(z, d)
