import numpy as np
import pytest
import scipy.linalg

from ganf.matexp import expm, expm_series, expm_vjp, matrix_exponential
from ganf.tensor import GradientTape, ShapeError, Tensor, sum_, mul


def test_expm_zero_is_identity():
    np.testing.assert_allclose(expm(np.zeros((3, 3))), np.eye(3), atol=1e-15)


def test_expm_diagonal():
    out = expm(np.diag([1.0, 2.0]))
    np.testing.assert_allclose(out, np.diag([np.e, np.e ** 2]), rtol=1e-14)


def test_expm_symmetric_two_cycle_trace():
    m = np.array([[0.0, 1.0], [1.0, 0.0]])
    # eigenvalues +-1, so tr e^M = e + 1/e = 2 cosh(1)
    assert abs(np.trace(expm(m)) - 2.0 * np.cosh(1.0)) < 1e-12


def test_expm_non_square_raises():
    with pytest.raises(ShapeError):
        expm(np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("scale", [0.5, 3.0, 40.0])
def test_expm_matches_scipy(seed, scale):
    rng = np.random.default_rng(seed)
    m = scale * rng.normal(size=(6, 6))
    np.testing.assert_allclose(expm(m), scipy.linalg.expm(m),
                               rtol=1e-9, atol=1e-9)


def test_expm_series_agrees_for_small_norm():
    rng = np.random.default_rng(1)
    m = rng.uniform(-1, 1, size=(5, 5))
    m *= 1.0 / np.linalg.norm(m, np.inf)
    assert np.max(np.abs(expm(m) - expm_series(m, terms=20))) < 1e-10


def test_expm_vjp_matches_finite_differences():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(4, 4))
    g = rng.normal(size=(4, 4))
    got = expm_vjp(m, g)
    step = 1e-6
    fd = np.zeros_like(m)
    for i in range(4):
        for j in range(4):
            mp = m.copy(); mp[i, j] += step
            mm = m.copy(); mm[i, j] -= step
            fd[i, j] = np.sum(g * (expm(mp) - expm(mm))) / (2 * step)
    np.testing.assert_allclose(got, fd, rtol=1e-5, atol=1e-7)


def test_matrix_exponential_tape_gradient():
    rng = np.random.default_rng(3)
    m0 = rng.normal(size=(3, 3))
    w = rng.normal(size=(3, 3))
    m = Tensor(m0, requires_grad=True)
    with GradientTape() as tape:
        loss = sum_(mul(matrix_exponential(m), Tensor(w)))
    tape.backward(loss)
    np.testing.assert_allclose(m.grad, expm_vjp(m0, w), rtol=1e-12)


def test_trace_gradient_is_transpose():
    # d tr(e^M) / dM = (e^M)^T
    rng = np.random.default_rng(4)
    m0 = rng.normal(size=(4, 4))
    m = Tensor(m0, requires_grad=True)
    with GradientTape() as tape:
        loss = sum_(mul(matrix_exponential(m), Tensor(np.eye(4))))
    tape.backward(loss)
    np.testing.assert_allclose(m.grad, expm(m0).T, rtol=1e-10, atol=1e-12)
