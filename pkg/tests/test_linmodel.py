"""Linear monotone model: operator, Fourier oracle and the three solvers.

Tags: [TRIVIAL] structural, [DERIVED] closed-form or cross-method oracles, [PAPER] properties the theory asserts.
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from torusmfg.grid import GridField, GridVectorField, TorusGrid, inner
from torusmfg.linmodel import LinProblem, lin_apply, lin_oracle, lin_solve
from torusmfg.monotone import random_trig_field

TWO_PI = 2 * np.pi
METHODS = ("variational", "bilinear", "continuation")


def cos_problem(n: int = 64, b: float = 0.3) -> LinProblem:
    g = TorusGrid(1, n)
    return LinProblem.constant_drift(g, b, g.field(lambda x: np.cos(TWO_PI * x)))


def swirl_problem(n: int = 32) -> LinProblem:
    """d=2, b = (sin(2 pi y), cos(2 pi x)) which is divergence free."""
    g = TorusGrid(2, n)
    b = GridVectorField((g.field(lambda x, y: np.sin(TWO_PI * y)), g.field(lambda x, y: 0.5 * np.cos(TWO_PI * x))))
    return LinProblem(g, b, g.field(lambda x, y: np.cos(TWO_PI * x) * np.sin(TWO_PI * y) + 0.2))


@pytest.fixture(scope="module")
def solved() -> dict[str, GridField]:
    pr = cos_problem()
    out = {}
    for m in METHODS:
        u, rep = lin_solve(pr, 1e-2, m)
        assert rep.converged
        out[m] = u
    return out


# --------------------------------------------------------------------------- problem data


def test_rejects_divergent_drift():
    """[TRIVIAL] b = (cos(2 pi x),) has nonzero divergence."""
    g = TorusGrid(1, 32)
    with pytest.raises(ValueError, match="divergence"):
        LinProblem(g, GridVectorField((g.field(lambda x: np.cos(TWO_PI * x)),)), g.constant(1.0))


def test_rejects_zero_source():
    """[TRIVIAL] f identically zero is excluded."""
    g = TorusGrid(1, 32)
    with pytest.raises(ValueError, match="vanish"):
        LinProblem.constant_drift(g, 0.3, g.zeros())


def test_constant_b_detection():
    """[TRIVIAL] constant drift is recognized; a varying one is not."""
    assert cos_problem().constant_b == (0.3,)
    assert swirl_problem().constant_b is None


# --------------------------------------------------------------------------- operator


def test_apply_zero_state():
    """[TRIVIAL] F(0) = -f, with or without regularization."""
    pr = cos_problem()
    z = pr.grid.zeros()
    np.testing.assert_array_equal(lin_apply(pr, z).values, -pr.f.values)
    np.testing.assert_allclose(lin_apply(pr, z, 0.1).values, -pr.f.values, atol=1e-15)


def test_zero_drift_root_is_source(rng):
    """[TRIVIAL] with b = 0 the root of F is f."""
    g = TorusGrid(1, 64)
    f = random_trig_field(g, rng, 5)
    pr = LinProblem.constant_drift(g, 0.0, f)
    assert lin_apply(pr, f).norm_inf() == 0.0
    np.testing.assert_allclose(lin_oracle(pr).values, f.values, atol=1e-14)


@pytest.mark.parametrize("make", [cos_problem, swirl_problem])
def test_monotonicity_identity(make, rng):
    """[PAPER] <F(u) - F(v), u - v> = |u - v|^2 because the transport term is skew."""
    pr = make()
    for _ in range(20):
        u, v = random_trig_field(pr.grid, rng, 6), random_trig_field(pr.grid, rng, 6)
        w = u - v
        lhs = inner(lin_apply(pr, u) - lin_apply(pr, v), w)
        rhs = inner(w, w)
        assert abs(lhs - rhs) <= 1e-11 * rhs


@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-4])
def test_regularized_strict_monotonicity(eps, rng):
    """[DERIVED] the regularized gap is at least (1 + eps)|u - v|^2."""
    pr = swirl_problem()
    for _ in range(20):
        u, v = random_trig_field(pr.grid, rng, 6), random_trig_field(pr.grid, rng, 6)
        w = u - v
        gap = inner(lin_apply(pr, u, eps) - lin_apply(pr, v, eps), w)
        assert gap >= (1 + eps) * inner(w, w) * (1 - 1e-11)


# --------------------------------------------------------------------------- oracle


def test_oracle_closed_form():
    """[DERIVED] b = 0.3, f = cos: u = (cos - 0.6 pi sin)/(1 + 0.36 pi^2)."""
    pr = cos_problem()
    x = pr.grid.coords[0]
    exact = (np.cos(TWO_PI * x) - 0.6 * np.pi * np.sin(TWO_PI * x)) / (1 + 0.36 * np.pi**2)
    np.testing.assert_allclose(lin_oracle(pr).values, exact, atol=1e-14)


@pytest.mark.parametrize("eps", [None, 0.0, 0.5])
@given(c=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3), b=st.floats(-2, 2))
@settings(max_examples=20, deadline=None)
def test_oracle_constant_source(eps, c, b):
    """[TRIVIAL] constant f = c gives c/(1 + eps), or c unregularized."""
    g = TorusGrid(1, 16)
    pr = LinProblem.constant_drift(g, b, g.constant(c))
    want = c if eps is None else c / (1 + eps)
    np.testing.assert_allclose(lin_oracle(pr, eps).values, want, rtol=1e-14)


@pytest.mark.parametrize("eps", [None, 1e-1, 1e-2, 1e-4])
@pytest.mark.parametrize("d,n,b", [(1, 64, 0.3), (2, 32, (0.3, -0.7))])
def test_oracle_residual(eps, d, n, b, rng):
    """[TRIVIAL] the oracle is a root of the operator."""
    g = TorusGrid(d, n)
    pr = LinProblem.constant_drift(g, b, random_trig_field(g, rng, 5))
    u = lin_oracle(pr, eps)
    assert lin_apply(pr, u, eps).norm_inf() <= 1e-12


def test_oracle_needs_constant_drift():
    """[TRIVIAL] a varying drift has no diagonal symbol."""
    with pytest.raises(ValueError, match="constant"):
        lin_oracle(swirl_problem())


# --------------------------------------------------------------------------- solvers


@pytest.mark.parametrize("method", METHODS)
def test_solver_matches_oracle(method, solved):
    """[DERIVED] each method reproduces the Fourier oracle at eps = 1e-2."""
    oracle = lin_oracle(cos_problem(), 1e-2)
    assert (solved[method] - oracle).norm_inf() <= 1e-8


@pytest.mark.parametrize("a,b", list(itertools.combinations(METHODS, 2)))
def test_solver_pairwise(a, b, solved):
    """[DERIVED] all methods solve the same linear system."""
    assert (solved[a] - solved[b]).norm_inf() <= 1e-10


@pytest.mark.parametrize("method", METHODS)
def test_solver_residual(method, solved):
    """[PAPER] the fixed point is a root of the regularized operator."""
    assert lin_apply(cos_problem(), solved[method], 1e-2).norm_inf() <= 1e-12


@pytest.mark.parametrize("method", METHODS)
def test_solver_varying_drift(method):
    """[DERIVED] with a non-constant drift the methods agree with each other; continuation is the reference."""
    pr = swirl_problem(16)
    ref, rep = lin_solve(pr, 1e-1, "continuation", tol=1e-11)
    assert rep.converged
    u, rep = lin_solve(pr, 1e-1, method, tol=1e-11)
    assert rep.converged
    assert (u - ref).norm_inf() <= 1e-9


def test_continuation_lambda_path():
    """[TRIVIAL] the source is scaled up in equal steps to 1."""
    _, rep = lin_solve(cos_problem(), 1e-2, "continuation", steps=4)
    assert [lam for lam, _ in rep.lambda_path] == [0.25, 0.5, 0.75, 1.0]


def test_iteration_cap_reports_max_iter():
    """[TRIVIAL] hitting the cap leaves status maxIter."""
    _, rep = lin_solve(cos_problem(), 1e-2, "variational", max_iter=3)
    assert rep.status == "maxIter"


@pytest.mark.parametrize("bad", [0.0, -1e-3])
def test_rejects_nonpositive_eps(bad):
    """[TRIVIAL] eps must be positive."""
    with pytest.raises(ValueError, match="positive"):
        lin_solve(cos_problem(), bad, "variational")


def test_unknown_method():
    """[TRIVIAL] the method name is checked."""
    with pytest.raises(ValueError, match="unknown method"):
        lin_solve(cos_problem(), 1e-2, "newton")  # type: ignore[arg-type]


def test_sweep_error_decreasing():
    """[DERIVED] the distance to the unregularized oracle shrinks strictly with eps."""
    pr = cos_problem()
    exact = lin_oracle(pr)
    errs = [(lin_solve(pr, e, "continuation")[0] - exact).norm_inf() for e in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_sweep_error_matches_symbol_bias():
    """[DERIVED] at one mode the L2 error is |1/s - 1/(s + delta)|/sqrt(2) with delta = eps(1 + 16 pi^4)."""
    pr = cos_problem()
    exact = lin_oracle(pr)
    s = 1 - 1j * TWO_PI * 0.3
    for e in (1e-1, 1e-2, 1e-3, 1e-4):
        delta = e * (1 + 16 * np.pi**4)
        want = abs(1 / s - 1 / (s + delta)) / np.sqrt(2)
        w = lin_solve(pr, e, "continuation")[0] - exact
        got = np.sqrt(inner(w, w))
        assert got == pytest.approx(want, rel=1e-8)
