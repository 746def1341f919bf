"""Time-dependent problem: grids, quadratic form, operator, gap, Picard and diagnostics.

Tags: [TRIVIAL] structural, [DERIVED] closed-form, regression or cross-method oracles, [PAPER] properties the theory asserts.
"""

from __future__ import annotations

import numpy as np
import pytest

from torusmfg.model import Coupling, DomainError, PowerHamiltonian
from torusmfg.timedep import (
    ConstraintSets,
    QuadraticForm,
    SpaceTimeField,
    SpaceTimeGrid,
    StepSystem,
    TDProblem,
    default_td_order,
    make_td_bank,
    st_inner,
    st_integral,
    st_quadratic_form,
    td_apply_F,
    td_apply_F_eps,
    td_diagnostics,
    td_gap,
    td_picard_map,
    td_picard_solve,
    td_weak_vi,
)

TWO_PI = 2 * np.pi
SCHEDULE = (1e-1, 1e-2, 1e-3)


def td_problem(
    V: float = 0.0, m0_amp: float = 0.0, alpha: float = 2.0, coupling: Coupling | None = None, Nt: int = 16, nx: int = 32
) -> TDProblem:
    """d=1, V = V cos(2 pi x) constant in time, m0 = 1 + m0_amp cos(2 pi x), uT = 0."""
    g = SpaceTimeGrid(Nt, nx)
    s = g.space
    return TDProblem(
        g,
        PowerHamiltonian(alpha),
        coupling or Coupling("linear"),
        g.lift(s.field(lambda x: V * np.cos(TWO_PI * x))),
        s.field(lambda x: 1 + m0_amp * np.cos(TWO_PI * x)),
        s.zeros(),
    )


def noise(g: SpaceTimeGrid, rng: np.random.Generator) -> SpaceTimeField:
    return SpaceTimeField(g, rng.standard_normal(g.shape))


@pytest.fixture(scope="module")
def baseline_solution():
    pr = td_problem()
    m, u, rep = td_picard_solve(pr, 1e-2)
    return pr, m, u, rep


@pytest.fixture(scope="module")
def nontrivial_solutions():
    pr = td_problem(V=0.5, m0_amp=0.5)
    return pr, {eps: td_picard_solve(pr, eps) for eps in SCHEDULE}


# --------------------------------------------------------------------------- grid and fields


def test_grid_validation():
    """[TRIVIAL] too few time nodes or a nonpositive horizon are rejected."""
    with pytest.raises(ValueError, match="time nodes"):
        SpaceTimeGrid(7, 32)
    with pytest.raises(ValueError, match="horizon"):
        SpaceTimeGrid(16, 32, T=0.0)


def test_grid_geometry():
    """[TRIVIAL] dt, node times and trapezoid weights."""
    g = SpaceTimeGrid(16, 32, T=2.0)
    assert g.dt == pytest.approx(2.0 / 15)
    assert g.times[0] == 0.0 and g.times[-1] == 2.0
    assert g.weights.sum() == pytest.approx(2.0, rel=1e-15)
    assert g.shape == (16, 32)


@pytest.mark.parametrize("Nt", [8, 16, 33])
def test_summation_by_parts(Nt):
    """[DERIVED] W D + D^T W = diag(-1, 0, ..., 0, 1) for the trapezoid weights."""
    g = SpaceTimeGrid(Nt, 8)
    W = np.diag(g.weights)
    E = np.zeros((Nt, Nt))
    E[0, 0], E[-1, -1] = -1.0, 1.0
    np.testing.assert_allclose(W @ g.D + g.D.T @ W, E, atol=1e-13)


@pytest.mark.parametrize("Nt", [8, 16])
def test_time_derivative_exact_on_linear(Nt):
    """[DERIVED] every row of D differentiates affine functions of t exactly."""
    g = SpaceTimeGrid(Nt, 8, T=1.5)
    f = g.field(lambda t, x: 2.0 - 3.0 * t + 0 * x)
    np.testing.assert_allclose(f.time_derivative().values, -3.0, atol=1e-12)


def test_lift_and_slices(rng):
    """[TRIVIAL] a lifted field repeats its spatial slice; with_slice replaces one slice."""
    g = SpaceTimeGrid(8, 16)
    f = g.space.field(lambda x: np.sin(TWO_PI * x))
    F = g.lift(f)
    for i in range(g.Nt):
        np.testing.assert_array_equal(F.slice(i).values, f.values)
    G = F.with_slice(3, g.space.constant(2.0))
    assert np.all(G.values[3] == 2.0) and np.all(G.values[2] == f.values)


def test_integrals():
    """[TRIVIAL] the integral of 1 is T and the slice masses of 1 are 1."""
    g = SpaceTimeGrid(16, 32, T=1.5)
    one = g.field(1.0)
    assert st_integral(one) == pytest.approx(1.5, rel=1e-15)
    np.testing.assert_allclose(one.slice_masses(), 1.0, rtol=1e-15)


@pytest.mark.parametrize("d,k", [(1, 3), (2, 3), (3, 3), (4, 4), (5, 4)])
def test_default_order(d, k):
    """[DERIVED] smallest k with 2k >= (d + 1)/2 + 4."""
    assert default_td_order(d) == k


# --------------------------------------------------------------------------- quadratic form


@pytest.mark.parametrize("eps", [1e-1, 1e-3])
def test_form_on_constants(eps):
    """[DERIVED] Q(1, 1) = eps T because every derivative of a constant vanishes."""
    g = SpaceTimeGrid(16, 32, T=2.0)
    Q = st_quadratic_form(g, 3, eps)
    assert Q(g.field(1.0), g.field(1.0)) == pytest.approx(eps * 2.0, rel=1e-12)


def test_form_symmetric(rng):
    """[TRIVIAL] Q is symmetric."""
    g = SpaceTimeGrid(16, 32)
    Q = QuadraticForm(g, 3, 1e-2)
    for _ in range(10):
        a, b = noise(g, rng), noise(g, rng)
        qab, qba = Q(a, b), Q(b, a)
        assert abs(qab - qba) <= 1e-12 * abs(qab)


def test_form_coercive(rng):
    """[PAPER] Q(v, v) >= eps <v, v> on 100 random fields."""
    g = SpaceTimeGrid(16, 32)
    eps = 1e-2
    Q = QuadraticForm(g, 3, eps)
    for i in range(100):
        v = noise(g, rng) if i % 2 else SpaceTimeField(g, np.cumsum(rng.standard_normal(g.shape), axis=0))
        assert Q(v, v) >= eps * st_inner(v, v) * (1 - 1e-12)


def test_form_apply_is_riesz(rng):
    """[DERIVED] <Q-operator a, b> = Q(a, b) for smooth fields."""
    pr = td_problem()
    bank = make_td_bank(pr, 4, 3)
    Q = QuadraticForm(pr.grid, 3, 1e-2)
    for (a, _), (_, b) in zip(bank, bank[1:]):
        assert st_inner(Q.apply(a), b) == pytest.approx(Q(a, b), rel=1e-8)


def test_form_rejects_nonpositive_eps():
    """[TRIVIAL] eps must be positive."""
    with pytest.raises(ValueError, match="positive"):
        QuadraticForm(SpaceTimeGrid(8, 8), 3, 0.0)


@pytest.mark.parametrize("which", ["m", "u"])
def test_solve_pinned(which, rng):
    """[DERIVED] the pinned solve returns the pinned slice and zero dual residual on the free slices."""
    g = SpaceTimeGrid(16, 16)
    Q = QuadraticForm(g, 3, 1e-2)
    rhs = SpaceTimeField(g, np.cumsum(rng.standard_normal(g.shape), axis=0))
    W = g.weights[:, None]
    pin = g.space.field(lambda x: np.cos(TWO_PI * x))
    v = SpaceTimeField.from_spectrum(g, Q.solve_pinned(which, W * rhs.spectrum, pin))
    P = 0 if which == "m" else g.Nt - 1
    np.testing.assert_allclose(v.values[P], pin.values, atol=1e-13)
    assert Q.dual_residual(which, v, -W * rhs.spectrum) <= 1e-8 * np.sqrt(st_inner(rhs, rhs))


# --------------------------------------------------------------------------- problem data and constraint sets


def test_problem_normalizes_initial_density():
    """[TRIVIAL] m0 is scaled to unit mass and the raw mass is kept."""
    g = SpaceTimeGrid(8, 16)
    s = g.space
    pr = TDProblem(g, PowerHamiltonian(2.0), Coupling("linear"), g.zeros(), s.constant(3.0), s.zeros())
    assert pr.raw_m0_mass == pytest.approx(3.0)
    np.testing.assert_allclose(pr.m0.values, 1.0)


def test_problem_validation():
    """[TRIVIAL] nonpositive m0 and a bad order are rejected."""
    g = SpaceTimeGrid(8, 16)
    s = g.space
    with pytest.raises(ValueError, match="positive"):
        TDProblem(g, PowerHamiltonian(2.0), Coupling("linear"), g.zeros(), s.field(lambda x: np.cos(TWO_PI * x)), s.zeros())
    with pytest.raises(ValueError, match="order"):
        TDProblem(g, PowerHamiltonian(2.0), Coupling("linear"), g.zeros(), s.constant(1.0), s.zeros(), k=0)


def test_constraint_sets(rng):
    """[TRIVIAL] projections land in A and B; shifts subtract the lifts."""
    pr = td_problem(m0_amp=0.5)
    cs = ConstraintSets(pr)
    m, u = noise(pr.grid, rng), noise(pr.grid, rng)
    assert cs.in_A(cs.project_A(m)) and not cs.in_A(m)
    assert cs.in_B(cs.project_B(u))
    np.testing.assert_allclose(cs.shift_A(cs.project_A(m)).values[0], 0.0, atol=1e-15)
    np.testing.assert_allclose(cs.shift_B(cs.project_B(u)).values[-1], 0.0, atol=1e-15)


def test_bank_properties():
    """[DERIVED] bank pairs are pinned, positive and of unit mass on every slice."""
    pr = td_problem(m0_amp=0.5)
    cs = ConstraintSets(pr)
    bank = make_td_bank(pr, 16, 5)
    assert len(bank) == 16
    for w, v in bank:
        assert w.min() > 0 and cs.in_A_star(w) and cs.in_B(v)
        assert abs(w.slice_masses()[0] - 1.0) <= 1e-15


def test_bank_deterministic():
    """[TRIVIAL] identical seeds give identical banks."""
    pr = td_problem()
    a, b = make_td_bank(pr, 6, 9), make_td_bank(pr, 6, 9)
    for (w1, v1), (w2, v2) in zip(a, b):
        assert np.array_equal(w1.values, w2.values) and np.array_equal(v1.values, v2.values)


# --------------------------------------------------------------------------- operator and gap


def test_operator_zero_state():
    """[TRIVIAL] with m = u = 0 and g linear, e1 = V and e2 = 0."""
    pr = td_problem(V=0.5)
    z = pr.grid.zeros()
    e1, e2 = td_apply_F(pr, z, z)
    np.testing.assert_allclose(e1.values, pr.V.values, atol=1e-15)
    np.testing.assert_allclose(e2.values, 0.0, atol=1e-15)


@pytest.mark.parametrize("c", [0.0, 0.7, -2.0])
def test_operator_manufactured(c):
    """[DERIVED] u = c t, m = 1 and V = -1 - c make both rows vanish."""
    g = SpaceTimeGrid(16, 32)
    s = g.space
    pr = TDProblem(g, PowerHamiltonian(2.0), Coupling("linear"), g.field(-1.0 - c), s.constant(1.0), s.zeros())
    u = g.field(lambda t, x: c * t + 0 * x)
    e1, e2 = td_apply_F(pr, g.field(1.0), u)
    assert e1.norm_inf() <= 1e-12 and e2.norm_inf() <= 1e-12


def test_entropy_rejects_nonpositive_density():
    """[TRIVIAL] entropy coupling with m <= 0 raises."""
    pr = td_problem(coupling=Coupling("entropy"))
    with pytest.raises(DomainError, match="m > 0"):
        td_apply_F(pr, pr.grid.zeros(), pr.grid.zeros())


def test_gap_rejects_negative_density(rng):
    """[TRIVIAL] the gap needs m >= 0."""
    pr = td_problem()
    bank = make_td_bank(pr, 3, 0)
    bad = (bank[2][0].scale(-1.0), bank[2][1])
    with pytest.raises(DomainError):
        td_gap(pr, bank[2], bad)


@pytest.mark.parametrize("alpha", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("coupling", [Coupling("linear"), Coupling("power", 2.0)])
@pytest.mark.parametrize("eps", [None, 1e-2])
def test_gap_nonnegative(alpha, coupling, eps):
    """[PAPER] the gap is nonnegative over 100 pinned pairs and matches its decomposition."""
    pr = td_problem(V=0.5, m0_amp=0.5, alpha=alpha, coupling=coupling)
    Q = None if eps is None else QuadraticForm(pr.grid, pr.order, eps)
    bank = make_td_bank(pr, 200, 17)
    for i in range(100):
        gp = td_gap(pr, bank[2 * i], bank[2 * i + 1], Q)
        assert gp.direct >= -1e-10
        assert gp.mismatch <= 1e-10
        assert abs(gp.boundary) <= 1e-14


def test_gap_boundary_term_when_unpinned(rng):
    """[DERIVED] without shared pins the boundary term is h^d sum [U M] from t = 0 to T."""
    pr = td_problem()
    g = pr.grid
    m1 = SpaceTimeField(g, 1.0 + 0.1 * rng.random(g.shape))
    m2 = g.field(1.0)
    u1 = noise(g, rng)
    u2 = g.zeros()
    gp = td_gap(pr, (m1, u1), (m2, u2))
    M, U = m1 - m2, u1 - u2
    want = g.space.cell_volume * float((U.values[-1] * M.values[-1]).sum() - (U.values[0] * M.values[0]).sum())
    assert gp.boundary == pytest.approx(want, rel=1e-14)
    assert gp.mismatch <= 1e-10


def test_regularized_operator_adds_form(rng):
    """[TRIVIAL] F_eps = F + (Q m, Q u)."""
    pr = td_problem()
    bank = make_td_bank(pr, 3, 1)
    m, u = bank[2]
    Q = QuadraticForm(pr.grid, pr.order, 1e-2)
    a1, a2 = td_apply_F(pr, m, u)
    b1, b2 = td_apply_F_eps(pr, Q, m, u)
    np.testing.assert_allclose((b1 - a1).values, Q.apply(m).values, atol=1e-12)
    np.testing.assert_allclose((b2 - a2).values, Q.apply(u).values, atol=1e-12)


# --------------------------------------------------------------------------- Picard


def test_baseline_converges(baseline_solution):
    """[DERIVED] constant data: converges with exact pins and m >= 0."""
    pr, m, u, rep = baseline_solution
    assert rep.converged
    assert rep.details["m0_slice_error"] == 0.0 and rep.details["uT_slice_error"] == 0.0
    assert m.min() >= 0
    assert rep.details["splitting"] == "skew-implicit"


def test_baseline_kkt(baseline_solution):
    """[PAPER] the density row satisfies its KKT conditions."""
    _, _, _, rep = baseline_solution
    assert rep.details["min_mu"] >= -1e-8
    assert abs(rep.details["complementarity"]) <= 1e-8
    assert rep.details["m_row_dual"] <= 1e-6 and rep.details["u_row_dual"] <= 1e-6


def test_baseline_fixed_point(baseline_solution):
    """[DERIVED] the solution is a fixed point of the map."""
    pr, m, u, _ = baseline_solution
    system = StepSystem(QuadraticForm(pr.grid, pr.order, 1e-2), "skew-implicit")
    m2, u2, _ = td_picard_map(pr, system, m, u)
    assert max((m2 - m).norm_inf(), (u2 - u).norm_inf()) <= 1e-8


@pytest.mark.parametrize("eps", SCHEDULE)
def test_nontrivial_converges(eps, nontrivial_solutions):
    """[DERIVED] potential and nonuniform m0: converges, pins exact, m >= 0."""
    _, sols = nontrivial_solutions
    m, u, rep = sols[eps]
    assert rep.converged and m.min() >= 0
    assert rep.details["m0_slice_error"] == 0.0 and rep.details["uT_slice_error"] == 0.0


def test_plain_iteration_matches_anderson(nontrivial_solutions):
    """[DERIVED] Anderson mixing does not change the limit."""
    pr, sols = nontrivial_solutions
    m, u, _ = sols[1e-2]
    m2, u2, rep = td_picard_solve(pr, 1e-2, acceleration="none", max_iter=5000)
    assert rep.converged
    assert max((m2 - m).norm_inf(), (u2 - u).norm_inf()) <= 1e-7


def test_start_independence(nontrivial_solutions):
    """[PAPER] the limit does not depend on the starting pair."""
    pr, sols = nontrivial_solutions
    m, u, _ = sols[1e-2]
    start = make_td_bank(pr, 3, 4)[2]
    m2, u2, rep = td_picard_solve(pr, 1e-2, initial=start)
    assert rep.converged
    assert max((m2 - m).norm_inf(), (u2 - u).norm_inf()) <= 1e-7


def test_unknown_acceleration():
    """[TRIVIAL] the acceleration name is checked."""
    with pytest.raises(ValueError, match="acceleration"):
        td_picard_solve(td_problem(V=0.5), 1e-2, acceleration="broyden", max_iter=3)


# --------------------------------------------------------------------------- diagnostics


def test_weak_vi_vanishes_at_candidate():
    """[TRIVIAL] the residual of a bank pair against itself is zero."""
    pr = td_problem(V=0.5, m0_amp=0.5)
    for w, v in make_td_bank(pr, 5, 2):
        assert td_weak_vi(pr, w, v, w, v) == 0.0


@pytest.mark.parametrize("eps", SCHEDULE)
def test_weak_vi_on_bank(eps, nontrivial_solutions):
    """[PAPER] solutions satisfy the weak inequality on a 32-element bank."""
    pr, sols = nontrivial_solutions
    m, u, _ = sols[eps]
    dg = td_diagnostics(pr, m, u, make_td_bank(pr, 32, 0))
    assert dg.max_weak_vi <= 1e-5
    assert len(dg.weak_vi) == 32


@pytest.mark.parametrize("eps", SCHEDULE)
def test_mean_adjustment(eps, nontrivial_solutions):
    """[DERIVED] subtracting slice means of u leaves the residuals unchanged because bank densities have unit mass."""
    pr, sols = nontrivial_solutions
    m, u, _ = sols[eps]
    dg = td_diagnostics(pr, m, u, make_td_bank(pr, 32, 0))
    assert dg.mean_adjust_defect <= 1e-10
    assert dg.slice_mass[0] == pytest.approx(1.0, abs=1e-15)


def test_apriori_bounded(nontrivial_solutions):
    """[PAPER] the a priori quantity stays within a factor 10 across the schedule."""
    pr, sols = nontrivial_solutions
    bank = make_td_bank(pr, 8, 0)
    vals = [td_diagnostics(pr, m, u, bank).apriori for m, u, _ in sols.values()]
    assert min(vals) > 0
    assert max(vals) / min(vals) <= 10


def test_diagnostics_closed_form():
    """[DERIVED] m = 1, u = 0 with g linear: mgm = T, Du terms vanish, intM = T."""
    pr = td_problem()
    g = pr.grid
    dg = td_diagnostics(pr, g.field(1.0), g.zeros(), [])
    assert dg.mgm == pytest.approx(1.0) and dg.intM == pytest.approx(1.0)
    assert dg.Du_alpha == 0.0 and dg.mDu == 0.0 and dg.intH == 0.0
    assert dg.max_weak_vi == float("-inf")
