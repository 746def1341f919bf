"""
Monotonicity certificates, weak variational inequality residuals and the
vanishing-regularization sweep.

The gap ``<F(s1) - F(s2), s1 - s2>`` is computed twice: directly from operator
applications, and from its pointwise decomposition into Bregman terms of the
Hamiltonian, the coupling term, the barrier term and the regularization
quadratic. The two agree only if the discrete gradient and divergence are
exact adjoints, so the agreement itself is a certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal, Sequence

import numpy as np

from .grid import GridField, TorusGrid, gradient, inner, integrate, laplacian_power
from .model import (
    DomainError,
    MFGProblem,
    RegParams,
    StatePair,
    apply_F,
    apply_F_eps,
    apply_F_eps_lambda,
)
from .solvers import SolveReport, continuation_solve, picard_solve

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = [
    "GapBreakdown",
    "AprioriRecord",
    "SweepRow",
    "SweepReport",
    "monotonicity_gap",
    "weak_vi_residual",
    "make_test_bank",
    "random_trig_field",
    "apriori_quantities",
    "minty_sweep",
    "sqrt_fit",
]


@dataclass(frozen=True)
class GapBreakdown:
    bregman1: float
    bregman2: float
    coupling: float
    penalty: float
    reg: float
    total: float
    direct: float

    @property
    def mismatch(self) -> float:
        """``|direct - total|`` relative to the size of the parts."""
        scale = abs(self.bregman1) + abs(self.bregman2) + abs(self.coupling) + abs(self.penalty) + abs(self.reg)
        return abs(self.direct - self.total) / max(scale, abs(self.direct), 1e-300)


def _operator(problem: MFGProblem, reg: RegParams | None, lam: float | None):
    if reg is None:
        return lambda s: apply_F(problem, s)
    if reg.variant == "plain":
        return lambda s: apply_F_eps(problem, reg, s)
    lam_ = 1.0 if lam is None else lam
    return lambda s: apply_F_eps_lambda(problem, reg, lam_, s)


def _bregman(problem: MFGProblem, P: NDArray, Q: NDArray) -> NDArray:
    # H(Q) - H(P) - DpH(P).(Q - P)
    H = problem.hamiltonian
    return H.value(Q) - H.value(P) - (H.grad(P) * (Q - P)).sum(axis=0)


def monotonicity_gap(
    problem: MFGProblem,
    s1: StatePair,
    s2: StatePair,
    reg: RegParams | None = None,
    lam: float | None = None,
) -> GapBreakdown:
    """Gap of ``F`` (``reg=None``), ``F_eps`` (plain) or the penalized family."""
    penalized = reg is not None and reg.variant == "penalized"
    for name, s in (("s1", s1), ("s2", s2)):
        if s.grid != problem.grid:
            raise ValueError(f"{name} is not on the problem grid")
        bad = s.m.min() <= 0 if penalized else s.m.min() < 0
        if bad:
            raise DomainError(f"{name}.m has min {s.m.min()!r}; the gap needs m {'> 0' if penalized else '>= 0'}")
    lam_ = 1.0 if (lam is None or not penalized) else lam
    F = _operator(problem, reg, lam)
    a1, a2 = F(s1)
    b1, b2 = F(s2)
    M = s1.m - s2.m
    U = s1.u - s2.u
    direct = inner(a1 - b1, M) + inner(a2 - b2, U)

    P1 = gradient(s1.u).stack()
    P2 = gradient(s2.u).stack()
    h = problem.grid.cell_volume
    br1 = lam_ * h * float((s1.m.values * _bregman(problem, P1, P2)).sum())
    br2 = lam_ * h * float((s2.m.values * _bregman(problem, P2, P1)).sum())
    g = problem.coupling
    cpl = lam_ * h * float(((g.value(s1.m.values) - g.value(s2.m.values)) * M.values).sum())
    pen = 0.0
    if penalized:
        p = reg.penalty(problem.grid.d)
        pen = h * float(((p.value(s1.m.values) - p.value(s2.m.values)) * M.values).sum())
    rq = 0.0
    if reg is not None:
        k = reg.order(problem.grid.d)
        MK = laplacian_power(M, k)
        UK = laplacian_power(U, k)
        rq = reg.eps * (inner(M, M) + inner(MK, MK) + inner(U, U) + inner(UK, UK))
    total = br1 + br2 + cpl + pen + rq
    return GapBreakdown(br1, br2, cpl, pen, rq, total, direct)


def weak_vi_residual(problem: MFGProblem, candidate: StatePair, test: StatePair) -> float:
    """``<F(w, v), (m, u) - (w, v)>`` with the unregularized operator."""
    if candidate.grid != test.grid or test.grid != problem.grid:
        raise ValueError("candidate, test and problem must share a grid")
    e1, e2 = apply_F(problem, test)
    return inner(e1, candidate.m - test.m) + inner(e2, candidate.u - test.u)


# --------------------------------------------------------------------------- test bank


def _band(grid: TorusGrid, K: int) -> list[tuple[int, ...]]:
    # one representative of each +-xi pair with 0 < |xi|_inf <= K
    rng = range(-K, K + 1)
    if grid.d == 1:
        return [(a,) for a in range(1, K + 1)]
    out = []
    for a in rng:
        for b in rng:
            if (a, b) > (0, 0) and max(abs(a), abs(b)) <= K:
                out.append((a, b))
    return out


def random_trig_field(grid: TorusGrid, rng: np.random.Generator, K: int, decay: float = 1.0) -> GridField:
    """Real trigonometric polynomial with frequencies ``|xi|_inf <= K``, random mean."""
    vals = np.full(grid.shape, rng.normal())
    for xi in _band(grid, K):
        phase = 2 * np.pi * sum(x * c for x, c in zip(xi, grid.coords))
        amp = 1.0 / (1.0 + np.linalg.norm(xi)) ** decay
        vals = vals + amp * (rng.normal() * np.cos(phase) + rng.normal() * np.sin(phase))
    return GridField(grid, vals)


def make_test_bank(
    grid: TorusGrid,
    count: int,
    seed: int,
    constraint: Literal["nonneg", "unit-mass-nonneg"] = "unit-mass-nonneg",
    phi: GridField | None = None,
    delta0: float = 0.05,
    band: int | None = None,
    v_scale: float = 0.5,
) -> list[StatePair]:
    """Admissible smooth test pairs ``(w, v)``.

    ``w = q^2 + delta0`` for a random trigonometric ``q`` (scaled to unit mass
    for ``unit-mass-nonneg``), ``v`` a random trigonometric polynomial. The
    first two entries are ``(phi, 0)`` and ``(1, 0)``. Frequencies of ``q``
    and ``v`` are cut at ``band`` (default ``min(4, n/8)``), so every entry has
    Fourier support within ``n/4``.
    """
    if count < 1:
        raise ValueError(f"bank size must be at least 1, got {count}")
    if not 0 < delta0 < 1:
        raise ValueError(f"delta0 must lie in (0, 1), got {delta0}")
    K = max(1, min(4, grid.n // 8)) if band is None else band
    phi = grid.constant(1.0) if phi is None else phi
    bank = [StatePair(phi, grid.zeros()), StatePair(grid.constant(1.0), grid.zeros())]
    rng = np.random.default_rng(seed)
    while len(bank) < count:
        q = random_trig_field(grid, rng, K)
        q2 = q.values**2
        if constraint == "unit-mass-nonneg":
            q2 = q2 * (1.0 - delta0) / (grid.cell_volume * q2.sum())
        w = GridField(grid, q2 + delta0)
        v = random_trig_field(grid, rng, K).scale(v_scale)
        bank.append(StatePair(w, v))
    return bank[:count]


# --------------------------------------------------------------------------- a priori record


@dataclass(frozen=True)
class AprioriRecord:
    mgm: float
    mDu: float
    phiDu: float
    regQuad: float
    penMass: tuple[float, float]
    intM: float
    intU: float
    intUM: float
    intH: float
    minM: float
    violations: tuple[str, ...] = ()


def apriori_quantities(
    problem: MFGProblem, s: StatePair, reg: RegParams | None = None, lam: float = 1.0, tol: float = 1e-12
) -> AprioriRecord:
    penalized = reg is not None and reg.variant == "penalized"
    if (s.m.min() <= 0) if penalized else (s.m.min() < 0):
        raise DomainError(f"a priori quantities need m {'> 0' if penalized else '>= 0'}, got min {s.m.min()!r}")
    grid = problem.grid
    h = grid.cell_volume
    P = gradient(s.u).stack()
    absDu = np.sqrt((P * P).sum(axis=0)) ** problem.hamiltonian.alpha
    m = s.m.values
    rec = dict(
        mgm=h * float((m * problem.coupling.value(m)).sum()),
        mDu=h * float((m * absDu).sum()),
        phiDu=h * float((problem.phi.values * absDu).sum()),
        regQuad=0.0,
        penMass=(0.0, 0.0),
        intM=integrate(s.m),
        intU=integrate(s.u),
        intUM=inner(s.u, s.m),
        intH=h * float(problem.hamiltonian.value(P).sum()),
        minM=s.m.min(),
    )
    if reg is not None:
        k = reg.order(grid.d)
        mk = laplacian_power(s.m, k)
        uk = laplacian_power(s.u, k)
        rec["regQuad"] = reg.eps * (inner(s.m, s.m) + inner(mk, mk) + inner(s.u, s.u) + inner(uk, uk))
    if penalized:
        p = reg.penalty(grid.d).value(m)
        rec["penMass"] = (
            h * float((-p * (lam * problem.phi.values + 1.0 - lam)).sum()),
            h * float((p * (m - reg.eps)).sum()),
        )
    bad = []
    for name in ("mgm", "mDu", "phiDu", "regQuad"):
        if rec[name] < -tol:
            bad.append(name)
    if min(rec["penMass"]) < -tol:
        bad.append("penMass")
    # mgm >= 0 needs g >= 0, which fails for the entropy coupling where m < 1
    if problem.coupling.kind == "entropy" and "mgm" in bad:
        bad.remove("mgm")
    return AprioriRecord(**rec, violations=tuple(bad))


# --------------------------------------------------------------------------- sweep


@dataclass
class SweepRow:
    eps: float
    apriori: AprioriRecord
    max_weak_vi: float
    iterations: int
    final_residual: float
    mass_defect: float
    status: str
    report: SolveReport = field(repr=False)


@dataclass
class SweepReport:
    rows: list[SweepRow]
    cauchy: list[dict[str, float]]
    solutions: list[StatePair] = field(repr=False, default_factory=list)

    def ratio(self, name: str) -> float:
        vals = [getattr(r.apriori, name) for r in self.rows]
        return max(vals) / min(vals) if vals and min(vals) > 0 else float("inf")

    def mass_fit(self) -> tuple[float, float]:
        """Least-squares ``c`` in ``|int m - 1| ~ c sqrt(eps)`` and its relative residual."""
        return sqrt_fit([r.eps for r in self.rows], [r.mass_defect for r in self.rows])


def sqrt_fit(eps: Sequence[float], defect: Sequence[float]) -> tuple[float, float]:
    x = np.sqrt(np.asarray(eps, dtype=float))
    y = np.asarray(defect, dtype=float)
    c = float(x @ y / (x @ x))
    nrm = float(np.linalg.norm(y))
    return c, float(np.linalg.norm(y - c * x) / nrm) if nrm > 0 else 0.0


def _cauchy(problem: MFGProblem, a: StatePair, b: StatePair) -> dict[str, float]:
    dm = a.m - b.m
    du = a.u - b.u
    P = gradient(du).stack()
    alpha = problem.hamiltonian.alpha
    semi = (problem.grid.cell_volume * float((np.sqrt((P * P).sum(axis=0)) ** alpha).sum())) ** (1.0 / alpha)
    return {"L2_m": dm.norm_l2(), "W1alpha_u": semi + abs(integrate(du))}


def minty_sweep(
    problem: MFGProblem,
    reg_template: RegParams,
    schedule: Sequence[float],
    bank: Sequence[StatePair],
    solver: Literal["picard", "continuation"] = "continuation",
    warm_start: bool = True,
    tol: float | None = None,
) -> SweepReport:
    """Solve along a decreasing ``eps`` schedule and certify each solution.

    Residuals over the bank use the unregularized operator. A row whose solve
    fails is kept and marked; the sweep continues.
    """
    sched = [float(e) for e in schedule]
    if any(not 0 < e < 1 for e in sched):
        raise ValueError(f"schedule entries must lie in (0, 1): {sched}")
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValueError(f"schedule must be strictly decreasing: {sched}")
    rows: list[SweepRow] = []
    sols: list[StatePair] = []
    prev: StatePair | None = None
    for eps in sched:
        if solver == "continuation":
            reg = RegParams(eps, reg_template.k, "penalized")
            s, rep = continuation_solve(
                problem, reg, initial=prev if warm_start else None, **({"tol": tol} if tol else {})
            )
        elif solver == "picard":
            reg = RegParams(eps, reg_template.k, "plain")
            s, rep = picard_solve(problem, reg, s0=prev if warm_start else None, **({"tol": tol} if tol else {}))
        else:
            raise ValueError(f"unknown solver {solver!r}")
        ap = apriori_quantities(problem, s, reg)
        vi = max(weak_vi_residual(problem, s, t) for t in bank)
        rows.append(
            SweepRow(
                eps=eps,
                apriori=ap,
                max_weak_vi=vi,
                iterations=rep.iterations,
                final_residual=rep.final_residual,
                mass_defect=abs(ap.intM - 1.0),
                status=rep.status,
                report=rep,
            )
        )
        sols.append(s)
        if rep.converged:
            prev = s
    cauchy = [_cauchy(problem, a, b) for a, b in zip(sols, sols[1:])]
    return SweepReport(rows=rows, cauchy=cauchy, solutions=sols)
