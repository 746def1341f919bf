"""
Solvers for the regularized stationary problem.

* ``solve_reg_linear`` inverts ``eps (I + Delta^{2k})`` mode by mode.
* ``solve_obstacle`` minimizes ``1/2 <w, R w> + <f1, w>`` over ``w >= 0`` where
  ``R = eps (I + Delta^{2k})``.
* ``picard_solve`` iterates a frozen-coefficient map (obstacle solve for m,
  linear solve for u) with damping. The default ``skew-implicit`` splitting
  keeps the linear coupling ``-u`` / ``+m`` implicit; the plain ``frozen``
  map has a constant-mode factor of size ``1/eps`` and needs ``theta < eps``.
* ``continuation_solve`` follows the penalized lambda-family from its constant
  root at ``lam = 0`` to ``lam = 1`` with Newton-GMRES steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse.linalg as spla

from .grid import (
    GridField,
    GridVectorField,
    TorusGrid,
    apply_reg,
    divergence,
    gradient,
    inner,
    laplacian_power,
    reg_symbol,
)
from .model import (
    DomainError,
    MFGProblem,
    RegParams,
    StatePair,
    apply_F_eps_lambda,
    frozen_rhs,
)

if TYPE_CHECKING:
    from numpy.typing import NDArray

logger = logging.getLogger(__name__)

__all__ = [
    "SolveReport",
    "ObstacleSolution",
    "solve_reg_linear",
    "solve_obstacle",
    "picard_map",
    "picard_solve",
    "jacobian_apply",
    "continuation_solve",
    "lambda0_state",
    "anderson_weights",
]

Status = Literal["converged", "maxIter", "domainFailure"]


@dataclass
class SolveReport:
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    final_residual: float = float("inf")
    min_m: float = float("nan")
    lambda_path: list[tuple[float, int]] = field(default_factory=list)
    status: Status = "maxIter"
    details: dict[str, float | int | str | list] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


# --------------------------------------------------------------------------- linear solve


def solve_reg_linear(rhs: GridField, eps: float, k: int) -> GridField:
    """The unique ``u`` with ``eps (u + Delta^{2k} u) = rhs``."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return GridField.from_spectrum(rhs.grid, rhs.spectrum / reg_symbol(rhs.grid, eps, k))


# --------------------------------------------------------------------------- obstacle


@dataclass
class ObstacleSolution:
    w: GridField
    kkt_residual: GridField
    complementarity: float
    min_r: float
    min_w: float
    status: Status
    iterations: int
    method: str

    def kkt_ok(self, tol: float) -> bool:
        return self.min_w >= -tol and self.min_r >= -tol and abs(self.complementarity) <= tol


def _circulant_kernel(grid: TorusGrid, symbol: NDArray) -> NDArray:
    return np.fft.irfftn(symbol, s=grid.shape, axes=tuple(range(grid.d)))


def _submatrix(grid: TorusGrid, kernel: NDArray, rows: NDArray, cols: NDArray) -> NDArray:
    # entries K(x_i - x_j) of a circulant operator, indices are flat node numbers
    ri = np.array(np.unravel_index(rows, grid.shape))
    ci = np.array(np.unravel_index(cols, grid.shape))
    diff = (ri[:, :, None] - ci[:, None, :]) % grid.n
    return kernel[tuple(diff)]


def solve_obstacle(
    f1: GridField,
    eps: float,
    k: int,
    kkt_tol: float = 1e-9,
    max_iter: int = 200,
    refine: int = 2,
    symbol: NDArray | None = None,
) -> ObstacleSolution:
    """Minimize ``1/2 <w, R w> + <f1, w>`` subject to ``w >= 0``.

    ``R`` is ``eps (I + Delta^{2k})`` unless a positive Fourier ``symbol``
    (rfftn layout) is given.

    Works on the dual: with multiplier ``mu >= 0`` the primal is
    ``w = R^{-1}(mu - f1)`` (a spectral division, so ``R w + f1 = mu`` holds to
    round-off even though ``R`` has a huge symbol). A primal-dual active-set
    iteration picks the contact set; if it stalls, the bound-constrained dual
    least-squares problem is handed to NNLS.
    """
    grid = f1.grid
    sym = reg_symbol(grid, eps, k) if symbol is None else np.broadcast_to(symbol, grid.spectral_shape)
    G = 1.0 / sym

    def primal(mu: NDArray | None) -> GridField:
        rhs = -f1.spectrum if mu is None else np.fft.rfftn(mu.reshape(grid.shape)) - f1.spectrum
        return GridField.from_spectrum(grid, G * rhs)

    w = primal(None)
    mu = np.zeros(grid.size)
    it = 0
    method = "unconstrained"
    if w.min() < 0:
        method = "active-set"
        kernel = _circulant_kernel(grid, G)
        c = 1.0 / kernel.flat[0]
        Gf = -w.values.ravel()  # R^{-1} f1 at the nodes
        active = np.flatnonzero(w.values.ravel() < 0)
        seen: set[bytes] = set()
        ok = False
        for it in range(1, max_iter + 1):
            mu = np.zeros(grid.size)
            if active.size:
                Gaa = _submatrix(grid, kernel, active, active)
                # the smooth kernel makes G_AA numerically singular; the min-norm solution
                # still zeroes w on the contact set to round-off
                mu[active] = scipy.linalg.lstsq(Gaa, Gf[active], cond=1e-15, check_finite=False)[0]
            w = primal(mu)
            for _ in range(refine if active.size else 0):
                mu[active] += scipy.linalg.lstsq(Gaa, -w.values.ravel()[active], cond=1e-15, check_finite=False)[0]
                w = primal(mu)
            wv = w.values.ravel()
            new_active = np.flatnonzero(mu - c * wv > 0)
            if np.array_equal(new_active, active):
                ok = mu.min() >= -kkt_tol and wv.min() >= -kkt_tol
                break
            key = new_active.tobytes()
            if key in seen:
                break
            seen.add(key)
            active = new_active
        if not ok:
            method = "nnls"
            sqrtG = np.sqrt(G)
            axes = tuple(range(grid.d))
            A = np.empty((grid.size, grid.size))
            for j in range(grid.size):
                e = np.zeros(grid.size)
                e[j] = 1.0
                A[:, j] = np.fft.irfftn(sqrtG * np.fft.rfftn(e.reshape(grid.shape)), s=grid.shape, axes=axes).ravel()
            b = np.fft.irfftn(sqrtG * f1.spectrum, s=grid.shape, axes=axes).ravel()
            mu, _ = scipy.optimize.nnls(A, b, maxiter=50 * grid.size)
            w = primal(mu)
    r = GridField.from_spectrum(grid, sym * w.spectrum) + f1
    min_w = w.min()
    if -kkt_tol <= min_w < 0:
        # round-off negatives on the contact set; keep the exact spectrum
        w = GridField(grid, np.maximum(w.values, 0.0), spectrum=w.spectrum)
    comp = inner(r, w)
    sol = ObstacleSolution(
        w=w,
        kkt_residual=r,
        complementarity=comp,
        min_r=r.min(),
        min_w=min_w,
        status="converged",
        iterations=it,
        method=method,
    )
    if not sol.kkt_ok(kkt_tol):
        sol.status = "maxIter"
        logger.debug("obstacle KKT not met: min w %.3e, min r %.3e, <r,w> %.3e", min_w, sol.min_r, comp)
    return sol


# --------------------------------------------------------------------------- Picard


def picard_map(
    problem: MFGProblem,
    reg: RegParams,
    s1: StatePair,
    kkt_tol: float = 1e-9,
    splitting: Literal["frozen", "skew-implicit"] = "frozen",
) -> tuple[StatePair, ObstacleSolution]:
    """One application of the frozen-coefficient map ``s1 -> (m2, u2)``.

    ``frozen`` freezes both rows at ``s1``. ``skew-implicit`` keeps the linear
    terms ``-u`` (first row) and ``+m`` (second row) at the new iterate:
    eliminating ``u2 = -R^{-1}(m2 + r2)`` leaves an obstacle problem with
    symbol ``R + R^{-1}`` and load ``r1 + R^{-1} r2``. Both maps share their
    fixed points.
    """
    if s1.m.min() < 0:
        raise DomainError(f"Picard map needs m >= 0, got min m = {s1.m.min()!r}")
    k = reg.order(problem.grid.d)
    f1, f2 = frozen_rhs(problem, s1)
    if splitting == "frozen":
        obst = solve_obstacle(f1, reg.eps, k, kkt_tol)
        u2 = solve_reg_linear(f2, reg.eps, k)
        return StatePair(obst.w, u2), obst
    if splitting != "skew-implicit":
        raise ValueError(f"unknown splitting {splitting!r}")
    r1 = f1 + s1.u
    r2 = -f2 - s1.m
    R = reg_symbol(problem.grid, reg.eps, k)
    load = r1 + solve_reg_linear(r2, reg.eps, k)
    obst = solve_obstacle(load, reg.eps, k, kkt_tol, symbol=R + 1.0 / R)
    u2 = solve_reg_linear(-(obst.w + r2), reg.eps, k)
    return StatePair(obst.w, u2), obst


def anderson_weights(residuals: list[NDArray]) -> NDArray:
    """Affine weights minimizing ``|sum_i a_i r_i|`` with ``sum_i a_i = 1``."""
    R = np.stack(residuals, axis=1)
    if R.shape[1] == 1:
        return np.ones(1)
    dR = R[:, 1:] - R[:, :-1]
    gamma, *_ = np.linalg.lstsq(dR, R[:, -1], rcond=1e-12)
    a = np.zeros(R.shape[1])
    a[-1] = 1.0
    a[1:] -= gamma
    a[:-1] += gamma
    return a


def _vi_residuals(problem: MFGProblem, reg: RegParams, s: StatePair) -> dict[str, float]:
    k = reg.order(problem.grid.d)
    f1, f2 = frozen_rhs(problem, s)
    r = apply_reg(s.m, reg.eps, k) + f1
    u_res = (apply_reg(s.u, reg.eps, k) - f2).norm_inf()
    return {
        "u_row": u_res,
        "min_r": r.min(),
        "complementarity": inner(r, s.m),
        "min_m": s.m.min(),
    }


def _vi_norm(vi: dict[str, float]) -> float:
    return max(vi["u_row"], max(0.0, -vi["min_r"]), abs(vi["complementarity"]))


def picard_solve(
    problem: MFGProblem,
    reg: RegParams,
    s0: StatePair | None = None,
    theta: float = 0.5,
    tol: float = 1e-7,
    max_iter: int = 50000,
    kkt_tol: float = 1e-9,
    acceleration: Literal["none", "anderson"] = "none",
    depth: int = 8,
    window: int = 50,
    splitting: Literal["frozen", "skew-implicit"] = "skew-implicit",
) -> tuple[StatePair, SolveReport]:
    """Damped fixed-point iteration ``x <- (1 - theta) x + theta A(x)``.

    ``theta`` is halved when the smallest increment over the last ``window``
    steps fails to improve on the window before it, or when the increment
    blows up; the iteration then restarts from the best iterate. ``acceleration="anderson"`` mixes the last ``depth`` iterates
    (the mixed density is accepted only if it stays nonnegative).
    """
    if not 0 < theta <= 1:
        raise ValueError(f"damping must lie in (0, 1], got {theta}")
    grid = problem.grid
    x = StatePair(problem.phi, grid.zeros()) if s0 is None else s0
    report = SolveReport()
    thetas: list[float] = []
    best = (np.inf, x)
    since_reset = 0
    xs: list[StatePair] = []
    gs: list[StatePair] = []
    for it in range(1, max_iter + 1):
        y, _ = picard_map(problem, reg, x, kkt_tol, splitting)
        g = y - x
        res = g.norm_inf()
        hist = report.residual_history
        hist.append(res)
        report.iterations = it
        since_reset += 1
        if res < best[0]:
            best = (res, x)
        if res <= tol and _vi_norm(_vi_residuals(problem, reg, y)) <= tol:
            x = y
            break
        # the increment oscillates even when the iteration is stable, so
        # divergence is judged by window minima, plus a blow-up guard
        stalled = since_reset >= 2 * window and min(hist[-window:]) >= min(hist[-2 * window : -window])
        if stalled or res > 1e3 * best[0]:
            theta *= 0.5
            thetas.append(theta)
            x = best[1]
            since_reset = 0
            xs.clear()
            gs.clear()
            if theta < 1e-12:
                break
            continue
        x_new = x.axpy(theta, g)
        if acceleration == "anderson":
            xs.append(x)
            gs.append(g)
            del xs[:-depth], gs[:-depth]
            a = anderson_weights([gi.pack() for gi in gs])
            mix = x_new.scale(0.0)
            for ai, xi, gi in zip(a, xs, gs):
                mix = mix + xi.axpy(theta, gi).scale(ai)
            if mix.m.min() >= 0:
                x_new = mix
        x = x_new
    vi = _vi_residuals(problem, reg, x)
    report.details.update(vi)
    report.details["theta_final"] = theta
    report.details["splitting"] = splitting
    report.details["theta_halvings"] = thetas
    report.min_m = x.m.min()
    inc = report.residual_history[-1] if report.residual_history else np.inf
    report.final_residual = max(inc, _vi_norm(vi))
    report.status = "converged" if report.final_residual <= tol and report.min_m >= 0 else "maxIter"
    return x, report


# --------------------------------------------------------------------------- Jacobian


def jacobian_apply(
    problem: MFGProblem, reg: RegParams, lam: float, s: StatePair, direction: StatePair
) -> tuple[GridField, GridField]:
    """Frechet derivative of the lambda-family at ``s`` applied to ``(w, v)``.

    For the plain variant the barrier term is absent (use ``lam = 1``).
    """
    grid = problem.grid
    k = reg.order(grid.d)
    m, u = s.m, s.u
    w, v = direction.m, direction.u
    P = gradient(u).stack()
    DpH = problem.hamiltonian.grad(P)
    D2H = problem.hamiltonian.hess(P)
    Dv = gradient(v).stack()
    gp = problem.coupling.deriv(m.values)
    pot = lam * gp
    if reg.variant == "penalized":
        pot = pot + reg.penalty(grid.d).deriv(m.values)
    e1 = -v + grid.field(-lam * (DpH * Dv).sum(axis=0) + pot * w.values) + apply_reg(w, reg.eps, k)
    flux = w.values[None] * DpH + m.values[None] * np.einsum("ab...,b...->a...", D2H, Dv)
    e2 = w - divergence(GridVectorField.from_arrays(grid, flux)).scale(lam) + apply_reg(v, reg.eps, k)
    if problem.nu:
        e1 = e1 + laplacian_power(v, 1).scale(lam * problem.nu)
        e2 = e2 - laplacian_power(w, 1).scale(lam * problem.nu)
    return e1, e2


class _BlockPreconditioner:
    """Per-mode 2x2 inverse of the constant-coefficient part of the Jacobian."""

    def __init__(self, problem: MFGProblem, reg: RegParams, lam: float, s: StatePair) -> None:
        grid = problem.grid
        k = reg.order(grid.d)
        m = s.m.values
        P = gradient(s.u).stack()
        pot = lam * problem.coupling.deriv(m)
        if reg.variant == "penalized":
            pot = pot + reg.penalty(grid.d).deriv(m)
        D2H = problem.hamiltonian.hess(P)
        mH = (m[None, None] * D2H).reshape(grid.d, grid.d, -1).mean(axis=2)
        Pm = problem.hamiltonian.grad(P).reshape(grid.d, -1).mean(axis=1)
        R = reg_symbol(grid, reg.eps, k)
        syms = [grid.derivative_symbol(a) for a in range(grid.d)]
        # -div(m D2H Dv) -> + sum_ab mH_ab (2 pi xi_a)(2 pi xi_b) v
        curv = np.zeros(grid.spectral_shape)
        for a in range(grid.d):
            for b in range(grid.d):
                curv = curv + mH[a, b] * (-(syms[a] * syms[b]).real)
        drift = sum(Pm[a] * syms[a] for a in range(grid.d))
        c = 1.0 + lam * problem.nu * grid.k2
        self.a = R + pot.mean()
        self.b = R + lam * curv
        self.c12 = -c - lam * drift
        self.c21 = c - lam * drift
        self.det = self.a * self.b - self.c12 * self.c21
        self.grid = grid

    def apply(self, r1: NDArray, r2: NDArray) -> tuple[NDArray, NDArray]:
        """Spectra of the preconditioned correction for spectra ``r1, r2``."""
        w = (self.b * r1 - self.c12 * r2) / self.det
        v = (-self.c21 * r1 + self.a * r2) / self.det
        return w, v


def _newton_direction(
    problem: MFGProblem,
    reg: RegParams,
    lam: float,
    s: StatePair,
    F: tuple[GridField, GridField],
    rtol: float,
) -> tuple[StatePair, int]:
    grid = problem.grid
    N = grid.size
    pre = _BlockPreconditioner(problem, reg, lam, s)

    def precond(y: NDArray) -> StatePair:
        r1 = np.fft.rfftn(y[:N].reshape(grid.shape))
        r2 = np.fft.rfftn(y[N:].reshape(grid.shape))
        w, v = pre.apply(r1, r2)
        return StatePair(GridField.from_spectrum(grid, w), GridField.from_spectrum(grid, v))

    def matvec(y: NDArray) -> NDArray:
        e1, e2 = jacobian_apply(problem, reg, lam, s, precond(np.asarray(y).ravel()))
        return np.concatenate([e1.values.ravel(), e2.values.ravel()])

    op = spla.LinearOperator((2 * N, 2 * N), matvec=matvec, dtype=float)
    rhs = -np.concatenate([F[0].values.ravel(), F[1].values.ravel()])
    count = [0]

    def cb(_: object) -> None:
        count[0] += 1

    y, info = spla.gmres(op, rhs, rtol=rtol, atol=0.0, restart=60, maxiter=20, callback=cb, callback_type="pr_norm")
    if info < 0:
        raise RuntimeError(f"GMRES failed with code {info}")
    return precond(y), count[0]


def lambda0_state(grid: TorusGrid, reg: RegParams) -> StatePair:
    """Constant root ``(1 - eps c*, c*)`` of the penalized family at ``lam = 0``.

    ``c*`` solves ``-c + p_eps(1 - eps c) + eps (1 - eps c) = 0``; the closed form
    ``eps/(1 + eps^2)`` applies when the barrier is inactive, otherwise a
    bracketing root finder is used.
    """
    eps = reg.eps
    pen = reg.penalty(grid.d)
    c = eps / (1.0 + eps * eps)
    if 1.0 - eps * c < eps:

        def i(cc: float) -> float:
            mm = 1.0 - eps * cc
            return -cc + float(pen.value(np.array(mm))) + eps * mm

        c = scipy.optimize.brentq(i, -1e6, (1.0 - 1e-300) / eps * (1 - 1e-12))
    return StatePair(grid.constant(1.0 - eps * c), grid.constant(c))


def _residual_norm(F: tuple[GridField, GridField]) -> float:
    return max(F[0].norm_inf(), F[1].norm_inf())


def _newton(
    problem: MFGProblem,
    reg: RegParams,
    lam: float,
    s: StatePair,
    tol: float,
    max_iter: int,
    history: list[float],
) -> tuple[StatePair, bool, int, int]:
    F = apply_F_eps_lambda(problem, reg, lam, s)
    nrm = _residual_norm(F)
    krylov = 0
    for it in range(max_iter + 1):
        history.append(nrm)
        if nrm <= tol:
            return s, True, it, krylov
        if it == max_iter:
            break
        d, nk = _newton_direction(problem, reg, lam, s, F, rtol=1e-11)
        krylov += nk
        t = 1.0
        accepted = False
        for _ in range(40):
            trial = s.axpy(t, d)
            if trial.m.min() > 0:
                Ft = apply_F_eps_lambda(problem, reg, lam, trial)
                nt = _residual_norm(Ft)
                if nt < (1.0 - 1e-4 * t) * nrm:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            return s, False, it, krylov
        s, F, nrm = trial, Ft, nt
    return s, False, max_iter, krylov


def continuation_solve(
    problem: MFGProblem,
    reg: RegParams,
    step: float = 0.1,
    min_step: float = 1e-4,
    max_step: float | None = None,
    tol: float = 1e-9,
    max_newton: int = 25,
    initial: StatePair | None = None,
) -> tuple[StatePair, SolveReport]:
    """Newton continuation in ``lam`` for the penalized family.

    Starts from the constant ``lam = 0`` root, or, when ``initial`` is given,
    first tries Newton directly at ``lam = 1`` from it (warm start) and falls
    back to the path on failure.
    """
    if reg.variant != "penalized":
        reg = RegParams(reg.eps, reg.k, "penalized")
    grid = problem.grid
    max_step = step if max_step is None else max_step
    report = SolveReport()
    hist = report.residual_history
    total_newton = 0
    if initial is not None and initial.m.min() > 0:
        s, ok, its, nk = _newton(problem, reg, 1.0, initial, tol, max_newton, hist)
        total_newton += its
        report.details["krylov"] = nk
        if ok:
            report.lambda_path.append((1.0, its))
            return _finish(problem, reg, s, report, total_newton, tol)
    s = lambda0_state(grid, reg)
    lam = 0.0
    s, ok, its, nk = _newton(problem, reg, 0.0, s, tol, max_newton, hist)
    total_newton += its
    report.lambda_path.append((0.0, its))
    h = step
    while lam < 1.0:
        target = min(1.0, round(lam + h, 12))
        trial, ok, its, nk = _newton(problem, reg, target, s, tol, max_newton, hist)
        total_newton += its
        if ok:
            s, lam = trial, target
            report.lambda_path.append((lam, its))
            if its <= 4:
                h = min(2.0 * h, max_step)
        else:
            h *= 0.5
            if h < min_step:
                report.details["lambda_reached"] = lam
                report.status = "domainFailure"
                report.iterations = total_newton
                report.min_m = s.m.min()
                report.final_residual = _residual_norm(apply_F_eps_lambda(problem, reg, lam, s))
                return s, report
    return _finish(problem, reg, s, report, total_newton, tol)


def _finish(
    problem: MFGProblem, reg: RegParams, s: StatePair, report: SolveReport, iters: int, tol: float
) -> tuple[StatePair, SolveReport]:
    report.iterations = iters
    report.min_m = s.m.min()
    report.final_residual = _residual_norm(apply_F_eps_lambda(problem, reg, 1.0, s))
    report.details["lambda_reached"] = 1.0
    report.status = "converged" if report.final_residual <= tol and report.min_m > 0 else "maxIter"
    return s, report
