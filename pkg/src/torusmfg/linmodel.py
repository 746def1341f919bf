"""
The linear monotone model ``F(u) = u - b.Du - f`` with divergence-free ``b``.

``F`` is monotone but not coercive in a way that allows a direct
Lax-Milgram argument, so it is regularized to ``F_eps(u) = F(u) + eps (u +
Delta^2 u)``. Three solvers reach the root of ``F_eps`` by different routes:

* ``variational``: damped iteration of ``u -> argmin_w G_u(w)`` with
  ``G_u(w) = int eps/2 (w^2 + (Delta w)^2) + F(u) w``, minimized per Fourier mode;
* ``bilinear``: the same fixed point, with each step posed as the Galerkin
  system ``B[w, v] = -<F(u), v>`` in an explicit cosine/sine basis whose load
  vector is assembled by nodal quadrature;
* ``continuation``: ``f -> lam f`` from the trivial root at ``lam = 0``, one
  preconditioned GMRES Newton solve per step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np
import scipy.sparse.linalg as spla

from .grid import (
    GridField,
    GridVectorField,
    TorusGrid,
    apply_reg,
    divergence,
    gradient,
    reg_symbol,
)
from .solvers import SolveReport

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = ["LinProblem", "lin_apply", "lin_oracle", "lin_solve"]

K_LIN = 1  # the regularization is eps (I + Delta^2)


@dataclass(frozen=True)
class LinProblem:
    grid: TorusGrid
    b: GridVectorField
    f: GridField

    def __post_init__(self) -> None:
        if self.b.grid != self.grid or self.f.grid != self.grid:
            raise ValueError("b and f must live on the problem grid")
        div = divergence(self.b).norm_inf()
        scale = max(1.0, max(c.norm_inf() for c in self.b.components))
        if div > 1e-12 * scale * self.grid.n:
            raise ValueError(f"b must be divergence free; |div b|_inf = {div:.3e}")
        if self.f.norm_inf() == 0:
            raise ValueError("f must not vanish identically")

    @classmethod
    def constant_drift(cls, grid: TorusGrid, b: float | tuple[float, ...], f: GridField) -> LinProblem:
        bb = (b,) * grid.d if np.isscalar(b) else tuple(b)
        return cls(grid, GridVectorField(tuple(grid.constant(float(c)) for c in bb)), f)

    @property
    def constant_b(self) -> tuple[float, ...] | None:
        vals = [c.values for c in self.b.components]
        if all(np.ptp(v) == 0 for v in vals):
            return tuple(float(v.flat[0]) for v in vals)
        return None


def _transport(problem: LinProblem, u: GridField) -> GridField:
    Du = gradient(u)
    return GridField(problem.grid, sum(b.values * Du[a].values for a, b in enumerate(problem.b.components)))


def lin_apply(problem: LinProblem, u: GridField, eps: float | None = None) -> GridField:
    """``F(u)`` or, with ``eps``, ``F(u) + eps (u + Delta^2 u)``."""
    out = u - _transport(problem, u) - problem.f
    if eps is not None:
        out = out + apply_reg(u, eps, K_LIN)
    return out


def _symbol(problem: LinProblem, eps: float | None, b: tuple[float, ...]) -> NDArray:
    g = problem.grid
    sym = np.ones(g.spectral_shape, dtype=complex)
    for a in range(g.d):
        sym = sym - b[a] * g.derivative_symbol(a)
    if eps is not None:
        sym = sym + reg_symbol(g, eps, K_LIN)
    return sym


def lin_oracle(problem: LinProblem, eps: float | None = None) -> GridField:
    """Closed-form root for constant ``b``: divide by ``1 - 2 pi i b.xi (+ eps(1 + 16 pi^4 |xi|^4))``."""
    b = problem.constant_b
    if b is None:
        raise ValueError("the Fourier oracle needs a spatially constant drift b")
    return GridField.from_spectrum(problem.grid, problem.f.spectrum / _symbol(problem, eps, b))


# --------------------------------------------------------------------------- trigonometric Galerkin basis


class _TrigBasis:
    """Real basis ``cos(2 pi xi.x)``, ``sin(2 pi xi.x)``, one ``xi`` per ``+-xi`` pair."""

    def __init__(self, grid: TorusGrid) -> None:
        self.grid = grid
        n = grid.n
        reps: list[tuple[int, ...]] = []
        seen: set[tuple[int, ...]] = set()
        for xi in np.ndindex(*grid.shape):
            key = min(xi, tuple((-v) % n for v in xi))
            if key not in seen:
                seen.add(key)
                reps.append(tuple(v - n if v > n // 2 else v for v in key))
        cols, self.terms = [], []
        for xi in reps:
            phase = 2 * np.pi * sum(c * x for c, x in zip(xi, grid.coords))
            cols.append(np.cos(phase).ravel())
            self.terms.append(("c", xi))
            if any(v % n != (-v) % n for v in xi):
                cols.append(np.sin(phase).ravel())
                self.terms.append(("s", xi))
        self.Phi = np.stack(cols, axis=1)
        if self.Phi.shape[1] != grid.size:
            raise RuntimeError("trigonometric basis has the wrong dimension")
        self.mass = grid.cell_volume * np.einsum("ij,ij->j", self.Phi, self.Phi)
        xi2 = np.array([sum(v * v for v in xi) for _, xi in self.terms], dtype=float)
        self.lap2 = (4 * np.pi**2 * xi2) ** 2

    def load(self, f: GridField) -> NDArray:
        """``<f, phi_j>`` by nodal quadrature."""
        return self.grid.cell_volume * (self.Phi.T @ f.values.ravel())

    def field(self, coef: NDArray) -> GridField:
        """Field with basis coefficients ``coef``; its rfft spectrum is filled in exactly."""
        g = self.grid
        n, N = g.n, g.size
        spec = np.zeros(g.spectral_shape, dtype=complex)

        def add(xi: tuple[int, ...], val: complex) -> None:
            idx = tuple(v % n for v in xi)
            if idx[-1] <= n // 2:
                spec[idx] += val

        for c, (kind, xi) in zip(coef, self.terms):
            mxi = tuple(-v for v in xi)
            if kind == "c":
                add(xi, c * N / 2)
                add(mxi, c * N / 2)
            else:
                add(xi, -0.5j * c * N)
                add(mxi, 0.5j * c * N)
        return GridField.from_spectrum(g, spec)


# --------------------------------------------------------------------------- solvers


def _damped_fixed_point(step, u0: GridField, problem: LinProblem, eps: float, theta: float, tol: float, max_iter: int):
    report = SolveReport()
    u = u0
    for it in range(1, max_iter + 1):
        res = lin_apply(problem, u, eps).norm_inf()
        report.residual_history.append(res)
        report.iterations = it - 1
        if res <= tol:
            report.status = "converged"
            break
        u = u + (step(u) - u).scale(theta)
    report.final_residual = lin_apply(problem, u, eps).norm_inf()
    if report.final_residual <= tol:
        report.status = "converged"
    return u, report


def lin_solve(
    problem: LinProblem,
    eps: float,
    method: Literal["variational", "bilinear", "continuation"],
    tol: float = 1e-12,
    max_iter: int = 200000,
    theta: float | None = None,
    steps: int = 4,
) -> tuple[GridField, SolveReport]:
    """Root of ``F_eps`` by one of three routes (see module docstring).

    The fixed-point routes use ``u <- u + theta (T u - u)``; the default
    ``theta = eps / (1 + eps)`` annihilates the constant mode in one step.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    grid = problem.grid
    theta = eps / (1.0 + eps) if theta is None else theta
    u0 = grid.zeros()
    if method == "variational":
        R = reg_symbol(grid, eps, K_LIN)

        def step(u: GridField) -> GridField:
            # argmin of the quadratic functional: eps(1 + |xi|^4 ...) w_hat = -F_hat
            Fu = u - _transport(problem, u) - problem.f
            return GridField.from_spectrum(grid, -Fu.spectrum / R)

        return _damped_fixed_point(step, u0, problem, eps, theta, tol, max_iter)
    if method == "bilinear":
        basis = _TrigBasis(grid)
        diag = eps * (1.0 + basis.lap2) * basis.mass

        def step(u: GridField) -> GridField:
            Fu = u - _transport(problem, u) - problem.f
            return basis.field(-basis.load(Fu) / diag)

        return _damped_fixed_point(step, u0, problem, eps, theta, tol, max_iter)
    if method == "continuation":
        return _continuation(problem, eps, tol, steps)
    raise ValueError(f"unknown method {method!r}")


def _continuation(problem: LinProblem, eps: float, tol: float, steps: int) -> tuple[GridField, SolveReport]:
    grid = problem.grid
    N = grid.size
    bbar = tuple(float(c.values.mean()) for c in problem.b.components)
    P = _symbol(problem, eps, bbar)

    def precond(y: NDArray) -> GridField:
        return GridField.from_spectrum(grid, np.fft.rfftn(y.reshape(grid.shape)) / P)

    def jac(w: GridField) -> GridField:
        return w - _transport(problem, w) + apply_reg(w, eps, K_LIN)

    op = spla.LinearOperator((N, N), matvec=lambda y: np.array(jac(precond(np.asarray(y).ravel())).values.ravel()), dtype=float)
    report = SolveReport()
    u = grid.zeros()
    for j in range(1, steps + 1):
        lam = j / steps
        its = 0
        for its in range(1, 6):
            r = lin_apply(problem, u, eps) + problem.f.scale(1.0 - lam)
            nrm = r.norm_inf()
            report.residual_history.append(nrm)
            if nrm <= tol:
                its -= 1
                break
            y, info = spla.gmres(op, -r.values.ravel(), rtol=1e-14, atol=0.0, restart=50, maxiter=20)
            if info < 0:
                raise RuntimeError(f"GMRES failed with code {info}")
            u = u + precond(y)
        report.lambda_path.append((lam, its))
        report.iterations += its
    report.final_residual = lin_apply(problem, u, eps).norm_inf()
    report.status = "converged" if report.final_residual <= tol else "maxIter"
    return u, report
