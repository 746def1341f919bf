"""
Time-dependent MFG on ``(0, T) x torus`` with an elliptic-in-time regularization.

Discretization:
    * space: the Fourier collocation of ``grid``;
    * time: ``Nt`` nodes with trapezoid weights ``W`` and the summation-by-parts
      first derivative ``D`` (central inside, one-sided at the two ends), so
      ``W D + D^T W = diag(-1, 0, ..., 0, 1)``. With ``m(0)`` and ``u(T)`` pinned
      the time-derivative terms of the monotonicity gap cancel exactly.
    * regularization: ``Q(v1, v2) = eps (<v1, v2> + sum_{|beta| = 2k} <D_beta v1, D_beta v2>)``
      with ``D_beta = D^{beta_0} d_x^{beta_x}``. ``Q`` is block diagonal in the
      spatial Fourier modes; each block is ``eps L^T L`` for a stacked
      derivative matrix ``L`` and is factored by QR of ``L``, which avoids
      squaring the (large) condition number of the block.

The unknowns carry their spatial spectra along, for the same reason as in
the stationary solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

from .grid import GridField, TorusGrid
from .model import Coupling, DomainError, PowerHamiltonian
from .monotone import _band
from .solvers import SolveReport, anderson_weights

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

__all__ = [
    "SpaceTimeGrid",
    "ConstraintSets",
    "SpaceTimeField",
    "TDProblem",
    "QuadraticForm",
    "TDGap",
    "st_quadratic_form",
    "td_apply_F",
    "td_apply_F_eps",
    "td_gap",
    "StepSystem",
    "td_picard_map",
    "td_picard_solve",
    "td_diagnostics",
    "td_weak_vi",
    "TDDiagnostics",
    "st_inner",
    "st_integral",
    "make_td_bank",
    "default_td_order",
]


@dataclass(frozen=True)
class SpaceTimeGrid:
    Nt: int
    nx: int
    d: int = 1
    T: float = 1.0

    def __post_init__(self) -> None:
        if self.Nt < 8:
            raise ValueError(f"need at least 8 time nodes, got Nt={self.Nt}")
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got T={self.T}")

    @cached_property
    def space(self) -> TorusGrid:
        return TorusGrid(self.d, self.nx)

    @property
    def dt(self) -> float:
        return self.T / (self.Nt - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.Nt,) + self.space.shape

    @property
    def spectral_shape(self) -> tuple[int, ...]:
        return (self.Nt,) + self.space.spectral_shape

    @cached_property
    def times(self) -> NDArray[np.float64]:
        return np.linspace(0.0, self.T, self.Nt)

    @cached_property
    def weights(self) -> NDArray[np.float64]:
        """Trapezoid weights in time."""
        w = np.full(self.Nt, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    @cached_property
    def D(self) -> NDArray[np.float64]:
        """Summation-by-parts first derivative in time."""
        n, dt = self.Nt, self.dt
        D = np.zeros((n, n))
        D[0, :2] = (-1.0 / dt, 1.0 / dt)
        D[-1, -2:] = (-1.0 / dt, 1.0 / dt)
        for i in range(1, n - 1):
            D[i, i - 1] = -0.5 / dt
            D[i, i + 1] = 0.5 / dt
        return D

    def Dpow(self, j: int) -> NDArray[np.float64]:
        return np.linalg.matrix_power(self.D, j)

    def field(self, values: ArrayLike | Callable[..., ArrayLike]) -> SpaceTimeField:
        """Field from an array, scalar, or function of ``(t, x[, y])``."""
        if callable(values):
            coords = np.meshgrid(self.times, *([np.arange(self.nx) / self.nx] * self.d), indexing="ij")
            values = values(*coords)
        return SpaceTimeField(self, np.broadcast_to(np.asarray(values, dtype=float), self.shape))

    def lift(self, f: GridField) -> SpaceTimeField:
        """Time-constant extension of a spatial field."""
        spec = np.broadcast_to(f.spectrum, self.spectral_shape)
        return SpaceTimeField(self, np.broadcast_to(f.values, self.shape), spectrum=spec)

    def zeros(self) -> SpaceTimeField:
        return SpaceTimeField.from_spectrum(self, np.zeros(self.spectral_shape, dtype=complex))


class SpaceTimeField:
    """Values indexed ``(t, x...)`` with a cached spatial spectrum per time slice."""

    __slots__ = ("grid", "values", "_spectrum")

    def __init__(self, grid: SpaceTimeGrid, values: ArrayLike, *, spectrum: NDArray | None = None) -> None:
        arr = np.array(values, dtype=float).reshape(grid.shape)
        if not np.isfinite(arr).all():
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
            raise ValueError(f"non-finite value at node {bad}")
        arr.flags.writeable = False
        self.grid = grid
        self.values = arr
        if spectrum is not None:
            spectrum = np.array(spectrum, dtype=complex)
            spectrum.flags.writeable = False
        self._spectrum = spectrum

    @classmethod
    def from_spectrum(cls, grid: SpaceTimeGrid, spectrum: NDArray) -> SpaceTimeField:
        axes = tuple(range(1, grid.d + 1))
        vals = np.fft.irfftn(spectrum, s=grid.space.shape, axes=axes)
        return cls(grid, vals, spectrum=spectrum)

    @property
    def spectrum(self) -> NDArray[np.complex128]:
        if self._spectrum is None:
            spec = np.fft.rfftn(self.values, axes=tuple(range(1, self.grid.d + 1)))
            spec.flags.writeable = False
            self._spectrum = spec
        return self._spectrum

    def _combine(self, other: SpaceTimeField, a: float, b: float) -> SpaceTimeField:
        vals = a * self.values + b * other.values
        if self._spectrum is not None and other._spectrum is not None:
            return SpaceTimeField(self.grid, vals, spectrum=a * self._spectrum + b * other._spectrum)
        return SpaceTimeField(self.grid, vals)

    def __add__(self, other: SpaceTimeField) -> SpaceTimeField:
        return self._combine(other, 1.0, 1.0)

    def __sub__(self, other: SpaceTimeField) -> SpaceTimeField:
        return self._combine(other, 1.0, -1.0)

    def scale(self, c: float) -> SpaceTimeField:
        spec = None if self._spectrum is None else c * self._spectrum
        return SpaceTimeField(self.grid, c * self.values, spectrum=spec)

    def slice(self, i: int) -> GridField:
        spec = None if self._spectrum is None else self._spectrum[i]
        return GridField(self.grid.space, self.values[i], spectrum=spec)

    def with_slice(self, i: int, f: GridField) -> SpaceTimeField:
        """Copy with time slice ``i`` replaced exactly by ``f``."""
        vals = np.array(self.values)
        vals[i] = f.values
        spec = np.array(self.spectrum)
        spec[i] = f.spectrum
        return SpaceTimeField(self.grid, vals, spectrum=spec)

    def time_derivative(self) -> SpaceTimeField:
        D = self.grid.D
        vals = np.tensordot(D, self.values, axes=1)
        spec = None if self._spectrum is None else np.tensordot(D, self._spectrum, axes=1)
        return SpaceTimeField(self.grid, vals, spectrum=spec)

    def with_multiplier(self, symbol: NDArray) -> SpaceTimeField:
        return SpaceTimeField.from_spectrum(self.grid, symbol[None] * self.spectrum)

    def min(self) -> float:
        return float(self.values.min())

    def norm_inf(self) -> float:
        return float(np.abs(self.values).max())

    def slice_masses(self) -> NDArray[np.float64]:
        axes = tuple(range(1, self.grid.d + 1))
        return self.grid.space.cell_volume * self.values.sum(axis=axes)


def st_inner(a: SpaceTimeField, b: SpaceTimeField) -> float:
    """``sum_t W_t h^d sum_x a b``."""
    g = a.grid
    axes = tuple(range(1, g.d + 1))
    return float(g.space.cell_volume * (g.weights * (a.values * b.values).sum(axis=axes)).sum())


def st_integral(a: SpaceTimeField) -> float:
    return float((a.grid.weights * a.slice_masses()).sum())


def default_td_order(d: int) -> int:
    """Smallest ``k`` with ``2k >= (d + 1)/2 + 4``."""
    return int(math.ceil(((d + 1) / 2 + 4) / 2))


@dataclass(frozen=True)
class TDProblem:
    grid: SpaceTimeGrid
    hamiltonian: PowerHamiltonian
    coupling: Coupling
    V: SpaceTimeField
    m0: GridField
    uT: GridField
    k: int | None = None
    raw_m0_mass: float = field(init=False, default=1.0)

    def __post_init__(self) -> None:
        space = self.grid.space
        if self.m0.grid != space or self.uT.grid != space or self.V.grid != self.grid:
            raise ValueError("m0, uT and V must live on the problem grids")
        if self.m0.min() <= 0:
            raise ValueError(f"initial density must be positive, min m0 = {self.m0.min()!r}")
        mass = float(space.cell_volume * self.m0.values.sum())
        object.__setattr__(self, "raw_m0_mass", mass)
        object.__setattr__(self, "m0", self.m0.scale(1.0 / mass))
        if self.k is not None and (int(self.k) != self.k or self.k < 1):
            raise ValueError(f"regularization order must be a positive integer, got k={self.k}")

    @property
    def order(self) -> int:
        return default_td_order(self.grid.d) if self.k is None else int(self.k)


@dataclass(frozen=True)
class ConstraintSets:
    """The admissible sets of a problem and their shifted versions.

    ``A = {m : m(0) = m0, m >= 0}`` and ``B = {u : u(T) = uT}``. The shifted
    sets subtract the time-constant lifts, so ``A~ = {w : w(0) = 0, w >= -m0}``
    and ``B~ = {v : v(T) = 0}``. ``A*`` adds unit spatial mass on every slice.
    """

    problem: TDProblem

    @property
    def m_lift(self) -> SpaceTimeField:
        return self.problem.grid.lift(self.problem.m0)

    @property
    def u_lift(self) -> SpaceTimeField:
        return self.problem.grid.lift(self.problem.uT)

    def project_A(self, m: SpaceTimeField) -> SpaceTimeField:
        """Clamp at zero, then pin the first slice."""
        return SpaceTimeField(m.grid, np.maximum(m.values, 0.0)).with_slice(0, self.problem.m0)

    def project_B(self, u: SpaceTimeField) -> SpaceTimeField:
        return u.with_slice(u.grid.Nt - 1, self.problem.uT)

    def shift_A(self, m: SpaceTimeField) -> SpaceTimeField:
        return m - self.m_lift

    def shift_B(self, u: SpaceTimeField) -> SpaceTimeField:
        return u - self.u_lift

    def in_A(self, m: SpaceTimeField, tol: float = 0.0) -> bool:
        return bool(m.min() >= -tol and np.abs(m.values[0] - self.problem.m0.values).max() <= tol)

    def in_B(self, u: SpaceTimeField, tol: float = 0.0) -> bool:
        return bool(np.abs(u.values[-1] - self.problem.uT.values).max() <= tol)

    def in_A_star(self, m: SpaceTimeField, tol: float = 1e-12) -> bool:
        return self.in_A(m, tol) and bool(np.abs(m.slice_masses() - 1.0).max() <= tol)


# --------------------------------------------------------------------------- quadratic form


def _spatial_weights(space: TorusGrid, order: int) -> NDArray[np.float64]:
    """``sum_{|b| = order} prod_a |symbol of d_a^{b_a}|^2`` per spatial mode."""
    out = np.zeros(space.spectral_shape)
    for beta in product(range(order + 1), repeat=space.d):
        if sum(beta) != order:
            continue
        term = np.ones(space.spectral_shape)
        for a, b in enumerate(beta):
            if b:
                term = term * np.abs(space.derivative_symbol(a, b)) ** 2
        out = out + term
    return out


class QuadraticForm:
    """``Q(v1, v2) = eps (<v1, v2> + sum_{|beta|=2k} <D_beta v1, D_beta v2>)``.

    For spatial mode ``xi`` the form acts on the vector of time values as
    ``K[xi] = eps L[xi]^T L[xi]``, with ``L[xi]`` the stack of
    ``sqrt(c_j(xi)) W^{1/2} D^j``. ``K`` is never formed: its entries reach
    ``eps dt^{-4k}`` and products with it lose everything to round-off. All
    solves and residuals go through thin QR factors of ``L``.
    """

    def __init__(self, grid: SpaceTimeGrid, k: int, eps: float) -> None:
        if not eps > 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.grid, self.k, self.eps = grid, int(k), float(eps)
        space = grid.space
        sw = np.sqrt(grid.weights)[:, None]
        self.modes = list(np.ndindex(*space.spectral_shape))
        coef = [_spatial_weights(space, 2 * k - j) for j in range(2 * k + 1)]
        coef[0] = coef[0] + 1.0
        Dj = [sw * grid.Dpow(j) for j in range(2 * k + 1)]
        self.L = {}
        for xi in self.modes:
            blocks = [np.sqrt(coef[j][xi]) * Dj[j] for j in range(2 * k + 1) if coef[j][xi] > 0]
            self.L[xi] = np.vstack(blocks)
        self._qr: dict[tuple[str, tuple], NDArray] = {}
        # Parseval weights for the half spectrum
        n = space.n
        last = np.arange(space.spectral_shape[-1])
        w = np.where((last == 0) | (last == n // 2), 1.0, 2.0)
        self.parseval = np.broadcast_to(w, space.spectral_shape) / space.size**2

    def _free(self, which: str) -> NDArray[np.int64]:
        Nt = self.grid.Nt
        return np.arange(1, Nt) if which == "m" else np.arange(0, Nt - 1)

    def _qr_free(self, which: str, xi: tuple) -> tuple[NDArray, NDArray]:
        key = (which, xi)
        if key not in self._qr:
            F = self._free(which)
            self._qr[key] = scipy.linalg.qr(self.L[xi][:, F], mode="economic")
        return self._qr[key]

    def _R(self, which: str, xi: tuple) -> NDArray:
        return self._qr_free(which, xi)[1]

    def __call__(self, v1: SpaceTimeField, v2: SpaceTimeField) -> float:
        a, b = v1.spectrum, v2.spectrum
        total = 0.0
        for xi in self.modes:
            s = (slice(None),) + xi
            L = self.L[xi]
            total += self.parseval[xi] * self.eps * float(np.real(np.conj(L @ b[s]) @ (L @ a[s])))
        return total

    def weighted_apply(self, v: SpaceTimeField) -> NDArray[np.complex128]:
        """Spectrum of ``W (Q-operator) v``, i.e. ``K[xi] v_hat[xi]`` for each mode."""
        a = v.spectrum
        out = np.zeros(self.grid.spectral_shape, dtype=complex)
        for xi in self.modes:
            s = (slice(None),) + xi
            L = self.L[xi]
            out[s] = self.eps * (L.T @ (L @ a[s]))
        return out

    def apply(self, v: SpaceTimeField) -> SpaceTimeField:
        """Strong form ``Q-operator v`` with ``<Q-operator v1, v2> = Q(v1, v2)``."""
        w = self.grid.weights.reshape((-1,) + (1,) * self.grid.d)
        return SpaceTimeField.from_spectrum(self.grid, self.weighted_apply(v) / w)

    def solve_pinned(self, which: str, rhs_w: NDArray, pinned: GridField | None) -> NDArray[np.complex128]:
        """Spectrum of ``v`` with ``(K v)_F = rhs_w_F`` and ``v`` equal to ``pinned`` off ``F``.

        ``which='m'`` pins the first time slice, ``'u'`` the last one.
        """
        F = self._free(which)
        P = 0 if which == "m" else self.grid.Nt - 1
        out = np.zeros(self.grid.spectral_shape, dtype=complex)
        ps = np.zeros(self.grid.space.spectral_shape, dtype=complex) if pinned is None else pinned.spectrum
        for xi in self.modes:
            s = (slice(None),) + xi
            # the pinned-slice lift goes through the Q factor; K itself is never formed
            Qf, R = self._qr_free(which, xi)
            y = scipy.linalg.solve_triangular(R, rhs_w[s][F] / self.eps, trans="T")
            y = y - Qf.T @ (self.L[xi][:, P] * ps[xi])
            col = np.empty(self.grid.Nt, dtype=complex)
            col[F] = scipy.linalg.solve_triangular(R, y)
            col[P] = ps[xi]
            out[s] = col
        return out

    def kernel_block(self, kern: NDArray, rows: NDArray, cols: NDArray) -> NDArray[np.float64]:
        """Rows ``rows`` and columns ``cols`` (flat node indices) of the ``mu -> m`` matrix."""
        g = self.grid
        n = g.space.n
        r = np.unravel_index(rows, g.shape)
        c = np.unravel_index(cols, g.shape)
        shift = tuple((r[a + 1][:, None] - c[a + 1][None, :]) % n for a in range(g.d))
        return kern[(r[0][:, None], c[0][None, :]) + shift]

    def dual_residual(self, which: str, v: SpaceTimeField, load_w: NDArray) -> float:
        """Q-dual norm of ``(Q-operator v) + r`` on the free slices.

        ``load_w`` is the spectrum of ``W r``. The norm is
        ``sup <Q-operator v + r, z> / sqrt(Q(z, z))`` over ``z`` vanishing on the
        pinned slice. It is evaluated through the thin QR factor of the stacked
        derivative matrix, so ``K v`` is never formed: in the time direction
        ``K`` has entries of size ``eps dt^{-4k}`` and the product would be
        pure round-off.
        """
        F = self._free(which)
        a = v.spectrum
        total = 0.0
        for xi in self.modes:
            s = (slice(None),) + xi
            Qf, R = self._qr_free(which, xi)
            y = self.eps * (Qf.T @ (self.L[xi] @ a[s]))
            y = y + scipy.linalg.solve_triangular(R, load_w[s][F], trans="T")
            total += self.parseval[xi] * float(np.vdot(y, y).real) / self.eps
        return math.sqrt(max(total, 0.0))


def st_quadratic_form(grid: SpaceTimeGrid, k: int, eps: float) -> QuadraticForm:
    return QuadraticForm(grid, k, eps)


# --------------------------------------------------------------------------- operators


def _grad(space: TorusGrid, f: SpaceTimeField) -> NDArray[np.float64]:
    axes = tuple(range(1, space.d + 1))
    comps = []
    for a in range(space.d):
        spec = space.derivative_symbol(a)[None] * f.spectrum
        comps.append(np.fft.irfftn(spec, s=space.shape, axes=axes))
    return np.stack(comps)


def _div(space: TorusGrid, flux: NDArray) -> NDArray[np.complex128]:
    axes = tuple(range(1, space.d + 1))
    spec = sum(space.derivative_symbol(a)[None] * np.fft.rfftn(flux[a], axes=axes) for a in range(space.d))
    return spec


def td_apply_F(problem: TDProblem, m: SpaceTimeField, u: SpaceTimeField) -> tuple[SpaceTimeField, SpaceTimeField]:
    """``e1 = u_t + Lap u - H(Du) + g(m) + V``, ``e2 = m_t - Lap m - div(m DpH(Du))``."""
    g = problem.grid
    space = g.space
    P = _grad(space, u)
    H = problem.hamiltonian.value(P)
    DpH = problem.hamiltonian.grad(P)
    lap = -space.k2
    e1 = u.time_derivative() + u.with_multiplier(lap)
    e1 = e1 + SpaceTimeField(g, problem.coupling.value(m.values) - H) + problem.V
    divspec = _div(space, m.values[None] * DpH)
    flux_div = SpaceTimeField.from_spectrum(g, divspec)
    e2 = m.time_derivative() - m.with_multiplier(lap) - flux_div
    return e1, e2


def td_apply_F_eps(
    problem: TDProblem, Q: QuadraticForm, m: SpaceTimeField, u: SpaceTimeField
) -> tuple[SpaceTimeField, SpaceTimeField]:
    e1, e2 = td_apply_F(problem, m, u)
    return e1 + Q.apply(m), e2 + Q.apply(u)


@dataclass(frozen=True)
class TDGap:
    bregman1: float
    bregman2: float
    coupling: float
    boundary: float
    reg: float
    total: float
    direct: float

    @property
    def mismatch(self) -> float:
        scale = sum(abs(x) for x in (self.bregman1, self.bregman2, self.coupling, self.boundary, self.reg))
        return abs(self.direct - self.total) / max(scale, abs(self.direct), 1e-300)


def td_gap(
    problem: TDProblem,
    s1: tuple[SpaceTimeField, SpaceTimeField],
    s2: tuple[SpaceTimeField, SpaceTimeField],
    Q: QuadraticForm | None = None,
) -> TDGap:
    """``<F(s1) - F(s2), s1 - s2>`` directly and by decomposition.

    The ``boundary`` part is ``h^d sum_x [U M]_{t=0}^{t=T}``, which vanishes when
    ``m(0)`` and ``u(T)`` agree between the two states.
    """
    (m1, u1), (m2, u2) = s1, s2
    if min(m1.min(), m2.min()) < 0:
        raise DomainError("the gap needs m >= 0")
    op = (lambda m, u: td_apply_F(problem, m, u)) if Q is None else (lambda m, u: td_apply_F_eps(problem, Q, m, u))
    a1, a2 = op(m1, u1)
    b1, b2 = op(m2, u2)
    M, U = m1 - m2, u1 - u2
    direct = st_inner(a1 - b1, M) + st_inner(a2 - b2, U)
    g = problem.grid
    space = g.space
    H = problem.hamiltonian
    P1, P2 = _grad(space, u1), _grad(space, u2)
    wt = g.weights.reshape((-1,) + (1,) * g.d) * space.cell_volume

    def breg(P: NDArray, Qp: NDArray) -> NDArray:
        return H.value(Qp) - H.value(P) - (H.grad(P) * (Qp - P)).sum(axis=0)

    br1 = float((wt * m1.values * breg(P1, P2)).sum())
    br2 = float((wt * m2.values * breg(P2, P1)).sum())
    cp = problem.coupling
    cpl = float((wt * (cp.value(m1.values) - cp.value(m2.values)) * M.values).sum())
    bnd = space.cell_volume * float((U.values[-1] * M.values[-1]).sum() - (U.values[0] * M.values[0]).sum())
    rq = 0.0 if Q is None else Q(M, M) + Q(U, U)
    total = br1 + br2 + cpl + bnd + rq
    return TDGap(br1, br2, cpl, bnd, rq, total, direct)


# --------------------------------------------------------------------------- Picard


@dataclass
class TDObstacle:
    m: SpaceTimeField
    mu: SpaceTimeField
    method: str
    iterations: int
    active: NDArray


class StepSystem:
    """Per-mode SPD system ``S m_F = rhs`` for the density on the free slices ``t > 0``.

    ``splitting='frozen'`` freezes the whole operator: ``S = K_mm``, and the
    value function is solved afterwards from the frozen second row.
    ``splitting='skew-implicit'`` keeps the time-derivative and Laplacian
    coupling between the rows implicit. With ``C = [W (D + Lap)]_{m rows, u cols}``
    the second row gives ``u_F = K_uu^{-1}(z - E m_F)``, and ``E = -C^T`` on
    the free blocks by summation by parts, so ``S = K_mm + C K_uu^{-1} C^T``
    stays SPD. ``S = M^T M`` for the stacked factor
    ``M = [sqrt(eps) L_m; R_u^{-T} C^T]``, factored by thin QR. Right-hand
    sides that are images of ``M^T`` (the lifts of ``m0`` and ``uT``) are
    applied through the orthogonal factor, so no stiff product is formed.
    """

    def __init__(self, Q: QuadraticForm, splitting: str) -> None:
        if splitting not in ("frozen", "skew-implicit"):
            raise ValueError(f"unknown splitting {splitting!r}")
        self.Q, self.splitting = Q, splitting
        g = Q.grid
        self.Fm, self.Fu = Q._free("m"), Q._free("u")
        Wd = np.diag(g.weights)
        WD = Wd @ g.D
        k2 = g.space.k2
        self.se = math.sqrt(Q.eps)
        self.fac: dict[tuple, tuple[NDArray, NDArray]] = {}
        self.C: dict[tuple, NDArray] = {}
        self.E: dict[tuple, NDArray] = {}
        for xi in Q.modes:
            if splitting == "frozen":
                Qm, Rm = Q._qr_free("m", xi)
                self.fac[xi] = (Qm, self.se * Rm)
                continue
            C = (WD - k2[xi] * Wd)[self.Fm]
            E = (WD + k2[xi] * Wd)[self.Fu]
            X = scipy.linalg.solve_triangular(self._Ru(xi), C[:, self.Fu].T, trans="T")
            M = np.vstack([self.se * Q.L[xi][:, self.Fm], X])
            self.fac[xi] = scipy.linalg.qr(M, mode="economic")
            self.C[xi], self.E[xi] = C, E
        self._kern: NDArray | None = None

    def _Ru(self, xi: tuple) -> NDArray:
        return self.se * self.Q._R("u", xi)

    def _tri(self, R: NDArray, y: NDArray) -> NDArray:
        return scipy.linalg.solve_triangular(R, y)

    def _triT(self, R: NDArray, y: NDArray) -> NDArray:
        return scipy.linalg.solve_triangular(R, y, trans="T")

    def solve(self, xi: tuple, rhs: NDArray) -> NDArray:
        R = self.fac[xi][1]
        return self._tri(R, self._triT(R, rhs))

    def kernel(self) -> NDArray[np.float64]:
        """``kern[t, s, x]``: density response at ``(t, x)`` to a unit multiplier at ``(s, 0)``."""
        if self._kern is None:
            g = self.Q.grid
            F = self.Fm
            spec = np.zeros((g.Nt, g.Nt) + g.space.spectral_shape, dtype=complex)
            eye = np.eye(F.size) * g.weights[F][None, :]
            for xi in self.Q.modes:
                spec[(F[:, None], F[None, :]) + xi] = self.solve(xi, eye)
            self._kern = np.fft.irfftn(spec, s=g.space.shape, axes=tuple(range(2, g.d + 2)))
        return self._kern

    def frozen_parts(
        self, problem: TDProblem, m: SpaceTimeField, u: SpaceTimeField
    ) -> tuple[SpaceTimeField, SpaceTimeField]:
        """The parts of ``(e1, e2)`` at ``(m, u)`` that the step treats explicitly."""
        e1, e2 = td_apply_F(problem, m, u)
        if self.splitting == "skew-implicit":
            lap = -self.Q.grid.space.k2
            e1 = e1 - u.time_derivative() - u.with_multiplier(lap)
            e2 = e2 - m.time_derivative() + m.with_multiplier(lap)
        return e1, e2

    def prepare(self, problem: TDProblem, e1: SpaceTimeField, e2: SpaceTimeField) -> dict[tuple, tuple]:
        """Per mode: ``(y0, z)`` with ``m_F = R^{-1}(y0 + R^{-T} W mu_F)`` and ``z`` for the ``u`` solve."""
        g = self.Q.grid
        W = g.weights.reshape((-1,) + (1,) * g.d)
        w1, w2 = W * e1.spectrum, W * e2.spectrum
        m0, uT = problem.m0.spectrum, problem.uT.spectrum
        N = g.Nt - 1
        out = {}
        for xi in self.Q.modes:
            s = (slice(None),) + xi
            Qs, R = self.fac[xi]
            L = self.Q.L[xi]
            lift_m = self.se * (L[:, 0] * m0[xi])
            if self.splitting == "frozen":
                y0 = self._triT(R, -w1[s][self.Fm]) - Qs.T @ lift_m
                out[xi] = (y0, None)
                continue
            Qu = self.Q._qr_free("u", xi)[0]
            E, C = self.E[xi], self.C[xi]
            z = self._triT(self._Ru(xi), -E[:, 0] * m0[xi] - w2[s][self.Fu]) - Qu.T @ (self.se * L[:, N] * uT[xi])
            top = Qs[: L.shape[0]].T @ lift_m
            y0 = self._triT(R, -w1[s][self.Fm] - C[:, N] * uT[xi]) - top - Qs[L.shape[0] :].T @ z
            out[xi] = (y0, z)
        return out

    def density(self, problem: TDProblem, prep: dict[tuple, tuple], mu: NDArray | None) -> SpaceTimeField:
        g = self.Q.grid
        wmu = None
        if mu is not None:
            W = g.weights.reshape((-1,) + (1,) * g.d)
            wmu = W * np.fft.rfftn(mu.reshape(g.shape), axes=tuple(range(1, g.d + 1)))
        out = np.zeros(g.spectral_shape, dtype=complex)
        out[0] = problem.m0.spectrum
        for xi in self.Q.modes:
            s = (slice(None),) + xi
            R = self.fac[xi][1]
            y = prep[xi][0]
            if wmu is not None:
                y = y + self._triT(R, wmu[s][self.Fm])
            out[s][self.Fm] = self._tri(R, y)
        return SpaceTimeField.from_spectrum(g, out).with_slice(0, problem.m0)

    def value(
        self, problem: TDProblem, m: SpaceTimeField, e2: SpaceTimeField, prep: dict[tuple, tuple]
    ) -> SpaceTimeField:
        """Second row for ``u`` given the new density."""
        g = self.Q.grid
        if self.splitting == "frozen":
            W = g.weights.reshape((-1,) + (1,) * g.d)
            u = SpaceTimeField.from_spectrum(g, self.Q.solve_pinned("u", -W * e2.spectrum, problem.uT))
            return u.with_slice(g.Nt - 1, problem.uT)
        ms = m.spectrum
        N = g.Nt - 1
        out = np.zeros(g.spectral_shape, dtype=complex)
        out[N] = problem.uT.spectrum
        for xi in self.Q.modes:
            s = (slice(None),) + xi
            Ru = self._Ru(xi)
            y = prep[xi][1] - self._triT(Ru, self.E[xi][:, self.Fm] @ ms[s][self.Fm])
            out[s][self.Fu] = self._tri(Ru, y)
        return SpaceTimeField.from_spectrum(g, out).with_slice(N, problem.uT)


def _td_obstacle(
    problem: TDProblem,
    system: StepSystem,
    rhs: dict[tuple, tuple],
    active0: NDArray | None = None,
    max_iter: int = 200,
    kkt_tol: float = 1e-9,
) -> TDObstacle:
    """Minimize ``1/2 m.S m - b.m`` over the free slices with ``m >= 0``.

    ``rhs`` holds the per-mode data of ``b`` (see ``StepSystem.prepare``).
    As in the stationary case the multiplier ``mu >= 0`` is the unknown:
    ``m(mu) = S^{-1}(b + W mu)``, so stationarity holds by construction and
    the active-set loop only has to settle the signs. The map ``mu -> m`` is
    translation invariant in space, so its matrix is assembled from one kernel
    per pair of time slices. ``active0`` warm-starts the contact set.
    """
    g = problem.grid
    base = system.density(problem, rhs, None)
    free = np.zeros(g.shape, dtype=bool)
    free[1:] = True
    free = free.ravel()
    bv = base.values.ravel()
    if bv[free].min() >= 0 and (active0 is None or active0.size == 0):
        return TDObstacle(base, g.zeros(), "unconstrained", 0, np.zeros(0, dtype=np.int64))
    kern = system.kernel()
    Q = system.Q
    active = np.flatnonzero(free & (bv < 0)) if active0 is None else active0
    c = 1.0 / max(float(np.abs(kern).max()), 1e-300)
    seen: set[bytes] = set()
    it = 0
    m = base
    mu = np.zeros(bv.size)
    ok = False
    for it in range(1, max_iter + 1):
        mu = np.zeros(bv.size)
        if active.size:
            Gaa = Q.kernel_block(kern, active, active)
            mu[active] = scipy.linalg.lstsq(Gaa, -bv[active], cond=1e-15, check_finite=False)[0]
            for _ in range(2):
                mv = system.density(problem, rhs, mu).values.ravel()
                mu[active] += scipy.linalg.lstsq(Gaa, -mv[active], cond=1e-15, check_finite=False)[0]
        m = system.density(problem, rhs, mu) if active.size else base
        mv = m.values.ravel()
        new_active = np.flatnonzero(free & (mu - c * mv > 0))
        if np.array_equal(new_active, active):
            ok = mu.min() >= -kkt_tol and mv[free].min() >= -kkt_tol
            break
        key = new_active.tobytes()
        if key in seen:
            break
        seen.add(key)
        active = new_active
    method = "active-set"
    if not ok:
        method = "nnls"
        mu = _td_nnls(Q, kern, bv, free)
        m = system.density(problem, rhs, mu)
        active = np.flatnonzero(mu > 0)
    vals = np.array(m.values)
    vals[1:] = np.maximum(vals[1:], 0.0)  # round-off negatives on the contact set
    m = SpaceTimeField(g, vals, spectrum=m.spectrum)
    return TDObstacle(m, SpaceTimeField(g, mu.reshape(g.shape)), method, it, active)


def _td_nnls(Q: QuadraticForm, kern: NDArray, bv: NDArray, free: NDArray) -> NDArray:
    """Dual fallback: ``min 1/2 mu.P mu + mu.(w m_base)`` over ``mu >= 0`` with ``P = w G``.

    ``P`` is symmetric positive semidefinite; with ``P = A^T A`` this is the
    NNLS problem ``min |A mu + A^{+T} w m_base|``.
    """
    g = Q.grid
    idx = np.flatnonzero(free)
    wn = np.broadcast_to(g.weights.reshape((-1,) + (1,) * g.d), g.shape).ravel()[idx]
    P = wn[:, None] * Q.kernel_block(kern, idx, idx)
    P = 0.5 * (P + P.T)
    lam, vec = np.linalg.eigh(P)
    keep = lam > lam.max() * 1e-14
    A = (vec[:, keep] * np.sqrt(lam[keep])).T
    rhs = (vec[:, keep] / np.sqrt(lam[keep])).T @ (wn * bv[idx])
    sol, _ = scipy.optimize.nnls(A, -rhs, maxiter=50 * idx.size)
    mu = np.zeros(bv.size)
    mu[idx] = sol
    return mu


def td_picard_map(
    problem: TDProblem,
    system: StepSystem,
    m: SpaceTimeField,
    u: SpaceTimeField,
    active0: NDArray | None = None,
) -> tuple[SpaceTimeField, SpaceTimeField, TDObstacle]:
    """One step: obstacle solve for the density, then the pinned linear solve for ``u``."""
    e1, e2 = system.frozen_parts(problem, m, u)
    prep = system.prepare(problem, e1, e2)
    obst = _td_obstacle(problem, system, prep, active0)
    return obst.m, system.value(problem, obst.m, e2, prep), obst


def td_picard_solve(
    problem: TDProblem,
    eps: float,
    damping: float = 1.0,
    tol: float = 1e-9,
    max_iter: int = 2000,
    acceleration: str = "anderson",
    depth: int = 20,
    kkt_tol: float = 1e-8,
    res_tol: float = 1e-6,
    splitting: str = "skew-implicit",
    initial: tuple[SpaceTimeField, SpaceTimeField] | None = None,
) -> tuple[SpaceTimeField, SpaceTimeField, SolveReport]:
    """Damped fixed-point iteration of ``td_picard_map``, Anderson-accelerated by default.

    Mixed iterates are accepted only when the density stays nonnegative;
    otherwise the plain damped step is used. ``converged`` needs the increment
    below ``tol``, the KKT triple of the density row within ``kkt_tol`` and
    both stationarity residuals below ``res_tol`` in the Q-dual norm. The
    strong residual is not usable: the time-stiff form turns it into
    round-off.
    """
    g = problem.grid
    Q = QuadraticForm(g, problem.order, eps)
    system = StepSystem(Q, splitting)
    if initial is None:
        m, u = g.lift(problem.m0), g.lift(problem.uT)
    else:
        m, u = initial
    report = SolveReport()
    hist_x: list[tuple[SpaceTimeField, SpaceTimeField]] = []
    hist_g: list[tuple[SpaceTimeField, SpaceTimeField]] = []
    obst = None
    for it in range(1, max_iter + 1):
        m2, u2, obst = td_picard_map(problem, system, m, u, None if obst is None else obst.active)
        gm, gu = m2 - m, u2 - u
        res = max(gm.norm_inf(), gu.norm_inf())
        report.residual_history.append(res)
        report.iterations = it
        if res <= tol:
            m, u = m2, u2
            break
        nm, nu = m + gm.scale(damping), u + gu.scale(damping)
        if acceleration == "anderson":
            hist_x.append((m, u))
            hist_g.append((gm, gu))
            del hist_x[:-depth], hist_g[:-depth]
            a = anderson_weights([np.concatenate([x.values.ravel(), y.values.ravel()]) for x, y in hist_g])
            mm, uu = g.zeros(), g.zeros()
            for ai, (xm, xu), (ggm, ggu) in zip(a, hist_x, hist_g):
                mm = mm + (xm + ggm.scale(damping)).scale(ai)
                uu = uu + (xu + ggu.scale(damping)).scale(ai)
            if mm.values[1:].min() >= 0:
                nm, nu = mm, uu
        elif acceleration != "none":
            raise ValueError(f"unknown acceleration {acceleration!r}")
        m = nm.with_slice(0, problem.m0)
        u = nu.with_slice(g.Nt - 1, problem.uT)
    report.details.update(_td_kkt(problem, Q, m, u, obst))
    report.details["splitting"] = splitting
    report.min_m = m.min()
    inc = report.residual_history[-1]
    report.final_residual = inc
    ok = (
        inc <= tol
        and report.details["min_mu"] >= -kkt_tol
        and abs(report.details["complementarity"]) <= kkt_tol
        and report.min_m >= 0
        and report.details["m_row_dual"] <= res_tol
        and report.details["u_row_dual"] <= res_tol
    )
    report.status = "converged" if ok else "maxIter"
    return m, u, report


def _td_kkt(
    problem: TDProblem, Q: QuadraticForm, m: SpaceTimeField, u: SpaceTimeField, obst: TDObstacle | None
) -> dict[str, float]:
    g = problem.grid
    W = g.weights.reshape((-1,) + (1,) * g.d)
    e1, e2 = td_apply_F(problem, m, u)
    mu = obst.mu if obst is not None else g.zeros()
    return {
        "m_row_dual": Q.dual_residual("m", m, W * (e1.spectrum - mu.spectrum)),
        "u_row_dual": Q.dual_residual("u", u, W * e2.spectrum),
        "min_mu": mu.min(),
        "complementarity": st_inner(mu, m),
        "m0_slice_error": float(np.abs(m.values[0] - problem.m0.values).max()),
        "uT_slice_error": float(np.abs(u.values[-1] - problem.uT.values).max()),
    }


# --------------------------------------------------------------------------- bank and diagnostics


def _smooth_trig(g: SpaceTimeGrid, rng: np.random.Generator, K: int, tmodes: int = 2) -> NDArray:
    space = g.space
    t = g.times.reshape((-1,) + (1,) * g.d) / g.T
    xs = np.meshgrid(*([np.arange(space.n) / space.n] * g.d), indexing="ij")

    def coef() -> NDArray:
        return sum(rng.normal() * np.cos(np.pi * j * t) for j in range(tmodes + 1))

    vals = coef() * np.ones(g.shape)
    for xi in _band(space, K):
        phase = 2 * np.pi * sum(c * x for c, x in zip(xi, xs))
        amp = 1.0 / (1.0 + np.linalg.norm(xi))
        vals = vals + amp * (coef() * np.cos(phase)[None] + coef() * np.sin(phase)[None])
    return vals


def make_td_bank(
    problem: TDProblem, count: int, seed: int, delta0: float = 0.05, band: int | None = None, v_scale: float = 0.5
) -> list[tuple[SpaceTimeField, SpaceTimeField]]:
    """Pairs ``(w, v)`` with ``w(0) = m0``, unit mass per slice, ``w > 0`` and ``v(T) = uT``.

    ``w = (1 - t/T) m0 + (t/T) q`` with ``q = r^2 + delta0`` scaled to unit mass
    per slice, ``v = uT + (1 - t/T) r'``; ``r, r'`` are random trigonometric
    fields with smooth time coefficients. The first two entries are
    ``(m0, uT)`` and the blend of ``m0`` towards the uniform density.
    """
    g = problem.grid
    space = g.space
    K = max(1, min(4, space.n // 8)) if band is None else band
    t = (g.times / g.T).reshape((-1,) + (1,) * g.d)
    m0 = g.lift(problem.m0)
    uT = g.lift(problem.uT)
    bank = [(m0, uT), (SpaceTimeField(g, (1 - t) * m0.values + t), uT)]
    rng = np.random.default_rng(seed)
    axes = tuple(range(1, g.d + 1))
    while len(bank) < count:
        r2 = _smooth_trig(g, rng, K) ** 2
        r2 = r2 * (1.0 - delta0) / (space.cell_volume * r2.sum(axis=axes, keepdims=True))
        w = (1 - t) * m0.values + t * (r2 + delta0)
        v = uT.values + (1 - t) * v_scale * _smooth_trig(g, rng, K)
        bank.append((SpaceTimeField(g, w), SpaceTimeField(g, v)))
    return bank[:count]


@dataclass
class TDDiagnostics:
    """Bank residuals and space-time integrals of a candidate ``(m, u)``.

    ``apriori = mgm + Du_alpha`` with ``mgm = int int m g(m)`` and
    ``Du_alpha = int int |Du|^alpha``.
    """

    max_weak_vi: float
    weak_vi: list[float]
    apriori: float
    mgm: float
    Du_alpha: float
    mDu: float
    intM: float
    intU: float
    intUM: float
    intH: float
    minM: float
    slice_mass: NDArray
    mean_adjust_defect: float


def td_weak_vi(
    problem: TDProblem, m: SpaceTimeField, u: SpaceTimeField, w: SpaceTimeField, v: SpaceTimeField
) -> float:
    """``<F(w, v), (m, u) - (w, v)>`` with the unregularized operator."""
    e1, e2 = td_apply_F(problem, w, v)
    return st_inner(e1, m - w) + st_inner(e2, u - v)


def td_diagnostics(
    problem: TDProblem,
    m: SpaceTimeField,
    u: SpaceTimeField,
    bank: Sequence[tuple[SpaceTimeField, SpaceTimeField]],
) -> TDDiagnostics:
    """Weak-VI residuals against the bank with per-slice mean-adjusted ``u``, and a priori data.

    ``mean_adjust_defect`` is the largest ``|<e2(w, v), u - u_bar>|`` over the
    bank; it vanishes because every ``w`` carries unit mass on each slice.
    """
    g = problem.grid
    masses = u.slice_masses().reshape((-1,) + (1,) * g.d)
    ubar = u - SpaceTimeField(g, np.broadcast_to(masses, g.shape))
    res = []
    defect = 0.0
    for w, v in bank:
        res.append(td_weak_vi(problem, m, ubar, w, v))
        _, e2 = td_apply_F(problem, w, v)
        defect = max(defect, abs(st_inner(e2, u - ubar)))
    space = g.space
    P = _grad(space, u)
    wt = g.weights.reshape((-1,) + (1,) * g.d) * space.cell_volume
    absDu = np.sqrt((P * P).sum(axis=0)) ** problem.hamiltonian.alpha
    mgm = float((wt * m.values * problem.coupling.value(m.values)).sum())
    dua = float((wt * absDu).sum())
    return TDDiagnostics(
        max_weak_vi=max(res) if res else float("-inf"),
        weak_vi=res,
        apriori=mgm + dua,
        mgm=mgm,
        Du_alpha=dua,
        mDu=float((wt * m.values * absDu).sum()),
        intM=st_integral(m),
        intU=st_integral(u),
        intUM=st_inner(u, m),
        intH=float((wt * problem.hamiltonian.value(P)).sum()),
        minM=m.min(),
        slice_mass=m.slice_masses(),
        mean_adjust_defect=defect,
    )
