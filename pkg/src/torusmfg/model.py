"""
Problem data and the discrete stationary MFG operators.

The unknown is a pair ``(m, u)``: a density and a value function. With the
power Hamiltonian ``H(p) = |p|^alpha / alpha`` and an increasing coupling
``g``, the operator is

    e1 = -u + nu Lap u - H(Du) + g(m) - V
    e2 =  m - nu Lap m - div(m DpH(Du)) - phi

Its regularized versions add ``eps (I + Delta^{2k})`` to both rows, and the
penalized lambda-family also adds the barrier ``p_eps(m)`` to the first row.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal, Sequence

import numpy as np

from .grid import (
    GridField,
    GridVectorField,
    TorusGrid,
    apply_reg,
    divergence,
    gradient,
    integrate,
    laplacian_power,
)

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

__all__ = [
    "PowerHamiltonian",
    "Coupling",
    "Penalty",
    "MFGProblem",
    "RegParams",
    "StatePair",
    "DomainError",
    "hamiltonian_eval",
    "legendre_verify",
    "growth_check",
    "penalty_eval",
    "apply_F",
    "apply_F_eps",
    "apply_F_eps_lambda",
    "frozen_rhs",
    "default_reg_order",
]


class DomainError(ValueError):
    """A state violates a positivity requirement (e.g. ``m <= 0`` where forbidden)."""


# --------------------------------------------------------------------------- Hamiltonian


@dataclass(frozen=True)
class PowerHamiltonian:
    """``H(p) = |S p|^alpha / alpha`` with an optional diagonal axis scale ``S``."""

    alpha: float
    scale: tuple[float, ...] | None = None
    curvature_cap: float = 1e8

    def __post_init__(self) -> None:
        if not self.alpha > 1:
            raise ValueError(f"Hamiltonian exponent must satisfy alpha > 1 (Assumption 2), got {self.alpha}")
        if self.scale is not None and any(s <= 0 for s in self.scale):
            raise ValueError(f"axis scales must be positive, got {self.scale}")

    @property
    def alpha_conj(self) -> float:
        """Lagrangian exponent ``alpha'`` with ``1/alpha + 1/alpha' = 1``."""
        return self.alpha / (self.alpha - 1.0)

    def _scaled(self, p: NDArray) -> tuple[NDArray, NDArray]:
        s = np.ones(p.shape[0]) if self.scale is None else np.asarray(self.scale, dtype=float)
        if s.size != p.shape[0]:
            raise ValueError(f"scale has {s.size} entries for a {p.shape[0]}-vector")
        s = s.reshape((-1,) + (1,) * (p.ndim - 1))
        return s, s * p

    def value(self, p: NDArray) -> NDArray:
        """``H`` at points ``p`` of shape ``(d, ...)``."""
        _, q = self._scaled(np.asarray(p, dtype=float))
        r = np.sqrt((q * q).sum(axis=0))
        return r**self.alpha / self.alpha

    def grad(self, p: NDArray) -> NDArray:
        """``DpH(p) = S |Sp|^{alpha-2} S p``, zero at the origin."""
        s, q = self._scaled(np.asarray(p, dtype=float))
        r = np.sqrt((q * q).sum(axis=0))
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(r > 0, r ** (self.alpha - 2.0), 0.0)
        return s * fac * q

    def hess(self, p: NDArray) -> NDArray:
        """``D2ppH`` of shape ``(d, d, ...)``; the factor ``|p|^{alpha-2}`` is capped for ``alpha < 2``."""
        s, q = self._scaled(np.asarray(p, dtype=float))
        d = q.shape[0]
        r = np.sqrt((q * q).sum(axis=0))
        a = self.alpha
        with np.errstate(divide="ignore", invalid="ignore"):
            if a == 2.0:
                fac = np.ones_like(r)
            elif a > 2.0:
                fac = np.where(r > 0, r ** (a - 2.0), 0.0)
            else:
                fac = np.where(r > 0, np.minimum(r ** (a - 2.0), self.curvature_cap), self.curvature_cap)
            qhat = np.where(r > 0, q / np.where(r > 0, r, 1.0), 0.0)
        eye = np.eye(d).reshape((d, d) + (1,) * (q.ndim - 1))
        outer = qhat[:, None] * qhat[None, :]
        hq = fac * (eye + (a - 2.0) * outer)
        return s[:, None] * hq * s[None, :]

    def lagrangian(self, v: NDArray) -> NDArray:
        """Convex conjugate ``L(v) = |S^{-1} v|^{alpha'} / alpha'``."""
        v = np.asarray(v, dtype=float)
        s = np.ones(v.shape[0]) if self.scale is None else np.asarray(self.scale, dtype=float)
        w = v / s.reshape((-1,) + (1,) * (v.ndim - 1))
        r = np.sqrt((w * w).sum(axis=0))
        return r**self.alpha_conj / self.alpha_conj


def hamiltonian_eval(spec: PowerHamiltonian, p: Sequence[float]) -> tuple[float, tuple[float, ...], NDArray]:
    """``(H(p), DpH(p), D2ppH(p))`` at a single point."""
    pv = np.asarray(p, dtype=float).reshape(-1)
    H = float(spec.value(pv))
    DH = tuple(float(x) for x in spec.grad(pv))
    return H, DH, np.asarray(spec.hess(pv), dtype=float)


@dataclass(frozen=True)
class LegendreCheck:
    H_num: float
    H_exact: float
    gap: float
    maximizer: tuple[float, ...]
    inconclusive: bool


def legendre_verify(
    spec: PowerHamiltonian, p: Sequence[float], v_box: float, grid_n: int
) -> LegendreCheck:
    """Brute-force ``sup_v (-v.p - L(v))`` over a uniform ``grid_n^d`` box grid.

    The grid is symmetric and contains ``v = 0`` when ``grid_n`` is odd. A
    maximizer on the box boundary flags the result as inconclusive.
    """
    pv = np.asarray(p, dtype=float).reshape(-1)
    d = pv.size
    axis = np.linspace(-v_box, v_box, grid_n)
    V = np.stack(np.meshgrid(*([axis] * d), indexing="ij"))
    vals = -np.tensordot(pv, V, axes=1) - spec.lagrangian(V)
    idx = np.unravel_index(int(np.argmax(vals)), vals.shape)
    H_num = float(vals[idx])
    H_ex = float(spec.value(pv))
    on_edge = any(i in (0, grid_n - 1) for i in idx)
    return LegendreCheck(
        H_num=H_num,
        H_exact=H_ex,
        gap=abs(H_num - H_ex),
        maximizer=tuple(float(V[(a,) + idx]) for a in range(d)),
        inconclusive=bool(on_edge),
    )


@dataclass(frozen=True)
class GrowthReport:
    constant: float
    lhs_identity: list[float]
    violations: list[int]

    @property
    def ok(self) -> bool:
        return not self.violations


def growth_check(spec: PowerHamiltonian, samples: Sequence[Sequence[float]], C: float | None = None) -> GrowthReport:
    """Check ``-H + DpH.p >= |p|^alpha/C - C`` and ``H >= |p|^alpha/C - C`` at samples."""
    C = max(spec.alpha, 2.0) if C is None else float(C)
    lhs, bad = [], []
    for i, p in enumerate(samples):
        pv = np.asarray(p, dtype=float).reshape(-1)
        H = float(spec.value(pv))
        DH = spec.grad(pv)
        t = -H + float(DH @ pv)
        lhs.append(t)
        growth = float(np.linalg.norm(pv)) ** spec.alpha / C - C
        if t < growth or H < growth:
            bad.append(i)
    return GrowthReport(constant=C, lhs_identity=lhs, violations=bad)


# --------------------------------------------------------------------------- coupling


@dataclass(frozen=True)
class Coupling:
    """Local coupling ``g``: ``power`` (m^gamma), ``linear`` (m) or ``entropy`` (m ln m)."""

    kind: Literal["power", "linear", "entropy"] = "linear"
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("power", "linear", "entropy"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if self.kind == "power" and not self.gamma >= 1:
            raise ValueError(f"power coupling needs gamma >= 1, got {self.gamma}")

    def check_domain(self, m: NDArray) -> None:
        if self.kind == "entropy":
            bad = np.argwhere(m <= 0)
            if bad.size:
                raise DomainError(f"entropy coupling needs m > 0; m = {m[tuple(bad[0])]!r} at node {tuple(int(i) for i in bad[0])}")
        elif self.kind == "power" and self.gamma != 1.0:
            bad = np.argwhere(m < 0)
            if bad.size:
                raise DomainError(f"power coupling needs m >= 0; m = {m[tuple(bad[0])]!r} at node {tuple(int(i) for i in bad[0])}")

    def value(self, m: NDArray) -> NDArray:
        m = np.asarray(m, dtype=float)
        self.check_domain(m)
        if self.kind == "linear":
            return m.copy()
        if self.kind == "power":
            return m**self.gamma
        return m * np.log(m)

    def deriv(self, m: NDArray) -> NDArray:
        m = np.asarray(m, dtype=float)
        self.check_domain(m)
        if self.kind == "linear":
            return np.ones_like(m)
        if self.kind == "power":
            return self.gamma * m ** (self.gamma - 1.0) if self.gamma != 1.0 else np.ones_like(m)
        return np.log(m) + 1.0


# --------------------------------------------------------------------------- penalty


def _smoothstep5(s: NDArray) -> tuple[NDArray, NDArray]:
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s * s), 30.0 * s * s * (1.0 - s) ** 2


@dataclass(frozen=True)
class Penalty:
    """Barrier ``p_eps``: ``-t^{-(d+1)}`` below ``eps/2``, zero above ``eps``.

    On ``[eps/2, eps]`` the barrier is ``-(1 - S(s)) t^{-(d+1)}`` with the quintic
    smoothstep ``S`` of ``s = (t - eps/2)/(eps/2)``, i.e. ``log(-p)`` is shifted by
    ``log(1 - S)``. Both factors are monotone, so ``p_eps`` is nondecreasing,
    and ``S' = S'' = 0`` at the ends gives C2 junctions.
    """

    eps: float
    d: int

    def __post_init__(self) -> None:
        if not 0 < self.eps < 1:
            raise ValueError(f"penalty eps must lie in (0, 1), got {self.eps}")

    def _check(self, t: NDArray) -> None:
        bad = np.argwhere(~(t > 0))
        if bad.size:
            idx = tuple(int(i) for i in bad[0])
            raise DomainError(f"penalty needs strictly positive density; m = {t[idx]!r} at node {idx}")

    def value(self, t: NDArray) -> NDArray:
        t = np.asarray(t, dtype=float)
        self._check(t)
        q = self.d + 1
        S, _ = _smoothstep5((t - 0.5 * self.eps) / (0.5 * self.eps))
        return -(1.0 - S) * t ** (-q)

    def deriv(self, t: NDArray) -> NDArray:
        t = np.asarray(t, dtype=float)
        self._check(t)
        q = self.d + 1
        half = 0.5 * self.eps
        S, dS = _smoothstep5((t - half) / half)
        return dS / half * t ** (-q) + (1.0 - S) * q * t ** (-q - 1)


def penalty_eval(pen: Penalty, t: float) -> tuple[float, float]:
    if not t > 0:
        raise DomainError(f"penalty is defined for t > 0, got {t}")
    return float(pen.value(np.array(t))), float(pen.deriv(np.array(t)))


# --------------------------------------------------------------------------- problem data


@dataclass(frozen=True)
class StatePair:
    m: GridField
    u: GridField

    def __post_init__(self) -> None:
        if self.m.grid != self.u.grid:
            raise ValueError("m and u live on different grids")

    @property
    def grid(self) -> TorusGrid:
        return self.m.grid

    def __add__(self, other: StatePair) -> StatePair:
        return StatePair(self.m + other.m, self.u + other.u)

    def __sub__(self, other: StatePair) -> StatePair:
        return StatePair(self.m - other.m, self.u - other.u)

    def scale(self, c: float) -> StatePair:
        return StatePair(self.m.scale(c), self.u.scale(c))

    def axpy(self, c: float, other: StatePair) -> StatePair:
        """``self + c * other``."""
        return StatePair(self.m + other.m.scale(c), self.u + other.u.scale(c))

    def norm_inf(self) -> float:
        return max(self.m.norm_inf(), self.u.norm_inf())

    def pack(self) -> NDArray[np.float64]:
        return np.concatenate([self.m.values.ravel(), self.u.values.ravel()])

    @classmethod
    def zeros(cls, grid: TorusGrid) -> StatePair:
        return cls(grid.zeros(), grid.zeros())


@dataclass(frozen=True)
class MFGProblem:
    """Stationary MFG data; ``phi`` is normalized to unit mass at construction."""

    grid: TorusGrid
    hamiltonian: PowerHamiltonian
    coupling: Coupling
    V: GridField
    phi: GridField
    nu: float = 0.0
    raw_phi_mass: float = field(init=False, default=1.0)

    def __post_init__(self) -> None:
        for name in ("V", "phi"):
            if getattr(self, name).grid != self.grid:
                raise ValueError(f"{name} is not on the problem grid")
        if self.nu < 0:
            raise ValueError(f"viscosity must be nonnegative, got nu={self.nu}")
        phi = self.phi
        if phi.min() <= 0:
            idx = tuple(int(i) for i in np.unravel_index(int(np.argmin(phi.values)), phi.values.shape))
            raise ValueError(f"phi must be positive at every node; phi = {phi.min()!r} at node {idx}")
        mass = integrate(phi)
        object.__setattr__(self, "raw_phi_mass", mass)
        object.__setattr__(self, "phi", phi.scale(1.0 / mass))


def default_reg_order(d: int) -> int:
    """Smallest ``k`` with ``2k > d/2 + 3``."""
    return int(math.floor((d / 2 + 3) / 2)) + 1


@dataclass(frozen=True)
class RegParams:
    """Regularization ``eps (I + Delta^{2k})`` and operator variant."""

    eps: float
    k: int | None = None
    variant: Literal["plain", "penalized"] = "plain"

    def __post_init__(self) -> None:
        if not 0 < self.eps < 1:
            raise ValueError(f"regularization eps must lie in (0, 1), got {self.eps}")
        if self.k is not None and (int(self.k) != self.k or self.k < 1):
            raise ValueError(f"regularization order must be a positive integer, got k={self.k}")
        if self.variant not in ("plain", "penalized"):
            raise ValueError(f"unknown regularization variant {self.variant!r}")

    def order(self, d: int) -> int:
        k0 = default_reg_order(d)
        if self.k is None:
            return k0
        if 2 * self.k <= d / 2 + 3:
            warnings.warn(
                f"k={self.k} is below the coercivity threshold 2k > d/2 + 3 (default k={k0})",
                stacklevel=3,
            )
        return int(self.k)

    def penalty(self, d: int) -> Penalty:
        return Penalty(self.eps, d)


# --------------------------------------------------------------------------- operators


def _drift(problem: MFGProblem, u: GridField) -> tuple[GridVectorField, NDArray, NDArray]:
    Du = gradient(u)
    P = Du.stack()
    return Du, problem.hamiltonian.value(P), problem.hamiltonian.grad(P)


def _flux_div(problem: MFGProblem, m: GridField, DpH: NDArray) -> GridField:
    flux = GridVectorField.from_arrays(problem.grid, m.values[None] * DpH)
    return divergence(flux)


def _rows(problem: MFGProblem, s: StatePair, lam: float) -> tuple[GridField, GridField]:
    # lambda-scaled plain operator without the source terms
    m, u = s.m, s.u
    _, H, DpH = _drift(problem, u)
    gm = problem.coupling.value(m.values)
    e1 = -u + problem.grid.field(lam * (gm - H))
    e2 = m - _flux_div(problem, m, DpH).scale(lam)
    if problem.nu:
        e1 = e1 + laplacian_power(u, 1).scale(lam * problem.nu)
        e2 = e2 - laplacian_power(m, 1).scale(lam * problem.nu)
    return e1, e2


def apply_F(problem: MFGProblem, s: StatePair) -> tuple[GridField, GridField]:
    """Unregularized operator ``(e1, e2)``."""
    e1, e2 = _rows(problem, s, 1.0)
    return e1 - problem.V, e2 - problem.phi


def apply_F_eps(problem: MFGProblem, reg: RegParams, s: StatePair) -> tuple[GridField, GridField]:
    """``F`` plus ``eps (I + Delta^{2k})`` on both rows."""
    k = reg.order(problem.grid.d)
    e1, e2 = apply_F(problem, s)
    return e1 + apply_reg(s.m, reg.eps, k), e2 + apply_reg(s.u, reg.eps, k)


def apply_F_eps_lambda(
    problem: MFGProblem, reg: RegParams, lam: float, s: StatePair
) -> tuple[GridField, GridField]:
    """Penalized lambda-family; at ``lam = 0`` the root is a known constant state."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    k = reg.order(problem.grid.d)
    pen = reg.penalty(problem.grid.d)
    pm = pen.value(s.m.values)
    e1, e2 = _rows(problem, s, lam)
    e1 = e1 - problem.V.scale(lam) + problem.grid.field(pm) + apply_reg(s.m, reg.eps, k)
    e2 = e2 - problem.phi.scale(lam) - (1.0 - lam) + apply_reg(s.u, reg.eps, k)
    return e1, e2


def frozen_rhs(problem: MFGProblem, s1: StatePair) -> tuple[GridField, GridField]:
    """Frozen coefficients ``(f1, f2)`` so that ``F(s1) = (f1, -f2)``."""
    e1, e2 = apply_F(problem, s1)
    return e1, -e2
