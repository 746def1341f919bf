"""
Uniform periodic grids on the unit torus and Fourier spectral operators.

Every linear operator here is a Fourier multiplier applied to the real FFT
(``numpy.fft.rfftn``) of a field. Fields remember the spectrum they were built
from, so chains of linear operators never round-trip through nodal values.
That matters for the high-order regularization: the symbol of
``eps * (1 + Delta^{2k})`` reaches ~1e16 on a 64-point grid, and recomputing
a spectrum from rounded nodal values would amplify round-off by that factor.

Conventions:
    * nodes ``x_j = j h`` with ``h = 1/n`` on each axis;
    * pairing ``<f, g> = h^d sum f g``;
    * first derivatives zero the Nyquist mode, even powers of the Laplacian
      keep it, so ``divergence`` is exactly ``-gradient^T`` in the pairing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

__all__ = [
    "TorusGrid",
    "GridField",
    "GridVectorField",
    "gradient",
    "divergence",
    "laplacian_power",
    "integrate",
    "inner",
    "apply_reg",
    "reg_symbol",
]


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid with ``n`` nodes per axis on the unit ``d``-torus."""

    d: int
    n: int

    def __post_init__(self) -> None:
        if self.d not in (1, 2):
            raise ValueError(f"grid dimension must be 1 or 2, got d={self.d}")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"nodes per axis must be a power of two >= 8, got n={self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @cached_property
    def coords(self) -> tuple[NDArray[np.float64], ...]:
        """Nodal coordinates, one broadcastable array per axis (``indexing='ij'``)."""
        x = np.arange(self.n) * self.h
        return tuple(np.meshgrid(*([x] * self.d), indexing="ij"))

    @cached_property
    def wavenumbers(self) -> NDArray[np.int64]:
        """Integer frequencies in ``[-n/2, n/2)`` in FFT order."""
        return np.fft.fftfreq(self.n, d=1.0 / self.n).round().astype(np.int64)

    @cached_property
    def spectral_shape(self) -> tuple[int, ...]:
        return self.shape[:-1] + (self.n // 2 + 1,)

    @cached_property
    def _axis_freqs(self) -> tuple[NDArray[np.float64], ...]:
        # frequencies in rfftn layout; the last axis is the half axis
        out = []
        for a in range(self.d):
            if a == self.d - 1:
                k = np.arange(self.n // 2 + 1, dtype=float)
            else:
                k = self.wavenumbers.astype(float)
            shp = [1] * self.d
            shp[a] = k.size
            out.append(k.reshape(shp))
        return tuple(out)

    @cached_property
    def _nyquist_masks(self) -> tuple[NDArray[np.bool_], ...]:
        return tuple(np.abs(k) == self.n // 2 for k in self._axis_freqs)

    def derivative_symbol(self, axis: int, order: int = 1) -> NDArray[np.complex128]:
        """Multiplier of ``d^order / dx_axis^order``; odd orders vanish at Nyquist."""
        k = self._axis_freqs[axis]
        sym = (2j * np.pi * k) ** order
        if order % 2:
            sym = np.where(self._nyquist_masks[axis], 0.0, sym)
        return np.broadcast_to(sym, self.spectral_shape).astype(complex)

    @cached_property
    def k2(self) -> NDArray[np.float64]:
        """``4 pi^2 |xi|^2`` in rfftn layout (the symbol of ``-Delta``)."""
        out = np.zeros(self.spectral_shape)
        for k in self._axis_freqs:
            out = out + (2.0 * np.pi * k) ** 2
        return out

    def field(self, values: ArrayLike | Callable[..., ArrayLike]) -> GridField:
        """Build a field from an array, a scalar, or a function of the coordinates."""
        if callable(values):
            values = values(*self.coords)
        arr = np.broadcast_to(np.asarray(values, dtype=float), self.shape)
        return GridField(self, arr)

    def zeros(self) -> GridField:
        return GridField.from_spectrum(self, np.zeros(self.spectral_shape, dtype=complex))

    def constant(self, c: float) -> GridField:
        spec = np.zeros(self.spectral_shape, dtype=complex)
        spec[(0,) * self.d] = c * self.size
        return GridField.from_spectrum(self, spec)


def _first_bad_node(values: NDArray[np.float64]) -> tuple[int, ...] | None:
    bad = np.argwhere(~np.isfinite(values))
    return tuple(int(i) for i in bad[0]) if bad.size else None


class GridField:
    """Real scalar field on a ``TorusGrid``, immutable, with a cached spectrum."""

    __slots__ = ("grid", "values", "_spectrum")

    def __init__(
        self,
        grid: TorusGrid,
        values: ArrayLike,
        *,
        spectrum: NDArray[np.complex128] | None = None,
    ) -> None:
        arr = np.array(values, dtype=float).reshape(grid.shape)
        node = _first_bad_node(arr)
        if node is not None:
            raise ValueError(f"non-finite field value at node {node}: {arr[node]!r}")
        arr.flags.writeable = False
        self.grid = grid
        self.values = arr
        if spectrum is not None:
            spectrum = np.array(spectrum, dtype=complex)
            spectrum.flags.writeable = False
        self._spectrum = spectrum

    @classmethod
    def from_spectrum(cls, grid: TorusGrid, spectrum: NDArray[np.complex128]) -> GridField:
        values = np.fft.irfftn(spectrum, s=grid.shape, axes=tuple(range(grid.d)))
        return cls(grid, values, spectrum=spectrum)

    @property
    def spectrum(self) -> NDArray[np.complex128]:
        if self._spectrum is None:
            spec = np.fft.rfftn(self.values, axes=tuple(range(self.grid.d)))
            spec.flags.writeable = False
            self._spectrum = spec
        return self._spectrum

    @property
    def has_spectrum(self) -> bool:
        return self._spectrum is not None

    def with_multiplier(self, symbol: NDArray) -> GridField:
        return GridField.from_spectrum(self.grid, symbol * self.spectrum)

    def _check_grid(self, other: GridField) -> None:
        if other.grid != self.grid:
            raise ValueError(f"grid mismatch: {self.grid} vs {other.grid}")

    def _linear(self, other: GridField | float, a: float, b: float) -> GridField:
        # a*self + b*other, keeping the spectrum exact when both sides have one
        if isinstance(other, GridField):
            self._check_grid(other)
            vals = a * self.values + b * other.values
            if self.has_spectrum and other.has_spectrum:
                return GridField(self.grid, vals, spectrum=a * self._spectrum + b * other._spectrum)
            return GridField(self.grid, vals)
        c = float(other)
        vals = a * self.values + b * c
        if self.has_spectrum:
            spec = a * self._spectrum
            spec[(0,) * self.grid.d] += b * c * self.grid.size
            return GridField(self.grid, vals, spectrum=spec)
        return GridField(self.grid, vals)

    def __add__(self, other: GridField | float) -> GridField:
        return self._linear(other, 1.0, 1.0)

    __radd__ = __add__

    def __sub__(self, other: GridField | float) -> GridField:
        return self._linear(other, 1.0, -1.0)

    def __rsub__(self, other: float) -> GridField:
        return self._linear(other, -1.0, 1.0)

    def __neg__(self) -> GridField:
        return self.scale(-1.0)

    def scale(self, c: float) -> GridField:
        spec = c * self._spectrum if self.has_spectrum else None
        return GridField(self.grid, c * self.values, spectrum=spec)

    def __mul__(self, other: GridField | float) -> GridField:
        if isinstance(other, GridField):
            self._check_grid(other)
            return GridField(self.grid, self.values * other.values)
        return self.scale(float(other))

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> GridField:
        return self.scale(1.0 / float(c))

    def map(self, fn: Callable[[NDArray], NDArray]) -> GridField:
        """Pointwise nonlinear map (drops the spectrum cache)."""
        return GridField(self.grid, fn(self.values))

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())

    def norm_inf(self) -> float:
        return float(np.abs(self.values).max())

    def norm_l2(self) -> float:
        return float(np.sqrt(inner(self, self)))

    def __repr__(self) -> str:
        return f"GridField(d={self.grid.d}, n={self.grid.n}, range=[{self.min():.3g}, {self.max():.3g}])"


@dataclass(frozen=True)
class GridVectorField:
    """``d`` scalar components on a common grid."""

    components: tuple[GridField, ...]
    grid: TorusGrid = field(init=False)

    def __post_init__(self) -> None:
        comps = tuple(self.components)
        if not comps:
            raise ValueError("vector field needs at least one component")
        g = comps[0].grid
        for a, c in enumerate(comps):
            if c.grid != g:
                raise ValueError(f"component {a} lives on {c.grid}, expected {g}")
        if len(comps) != g.d:
            raise ValueError(f"expected {g.d} components, got {len(comps)}")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "grid", g)

    @classmethod
    def from_arrays(cls, grid: TorusGrid, arrays: Sequence[ArrayLike]) -> GridVectorField:
        return cls(tuple(GridField(grid, a) for a in arrays))

    def stack(self) -> NDArray[np.float64]:
        """Nodal values as an array of shape ``(d, *grid.shape)``."""
        return np.stack([c.values for c in self.components])

    def __getitem__(self, a: int) -> GridField:
        return self.components[a]

    def __len__(self) -> int:
        return len(self.components)


def gradient(f: GridField) -> GridVectorField:
    """Spectral gradient: axis ``a`` gets the multiplier ``i 2 pi xi_a``."""
    g = f.grid
    return GridVectorField(tuple(f.with_multiplier(g.derivative_symbol(a)) for a in range(g.d)))


def divergence(V: GridVectorField) -> GridField:
    """Sum of spectral axis derivatives; the exact negative adjoint of ``gradient``."""
    g = V.grid
    spec = sum(g.derivative_symbol(a) * V[a].spectrum for a in range(g.d))
    return GridField.from_spectrum(g, spec)


def laplacian_power(f: GridField, j: int) -> GridField:
    """``Delta^j f`` via the multiplier ``(-4 pi^2 |xi|^2)^j``."""
    if int(j) != j or j < 1:
        raise ValueError(f"Laplacian power must be a positive integer, got {j}")
    return f.with_multiplier((-f.grid.k2) ** int(j))


def integrate(f: GridField) -> float:
    return float(f.grid.cell_volume * f.values.sum())


def inner(f: GridField, g: GridField) -> float:
    if f.grid != g.grid:
        raise ValueError(f"grid mismatch: {f.grid} vs {g.grid}")
    return float(f.grid.cell_volume * np.vdot(f.values, g.values))


def reg_symbol(grid: TorusGrid, eps: float, k: int) -> NDArray[np.float64]:
    """Multiplier ``eps (1 + (4 pi^2 |xi|^2)^{2k})`` of ``eps (I + Delta^{2k})``."""
    return eps * (1.0 + grid.k2 ** (2 * k))


def apply_reg(f: GridField, eps: float, k: int) -> GridField:
    """``eps (f + Delta^{2k} f)``."""
    if not eps > 0:
        raise ValueError(f"regularization weight must be positive, got eps={eps}")
    if int(k) != k or k < 1:
        raise ValueError(f"regularization order must be a positive integer, got k={k}")
    return f.with_multiplier(reg_symbol(f.grid, eps, int(k)))
