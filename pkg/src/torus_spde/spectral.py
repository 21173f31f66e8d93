"""Fourier representation of real fields on the unit torus [0, 1)^d.

Coefficients use the basis ``e_k(x) = exp(2 pi i k.x)`` so that
``f(x) = sum_k fhat_k e_k(x)`` and ``Delta e_k = -4 pi^2 |k|^2 e_k``.
Real fields are stored in the half-spectrum layout of ``rfftn``: the last
axis holds ``k_d >= 0`` and the remaining ``(-k)`` entries are implied by
conjugate symmetry.

Array conventions used throughout the package:

* a scalar spectral array has shape ``(*batch, *grid.spec_shape)``;
* a vector spectral array has shape ``(*batch, d, *grid.spec_shape)``.

The :class:`FourierGrid` methods work on raw arrays (that is what the time
steppers use); the module-level functions accept and return
:class:`SpectralField` values.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi
FOUR_PI2 = 4.0 * np.pi**2


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class FourierGrid:
    """Uniform ``N^d`` grid on the unit torus with its wavevector tables.

    Stored wavevector components lie in ``(-N/2, N/2]``.  Modes with any
    ``3 |k_i| >= N`` are removed by :meth:`dealias`.
    """

    N: int
    d: int = 2
    workers: int = 1

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        if self.N < 4 or self.N % 2:
            raise ValueError(f"modes_per_axis must be an even integer >= 4, got {self.N}")

    def __eq__(self, other):
        return isinstance(other, FourierGrid) and (self.N, self.d) == (other.N, other.d)

    def __hash__(self):
        return hash((self.N, self.d))

    # -- layout ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def spec_shape(self) -> tuple[int, ...]:
        return (self.N,) * (self.d - 1) + (self.N // 2 + 1,)

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.d, 0))

    @property
    def band(self) -> int:
        """Largest wavevector component kept by the two-thirds rule."""
        return (self.N - 1) // 3

    @property
    def _vec(self):
        # inserts the component axis in front of the grid axes
        return (..., None) + (slice(None),) * self.d

    @cached_property
    def k(self) -> np.ndarray:
        """Integer wavevectors, shape ``(d, *spec_shape)``."""
        full = np.fft.fftfreq(self.N, 1.0 / self.N).astype(np.int64)
        full[full == -self.N // 2] = self.N // 2
        half = np.arange(self.N // 2 + 1, dtype=np.int64)
        comps = [full] * (self.d - 1) + [half]
        return np.stack(np.meshgrid(*comps, indexing="ij"))

    @cached_property
    def k2(self) -> np.ndarray:
        return (self.k**2).sum(axis=0).astype(float)

    @cached_property
    def multiplicity(self) -> np.ndarray:
        """1 or 2: how many modes of the full spectrum each stored entry stands for."""
        last = self.k[-1]
        m = np.where((last > 0) & (last < self.N // 2), 2.0, 1.0)
        return m

    @cached_property
    def nyquist(self) -> np.ndarray:
        return (np.abs(self.k) == self.N // 2).any(axis=0)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        return (3 * np.abs(self.k) < self.N).all(axis=0)

    @cached_property
    def ik(self) -> np.ndarray:
        """Gradient multiplier ``2 pi i k`` with Nyquist entries zeroed."""
        out = 1j * TWO_PI * self.k.astype(float)
        out[:, self.nyquist] = 0.0
        return out

    @cached_property
    def inv_k2(self) -> np.ndarray:
        """``1 / |k|^2`` with 0 at the mean mode."""
        with np.errstate(divide="ignore"):
            out = np.where(self.k2 > 0, 1.0 / self.k2, 0.0)
        return out

    def index_of(self, k) -> tuple[tuple[int, ...], bool]:
        """Array index of wavevector ``k`` and whether it is stored conjugated."""
        k = tuple(int(c) for c in k)
        if len(k) != self.d:
            raise ValueError(f"wavevector {k} does not have {self.d} components")
        half = self.N // 2
        if any(abs(c) > half for c in k):
            raise IndexError(f"wavevector {k} not representable on N={self.N}")
        conj = k[-1] < 0
        if conj:
            k = tuple(-c for c in k)
        idx = tuple(c % self.N for c in k[:-1]) + (k[-1],)
        return idx, conj

    # -- transforms -----------------------------------------------------
    def forward(self, u: np.ndarray) -> np.ndarray:
        return sfft.rfftn(u, axes=self.axes, norm="forward", workers=self.workers)

    def inverse(self, uh: np.ndarray) -> np.ndarray:
        return sfft.irfftn(uh, s=self.shape, axes=self.axes, norm="forward", workers=self.workers)

    def coordinates(self) -> np.ndarray:
        """Physical sample points, shape ``(d, N, ..., N)``."""
        x = np.arange(self.N) / self.N
        return np.stack(np.meshgrid(*([x] * self.d), indexing="ij"))

    # -- norms ----------------------------------------------------------
    def sobolev_weights(self, s: float) -> np.ndarray:
        k2 = np.where(self.k2 > 0, self.k2, 1.0)
        return self.multiplicity * k2**s

    def sobolev_norm(self, uh: np.ndarray, s: float = 0.0, vector: bool = False) -> np.ndarray:
        """``(|f_0|^2 + sum_{k != 0} |k|^{2s} |f_k|^2)^{1/2}``, reduced over the grid axes."""
        axes = tuple(range(-self.d - 1, 0)) if vector else self.axes
        w = self.sobolev_weights(s)
        return np.sqrt(np.sum(w * (uh.real**2 + uh.imag**2), axis=axes))

    def l2_norm(self, uh: np.ndarray, vector: bool = False) -> np.ndarray:
        return self.sobolev_norm(uh, 0.0, vector)

    def inner(self, fh: np.ndarray, gh: np.ndarray) -> np.ndarray:
        """Real L^2 inner product of two real fields."""
        return np.sum(self.multiplicity * (fh * gh.conj()).real, axis=self.axes)

    # -- operators ------------------------------------------------------
    def dealias(self, uh: np.ndarray) -> np.ndarray:
        return uh * self.dealias_mask

    def gradient(self, fh: np.ndarray) -> np.ndarray:
        return self.ik * fh[self._vec]

    def divergence(self, vh: np.ndarray) -> np.ndarray:
        return np.sum(self.ik * vh, axis=-self.d - 1)

    def laplacian(self, fh: np.ndarray) -> np.ndarray:
        return -FOUR_PI2 * self.k2 * fh

    def heat(self, fh: np.ndarray, t: float, delta: float) -> np.ndarray:
        if t < 0 or delta <= 0:
            raise ValueError("heat semigroup needs t >= 0 and delta > 0")
        return np.exp(-FOUR_PI2 * delta * t * self.k2) * fh

    def perp(self) -> np.ndarray:
        """``2 pi i k^perp`` with ``k^perp = (k_2, -k_1)`` (2D only)."""
        if self.d != 2:
            raise ValueError("perpendicular gradient is only defined for d=2")
        ik = self.ik
        return np.stack([ik[1], -ik[0]])

    def curl(self, uh: np.ndarray) -> np.ndarray:
        """Scalar vorticity ``d_1 u_2 - d_2 u_1`` of a 2D vector field."""
        ik = self.ik
        return ik[0] * uh[..., 1, :, :] - ik[1] * uh[..., 0, :, :]

    @cached_property
    def _biot_savart(self) -> np.ndarray:
        return self.perp() / FOUR_PI2 * self.inv_k2

    def biot_savart(self, wh: np.ndarray) -> np.ndarray:
        """Velocity ``grad^perp (-Delta)^{-1} w``; the mean mode is ignored."""
        return self._biot_savart * wh[self._vec]

    def k_beta(self, wh: np.ndarray, beta: float) -> np.ndarray:
        """``grad^perp (-Delta)^{-(1+beta)/2} w`` for ``beta`` in (0, 1]."""
        if not 0.0 < beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {beta}")
        if beta == 1.0:
            return self.biot_savart(wh)
        lam = FOUR_PI2 * self.k2
        with np.errstate(divide="ignore"):
            mult = np.where(self.k2 > 0, lam ** (-(1.0 + beta) / 2.0), 0.0)
        return self.perp() * mult * wh[self._vec]

    @cached_property
    def _inv_gradient(self) -> np.ndarray:
        return self.ik / FOUR_PI2 * self.inv_k2

    def inv_gradient(self, fh: np.ndarray) -> np.ndarray:
        """``grad (-Delta)^{-1} (f - mean f)``; satisfies ``div(.) = -f + mean f``."""
        return self._inv_gradient * fh[self._vec]

    def product(self, fh: np.ndarray, gh: np.ndarray) -> np.ndarray:
        """Dealiased pseudospectral product of two real fields."""
        f = self.inverse(self.dealias(fh))
        g = self.inverse(self.dealias(gh))
        return self.dealias(self.forward(f * g))

    def advect(self, vh: np.ndarray, fh: np.ndarray) -> np.ndarray:
        """Dealiased ``(v . grad) f`` for a vector field ``v`` and scalar ``f``."""
        v = self.inverse(self.dealias(vh))
        grad = self.inverse(self.gradient(self.dealias(fh)))
        return self.dealias(self.forward(np.sum(v * grad, axis=-self.d - 1)))

    # -- checks ---------------------------------------------------------
    def hermitian_defect(self, uh: np.ndarray) -> float:
        """Largest violation of ``c(-k) = conj c(k)`` inside the stored planes.

        Only the last-axis planes ``k_d = 0`` and ``k_d = N/2`` hold both
        ``k`` and ``-k``; elsewhere the symmetry is implied by the layout.
        """
        worst = 0.0
        for j in (0, self.N // 2):
            plane = uh[..., j]
            flipped = plane
            for ax in range(-(self.d - 1), 0):
                flipped = np.roll(np.flip(flipped, axis=ax), 1, axis=ax)
            worst = max(worst, float(np.max(np.abs(plane - flipped.conj()), initial=0.0)))
        return worst


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real field on the torus given by its half-spectrum coefficients."""

    grid: FourierGrid
    coeffs: np.ndarray

    @property
    def component_count(self) -> int:
        extra = self.coeffs.ndim - self.grid.d
        return self.coeffs.shape[0] if extra == 1 else 1

    @property
    def is_vector(self) -> bool:
        return self.coeffs.ndim == self.grid.d + 1

    @classmethod
    def from_physical(cls, grid: FourierGrid, samples) -> "SpectralField":
        return forward_transform(grid, samples)

    @classmethod
    def zeros(cls, grid: FourierGrid, components: int = 1) -> "SpectralField":
        shape = grid.spec_shape if components == 1 else (components, *grid.spec_shape)
        return cls(grid, np.zeros(shape, complex))

    def physical(self) -> np.ndarray:
        return inverse_transform(self)

    def coefficient(self, k) -> complex | np.ndarray:
        idx, conj = self.grid.index_of(k)
        c = self.coeffs[(..., *idx)]
        return np.conj(c) if conj else c

    def _same(self, other: "SpectralField"):
        if self.grid != other.grid:
            raise GridMismatchError(f"grids differ: N={self.grid.N} vs N={other.grid.N}")

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._same(other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._same(other)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * scalar)

    __rmul__ = __mul__


def forward_transform(grid: FourierGrid, samples) -> SpectralField:
    samples = np.asarray(samples, dtype=float)
    if samples.shape[-grid.d:] != grid.shape:
        raise ValueError(f"expected trailing shape {grid.shape}, got {samples.shape}")
    if samples.ndim not in (grid.d, grid.d + 1):
        raise ValueError("samples must be a scalar or a single vector field")
    return SpectralField(grid, grid.forward(samples))


def inverse_transform(f: SpectralField) -> np.ndarray:
    return f.grid.inverse(f.coeffs)


def sobolev_norm(f: SpectralField, s: float) -> float:
    if not np.isfinite(s):
        raise ValueError("Sobolev index must be finite")
    return float(f.grid.sobolev_norm(f.coeffs, s, vector=f.is_vector))


def biot_savart(w: SpectralField) -> SpectralField:
    if w.is_vector:
        raise ValueError("Biot-Savart expects a scalar vorticity")
    return SpectralField(w.grid, w.grid.biot_savart(w.coeffs))


def k_beta_convolve(w: SpectralField, beta: float) -> SpectralField:
    if w.is_vector:
        raise ValueError("K_beta expects a scalar field")
    return SpectralField(w.grid, w.grid.k_beta(w.coeffs, beta))


def inv_gradient(f: SpectralField) -> SpectralField:
    if f.is_vector:
        raise ValueError("inverse gradient expects a scalar field")
    return SpectralField(f.grid, f.grid.inv_gradient(f.coeffs))


def heat_multiplier(f: SpectralField, t: float, delta: float) -> SpectralField:
    return SpectralField(f.grid, f.grid.heat(f.coeffs, t, delta))


def gradient(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, f.grid.gradient(f.coeffs))


def laplacian(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, f.grid.laplacian(f.coeffs))


def divergence(v: SpectralField) -> SpectralField:
    if not v.is_vector:
        raise ValueError("divergence expects a vector field")
    return SpectralField(v.grid, v.grid.divergence(v.coeffs))


def curl(v: SpectralField) -> SpectralField:
    return SpectralField(v.grid, v.grid.curl(v.coeffs))


def dealias(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, f.grid.dealias(f.coeffs))


def pseudospectral_product(f: SpectralField, g: SpectralField) -> SpectralField:
    f._same(g)
    if f.is_vector or g.is_vector:
        raise ValueError("pseudospectral_product multiplies two scalar fields")
    return SpectralField(f.grid, f.grid.product(f.coeffs, g.coeffs))
