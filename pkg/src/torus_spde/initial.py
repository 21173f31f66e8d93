"""Analytic and seeded initial data, returned as spectral arrays on a grid."""

from __future__ import annotations

import numpy as np

from .spectral import FourierGrid, SpectralField

INITIAL_STREAM = 7


def single_mode(grid: FourierGrid, k, amplitude: float = 1.0, phase: float = 0.0) -> np.ndarray:
    """Real field ``amplitude * cos(2 pi k.x + phase)``."""
    out = grid.forward(_cos(grid, k, amplitude, phase))
    out[(0,) * grid.d] = 0.0
    return out


def _cos(grid, k, amplitude, phase):
    x = grid.coordinates()
    arg = sum(2 * np.pi * kc * xc for kc, xc in zip(k, x))
    return amplitude * np.cos(arg + phase)


def two_mode(grid: FourierGrid, k=(1, 0), l=(0, 2), a: float = 1.0, b: float = 0.5) -> np.ndarray:
    """``a cos(2 pi k.x) + b sin(2 pi l.x)``: bounded, mean zero, sign balanced."""
    x = grid.coordinates()
    f = a * np.cos(2 * np.pi * sum(kc * xc for kc, xc in zip(k, x)))
    f += b * np.sin(2 * np.pi * sum(lc * xc for lc, xc in zip(l, x)))
    out = grid.forward(f)
    out[(0,) * grid.d] = 0.0
    return out


def shear_layer(grid: FourierGrid, modes: int = 4, perturbation: float = 0.05, width: float = 0.05) -> np.ndarray:
    """Band-limited double shear layer vorticity.

    The profile ``sech^2`` layers at ``x_2 = 1/4`` and ``3/4`` are truncated to
    ``|k_2| <= 3 modes``, then perturbed by ``perturbation * cos(2 pi x_1)``.
    """
    x = grid.coordinates()
    y = x[1]
    prof = 1.0 / np.cosh((y - 0.25) / width) ** 2 - 1.0 / np.cosh((y - 0.75) / width) ** 2
    w = grid.forward(prof / width)
    keep = (np.abs(grid.k[0]) == 0) & (np.abs(grid.k[1]) <= 3 * modes)
    w = w * keep
    w = w + grid.forward(perturbation / width * np.cos(2 * np.pi * x[0]) * np.cos(2 * np.pi * x[1]))
    w[(0,) * grid.d] = 0.0
    return grid.dealias(w)


def gaussian_bump(grid: FourierGrid, mass: float = 40.0, width: float = 0.05, center=None) -> np.ndarray:
    """Periodized Gaussian of total mass ``mass`` from its analytic Fourier series.

    ``fhat_k = mass * exp(-2 pi^2 width^2 |k|^2 - 2 pi i k.c)``, truncated to the
    dealiased band.
    """
    c = np.full(grid.d, 0.5) if center is None else np.asarray(center, float)
    k = grid.k.astype(float)
    phase = np.exp(-2j * np.pi * np.tensordot(c, k, axes=1))
    out = mass * np.exp(-2 * np.pi**2 * width**2 * grid.k2) * phase
    out = np.where(grid.nyquist, 0.0, out)
    return grid.dealias(out)


def random_band(grid: FourierGrid, kmin: int = 1, kmax: int | None = None, slope: float = 0.0,
                seed: int = 0, norm: float | None = 1.0) -> np.ndarray:
    """Seeded random field with ``|fhat_k| ~ |k|^{-slope}`` on ``kmin <= |k| <= kmax`` and random phases.

    The result is scaled to L^2 norm ``norm`` unless ``norm`` is None.
    """
    kmax = grid.band if kmax is None else kmax
    rng = np.random.Generator(np.random.Philox(key=[seed, INITIAL_STREAM]))
    r = np.sqrt(grid.k2)
    amp = np.where((r >= kmin) & (r <= kmax), np.where(r > 0, r, 1.0) ** (-slope), 0.0)
    phases = np.exp(2j * np.pi * rng.random(grid.spec_shape))
    f = grid.dealias(grid.forward(grid.inverse(amp * phases)))  # projects onto real fields
    if norm is not None:
        f = f * (norm / grid.l2_norm(f))
    return f


def as_field(grid: FourierGrid, arr) -> SpectralField:
    return SpectralField(grid, np.asarray(arr))


INITIAL = {
    "shear-layer": shear_layer,
    "gaussian-bump": gaussian_bump,
    "random-band": random_band,
    "two-mode": two_mode,
    "single-mode": single_mode,
}


def make_initial(grid: FourierGrid, spec: dict) -> np.ndarray:
    """Build initial data from ``{"kind": name, **params}``."""
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        fn = INITIAL[kind]
    except KeyError:
        raise ValueError(f"unknown initial condition {kind!r}; choose from {sorted(INITIAL)}") from None
    return fn(grid, **spec)
