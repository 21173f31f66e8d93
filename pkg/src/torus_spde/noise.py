"""Divergence-free Fourier transport noise.

The noise is

    W(t, x) = sqrt(C_d kappa) sum_{k, i} theta_k a_{k,i} e_k(x) W^{k,i}_t,

with ``C_d = d / (d - 1)``, complex Brownian motions satisfying
``conj(W^{k,i}) = W^{-k,i}`` and ``E|W^{k,i}_t|^2 = 2t``, and for each ``k``
an orthonormal basis ``{a_{k,i}}`` of ``k^perp`` with ``a_{-k,i} = a_{k,i}``.

Conventions fixed here (any admissible choice gives the same law):

* half lattice ``Z^d_+``: first non-zero component positive;
* d = 2: ``a_k = k^perp / |k|`` on ``Z^2_+`` with ``k^perp = (k_2, -k_1)``;
* d = 3: Gram-Schmidt of the reference vector ``e_1`` (``e_2`` when ``k`` is
  parallel to ``e_1``) against ``k``, completed by a cross product.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .spectral import FOUR_PI2, FourierGrid

# Philox counter word reserved for noise draws; other consumers use other tags.
NOISE_STREAM = 1
_SYM_TOL = 1e-12


class SymmetryError(ValueError):
    pass


class BandError(ValueError):
    pass


def lattice_points(d: int, r2_min: float, r2_max: float) -> np.ndarray:
    """All non-zero ``k`` in ``Z^d`` with ``r2_min <= |k|^2 <= r2_max``."""
    r = int(math.isqrt(int(math.floor(r2_max)))) + 1
    axis = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    n2 = (grid**2).sum(axis=1)
    keep = (n2 >= r2_min) & (n2 <= r2_max) & (n2 > 0)
    return grid[keep]


def shell_size(d: int, r2: int) -> int:
    return len(lattice_points(d, r2, r2))


@dataclass(frozen=True, eq=False)
class ThetaSpectrum:
    """Finitely supported noise weights ``theta_k >= 0`` on ``Z^d_0``."""

    ks: np.ndarray
    values: np.ndarray
    d: int = 2

    def __post_init__(self):
        ks = np.asarray(self.ks, dtype=np.int64).reshape(-1, self.d)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if len(ks) != len(values):
            raise ValueError("ks and values must have the same length")
        if len(ks) == 0:
            raise ValueError("theta spectrum has empty support")
        if (values < 0).any() or not np.isfinite(values).all():
            raise ValueError("theta weights must be finite and non-negative")
        if (ks == 0).all(axis=1).any():
            raise ValueError("theta is defined on Z^d without the origin")
        order = np.lexsort(ks.T[::-1])
        ks, values = ks[order], values[order]
        if len(np.unique(ks, axis=0)) != len(ks):
            raise ValueError("duplicate wavevectors in theta spectrum")
        object.__setattr__(self, "ks", ks)
        object.__setattr__(self, "values", values)
        self.ks.setflags(write=False)
        self.values.setflags(write=False)

    @property
    def l2(self) -> float:
        return float(np.sqrt(np.sum(self.values**2)))

    @property
    def linf(self) -> float:
        return float(self.values.max())

    @property
    def radius(self) -> float:
        return float(np.sqrt((self.ks**2).sum(axis=1).max()))

    @property
    def max_component(self) -> int:
        return int(np.abs(self.ks).max())

    def normalized(self) -> "ThetaSpectrum":
        return ThetaSpectrum(self.ks, self.values / self.l2, self.d)

    def symmetry_defect(self) -> float:
        """Largest weight difference within a shell ``|k| = const``.

        Shell points missing from the support count with weight 0.
        """
        n2 = (self.ks**2).sum(axis=1)
        worst = 0.0
        for r2 in np.unique(n2):
            in_shell = self.values[n2 == r2]
            spread = float(in_shell.max() - in_shell.min())
            if len(in_shell) < shell_size(self.d, int(r2)):
                spread = max(spread, float(in_shell.max()))
            worst = max(worst, spread)
        return worst

    def is_symmetric(self, tol: float = _SYM_TOL) -> bool:
        return self.symmetry_defect() <= tol

    def validate(self, tol: float = _SYM_TOL) -> "ThetaSpectrum":
        defect = self.symmetry_defect()
        if defect > tol:
            raise SymmetryError(f"theta is not constant on |k|-shells (defect {defect:.3g})")
        if abs(self.l2 - 1.0) > 1e-12:
            raise ValueError(f"theta must be l2-normalized, got norm {self.l2!r}")
        return self

    def on_grid(self, grid: FourierGrid) -> np.ndarray:
        """Weights laid out on the half spectrum of ``grid``."""
        if grid.d != self.d:
            raise ValueError(f"theta is {self.d}-dimensional, grid is {grid.d}-dimensional")
        if self.max_component > grid.band:
            need = 3 * self.max_component + 1
            need += need % 2
            raise BandError(
                f"theta support reaches |k_i| = {self.max_component} but the dealiased band "
                f"of N={grid.N} ends at {grid.band}; use N >= {need}"
            )
        out = np.zeros(grid.spec_shape)
        for k, v in zip(self.ks, self.values):
            if k[-1] < 0:
                continue
            idx, _ = grid.index_of(k)
            out[idx] = v
        return out

    # -- serialization --------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "entries": [{"k": [int(c) for c in k], "theta": float(v)} for k, v in zip(self.ks, self.values)],
        }

    @classmethod
    def from_dict(cls, data: dict, validate: bool = True) -> "ThetaSpectrum":
        d = int(data["d"])
        entries = data["entries"]
        theta = cls(np.array([e["k"] for e in entries]).reshape(-1, d), [e["theta"] for e in entries], d)
        if validate:
            defect = theta.symmetry_defect()
            if defect > _SYM_TOL:
                raise SymmetryError(f"imported theta is not shell-symmetric (defect {defect:.3g})")
        return theta

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ThetaSpectrum":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _power_weights(ks: np.ndarray, a: float) -> np.ndarray:
    return np.sqrt((ks**2).sum(axis=1).astype(float)) ** (-a)


def make_theta_band(n: int, a: float = 0.0, d: int = 2) -> ThetaSpectrum:
    """``|k|^{-a}`` on the annulus ``n <= |k| <= 2n``, l2-normalized."""
    if n < 1:
        raise ValueError("band index n must be >= 1")
    if a < 0:
        raise ValueError("exponent a must be non-negative")
    ks = lattice_points(d, n * n, 4 * n * n)
    return ThetaSpectrum(ks, _power_weights(ks, a), d).normalized()


def make_theta_ball(n: int, a: float = 0.0, d: int = 2) -> ThetaSpectrum:
    """``|k|^{-a}`` on the ball ``1 <= |k| <= n``, l2-normalized."""
    if n < 1:
        raise ValueError("ball radius n must be >= 1")
    if a < 0:
        raise ValueError("exponent a must be non-negative")
    ks = lattice_points(d, 1, n * n)
    return ThetaSpectrum(ks, _power_weights(ks, a), d).normalized()


def make_theta_kraichnan(k0: float, zeta: float, k_max: float, d: int = 2, normalize: bool = True) -> ThetaSpectrum:
    """Kraichnan spectrum ``theta_k^2 = k0^zeta |k|^{-(d+zeta)}`` on ``k0 <= |k| <= k_max``.

    ``zeta = 4/3`` is the Kolmogorov 41 scaling.  The infinite sum is
    truncated at ``k_max`` and normalization applies after truncation.
    """
    if k0 < 1:
        raise ValueError("k0 must be >= 1")
    if not 0.0 < zeta < 2.0:
        raise ValueError("zeta must lie in (0, 2)")
    if k_max <= k0:
        raise ValueError(f"truncation radius k_max={k_max} must exceed k0={k0}")
    ks = lattice_points(d, k0 * k0, k_max * k_max)
    r = np.sqrt((ks**2).sum(axis=1).astype(float))
    theta = ThetaSpectrum(ks, np.sqrt(k0**zeta * r ** (-(d + zeta))), d)
    return theta.normalized() if normalize else theta


def _frame(d: int, k: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``k^perp`` for ``k`` in the half lattice, shape (d-1, d)."""
    k = k.astype(float)
    norm = np.linalg.norm(k)
    if d == 2:
        return np.array([[k[1], -k[0]]]) / norm
    khat = k / norm
    ref = np.array([1.0, 0.0, 0.0])
    if abs(abs(khat @ ref) - 1.0) < 1e-12:
        ref = np.array([0.0, 1.0, 0.0])
    a1 = ref - (ref @ khat) * khat
    a1 /= np.linalg.norm(a1)
    a2 = np.cross(khat, a1)
    return np.stack([a1, a2])


def canonical(k) -> np.ndarray:
    """Representative of ``{k, -k}`` in the half lattice ``Z^d_+``."""
    k = np.asarray(k)
    nz = np.flatnonzero(k)
    return k if k[nz[0]] > 0 else -k


def frame_vectors(d: int, k) -> np.ndarray:
    """``a_{k,i}`` with ``a_{-k,i} = a_{k,i}``, shape (d-1, d)."""
    return _frame(d, canonical(np.asarray(k)))


@dataclass(frozen=True, eq=False)
class NoiseConfig:
    """Intensity ``kappa`` and spectrum ``theta``; together they fix the law of W."""

    kappa: float
    theta: ThetaSpectrum
    frame: str = "default"

    def __post_init__(self):
        if not (self.kappa >= 0 and np.isfinite(self.kappa)):
            raise ValueError(f"noise intensity must be a finite non-negative number, got {self.kappa}")
        if self.frame != "default":
            raise ValueError(f"unknown frame convention {self.frame!r}")

    @property
    def d(self) -> int:
        return self.theta.d

    @property
    def c_d(self) -> float:
        return self.d / (self.d - 1)

    def scaled(self, kappa: float) -> "NoiseConfig":
        return NoiseConfig(kappa, self.theta, self.frame)

    def layout(self, grid: FourierGrid) -> "NoiseLayout":
        return NoiseLayout(self, grid)

    def covariance(self, z) -> np.ndarray:
        """``Q_W(z) = E[W(1, x+z) (x) W(1, x)]`` (a d x d matrix).

        From the quadratic variations ``[W^{k,i}, W^{l,j}]_t = 2t delta_{k,-l}
        delta_{ij}``: ``Q_W(z) = 2 C_d kappa sum_k theta_k^2 sum_i a_{k,i} (x)
        a_{k,i} cos(2 pi k.z)``; at ``z = 0`` this is ``2 kappa Id`` for a
        normalized shell-symmetric theta.
        """
        z = np.asarray(z, dtype=float)
        out = np.zeros((self.d, self.d))
        for k, v in zip(self.theta.ks, self.theta.values):
            a = frame_vectors(self.d, k)
            out += v**2 * (a.T @ a) * np.cos(2 * np.pi * k @ z)
        return 2 * self.c_d * self.kappa * out

    def ito_tensor(self) -> np.ndarray:
        """Matrix ``Q`` of the Ito-Stratonovich corrector ``div(Q grad f)``."""
        return 0.5 * self.covariance(np.zeros(self.d))


class NoiseLayout:
    """Noise coefficients precomputed on one grid.

    ``amplitude[i, c]`` holds ``sqrt(C_d kappa) theta_k a_{k,i}[c]`` on the half
    spectrum; a draw of ``W^{k,i}`` increments turns into the spectral
    coefficients of the velocity increment by a contraction over ``i``.
    """

    def __init__(self, cfg: NoiseConfig, grid: FourierGrid):
        self.cfg = cfg
        self.grid = grid
        d = grid.d
        theta = cfg.theta.on_grid(grid)
        frames = np.zeros((d - 1, d, *grid.spec_shape))
        for k in cfg.theta.ks:
            if k[-1] < 0:
                continue
            idx, _ = grid.index_of(k)
            frames[(slice(None), slice(None), *idx)] = frame_vectors(d, k)
        self.amplitude = math.sqrt(cfg.c_d * cfg.kappa) * theta * frames
        # draws are made for every dealiased mode so that equal seeds give equal
        # Brownian motions W^k across different theta (common random numbers)
        self.draw_index = np.flatnonzero(grid.dealias_mask.ravel())
        self._plane_fix = _half_plane_mirror(grid)

    @property
    def kappa(self) -> float:
        return self.cfg.kappa

    @cached_property
    def support_mask(self) -> np.ndarray:
        return (self.amplitude != 0).any(axis=(0, 1))

    def brownian(self, rngs, dt: float) -> np.ndarray:
        """Increments ``Delta W^{k,i}`` over ``dt``, one generator per batch entry.

        Shape ``(len(rngs), d-1, *spec_shape)``; conjugation on the ``k_d = 0``
        plane holds exactly.
        """
        grid = self.grid
        n = len(self.draw_index)
        m = grid.d - 1
        size = int(np.prod(grid.spec_shape))
        out = np.zeros((len(rngs), m, size), complex)
        scale = math.sqrt(dt)
        for b, rng in enumerate(rngs):
            z = rng.standard_normal((2, m, n))
            out[b, :, self.draw_index] = (scale * (z[0] + 1j * z[1])).T
        out = out.reshape(len(rngs), m, *grid.spec_shape)
        return self._plane_fix(out)

    def field(self, dw: np.ndarray) -> np.ndarray:
        """Velocity increment coefficients ``(batch, d, *spec)`` from Brownian increments."""
        return np.einsum("ic...,bi...->bc...", self.amplitude, dw)

    def sample(self, rngs, dt: float) -> np.ndarray:
        return self.field(self.brownian(rngs, dt))


def _half_plane_mirror(grid: FourierGrid):
    """Return a function imposing ``c(-k) = conj c(k)`` on the ``k_d = 0`` plane."""
    d = grid.d
    plane_k = grid.k[:-1, ..., 0]  # (d-1, N, ..., N)
    flat = plane_k.reshape(d - 1, -1).T
    canon = np.zeros(len(flat), bool)
    for j, k in enumerate(flat):
        nz = np.flatnonzero(k)
        canon[j] = len(nz) > 0 and k[nz[0]] > 0
    canon = canon.reshape(plane_k.shape[1:])
    zero = (plane_k == 0).all(axis=0)

    def fix(arr: np.ndarray) -> np.ndarray:
        plane = arr[..., 0]
        flipped = plane
        for ax in range(-(d - 1), 0):
            flipped = np.roll(np.flip(flipped, axis=ax), 1, axis=ax)
        fixed = np.where(canon, plane, flipped.conj())
        fixed = np.where(zero, fixed.real, fixed)
        arr[..., 0] = fixed
        return arr

    return fix


def sample_increment(cfg: NoiseConfig, grid: FourierGrid, dt: float, rng) -> np.ndarray:
    """One velocity increment ``Delta W`` as spectral coefficients ``(d, *spec)``."""
    if dt <= 0:
        raise ValueError("time step must be positive")
    return cfg.layout(grid).sample([rng], dt)[0]


def transport_apply(dw_hat: np.ndarray, fh: np.ndarray, grid: FourierGrid) -> np.ndarray:
    """``(Delta W . grad) f`` via a dealiased pseudospectral product."""
    return grid.advect(dw_hat, fh)


def ito_correction_matrix(cfg: NoiseConfig, grid: FourierGrid) -> np.ndarray:
    """Eigenvalue of the Ito corrector on every stored mode ``l``.

    Computed as ``-4 pi^2 C_d kappa sum_k theta_k^2 sum_i (a_{k,i} . l)^2``;
    equals ``-4 pi^2 kappa |l|^2`` exactly when theta is normalized and
    constant on shells.
    """
    q = cfg.ito_tensor()
    k = grid.k.astype(float)
    return -FOUR_PI2 * np.einsum("i...,ij,j...->...", k, q, k)


def ito_identity_residual(cfg: NoiseConfig, grid: FourierGrid) -> float:
    """Max over dealiased modes of ``|eig + 4 pi^2 kappa |l|^2| / (4 pi^2 |l|^2)``."""
    eig = ito_correction_matrix(cfg, grid)
    mask = grid.dealias_mask & (grid.k2 > 0)
    target = -FOUR_PI2 * cfg.kappa * grid.k2
    return float(np.max(np.abs(eig - target)[mask] / (FOUR_PI2 * grid.k2[mask])))


def rng_for(seed: int, sample: int, step: int, tag: int = NOISE_STREAM) -> np.random.Generator:
    """Counter-based generator for one (sample, step) pair.

    The Philox key carries ``(seed, sample)`` and the high counter words carry
    ``(step, tag)``, so streams never overlap and do not depend on the order
    in which samples or steps are evaluated.
    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, sample], dtype=np.uint64)
    counter = np.array([0, 0, step, tag], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
