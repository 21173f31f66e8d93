"""Exponential Euler-Maruyama time stepping for the transport-noise models.

Every model is advanced in Ito form,

    X <- exp(dt delta Delta) [X - dt F(X) - (dW . grad) X],

where ``delta`` collects the physical viscosity and the Ito corrector
``kappa Delta``.  The deterministic limit uses the same update without the
noise term.  States are batched: a state array has shape
``(B, m, *grid.spec_shape)`` with ``B`` independent samples and ``m`` scalar
unknowns (2 for Boussinesq, 1 otherwise).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .noise import NoiseConfig, NoiseLayout, rng_for
from .spectral import FOUR_PI2, FourierGrid, SpectralField


class BlowupDetected(RuntimeError):
    def __init__(self, step: int, time: float, samples=None):
        self.step = step
        self.time = time
        self.samples = samples
        super().__init__(f"blow-up detected at step {step} (t = {time:.6g})")


# -- models -------------------------------------------------------------------


@dataclass(frozen=True)
class NavierStokes:
    """2D vorticity ``d w + u.grad w dt + o dW.grad w = nu Lap w dt``, ``u = K * w``."""

    nu: float = 0.0
    names = ("omega",)
    has_drift = True

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("viscosity nu must be >= 0")

    def viscosity(self, kappa: float):
        return (kappa + self.nu,)

    def velocity(self, grid, state):
        return grid.biot_savart(state[:, -1])


@dataclass(frozen=True)
class Boussinesq:
    """Inviscid-vorticity Boussinesq system; state fields ``(gamma, omega)``."""

    nu: float = 0.0
    names = ("gamma", "omega")
    has_drift = True

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("viscosity nu must be >= 0")

    def viscosity(self, kappa: float):
        return (kappa + self.nu, kappa)

    def velocity(self, grid, state):
        return grid.biot_savart(state[:, 1])

    def forcing(self, grid, state):
        # buoyancy d_1 gamma enters the omega equation
        out = np.zeros_like(state)
        out[:, 1] = grid.ik[0] * state[:, 0]
        return out


@dataclass(frozen=True)
class MSQG:
    """Modified SQG ``d w + (K_beta * w).grad w dt + o dW.grad w = 0``."""

    beta: float = 0.5
    nu: float = 0.0
    names = ("omega",)
    has_drift = True

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.nu < 0:
            raise ValueError("viscosity nu must be >= 0")

    def viscosity(self, kappa: float):
        return (kappa + self.nu,)

    def velocity(self, grid, state):
        return grid.k_beta(state[:, -1], self.beta)


@dataclass(frozen=True)
class KellerSegel:
    """Parabolic-elliptic Keller-Segel in terms of ``u = rho - rho_bar``.

    ``du = ((1+kappa) Lap u - g(|u|_{H^-alpha}) div[u grad^{-1} u] + rho_bar u) dt + dW.grad u``
    with the optional Lipschitz cutoff ``g = g_{alpha,R}``.
    """

    rho_bar: float = 1.0
    cutoff_alpha: float = 0.5
    cutoff_radius: float = 1.0
    cutoff_enabled: bool = False
    names = ("u",)
    has_drift = True

    def __post_init__(self):
        if not self.rho_bar > 0:
            raise ValueError("rho_bar must be positive")
        if not 0.0 < self.cutoff_alpha < 1.0:
            raise ValueError("cutoff_alpha must lie in (0, 1)")
        if not self.cutoff_radius > 0:
            raise ValueError("cutoff_radius must be positive")

    def viscosity(self, kappa: float):
        return (1.0 + kappa,)

    def cutoff(self, x):
        """``g_R``: 1 on [0, R], linear down to 0 on [R, R+1], 0 beyond."""
        if not self.cutoff_enabled:
            return np.ones_like(np.asarray(x, dtype=float))
        return np.clip(1.0 - (np.asarray(x, dtype=float) - self.cutoff_radius), 0.0, 1.0)

    def velocity(self, grid, state):
        return None


@dataclass(frozen=True)
class LinearTransport:
    """Inviscid passive scalar ``df + o dW.grad f = 0``."""

    names = ("f",)
    has_drift = False

    def viscosity(self, kappa: float):
        return (kappa,)

    def velocity(self, grid, state):
        return None


@dataclass(frozen=True)
class TransportDiffusion:
    """Passive scalar with molecular diffusion ``df + o dW.grad f = nu Lap f dt``."""

    nu: float = 0.01
    names = ("f",)
    has_drift = False

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("transport-diffusion needs nu > 0")

    def viscosity(self, kappa: float):
        return (kappa + self.nu,)

    def velocity(self, grid, state):
        return None


MODELS = {
    "navier-stokes": NavierStokes,
    "boussinesq": Boussinesq,
    "msqg": MSQG,
    "keller-segel": KellerSegel,
    "linear-transport": LinearTransport,
    "transport-diffusion": TransportDiffusion,
}


def model_name(model) -> str:
    for name, cls in MODELS.items():
        if type(model) is cls:
            return name
    raise TypeError(f"unknown model {model!r}")


def model_params(model) -> dict:
    return asdict(model)


def make_model(name: str, **params):
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**params)


def field_count(model) -> int:
    return len(model.names)


# -- tendencies ---------------------------------------------------------------


def _advect_fields(grid: FourierGrid, vh: np.ndarray, state: np.ndarray) -> np.ndarray:
    """``(v . grad) X`` for every field; ``vh`` is ``(B, d, *spec)``, B may be 1 to share v."""
    v = grid.inverse(vh)
    grad = grid.inverse(grid.ik * state[:, :, None])
    return grid.forward(np.sum(v[:, None] * grad, axis=2))


def increment(model, grid: FourierGrid, state: np.ndarray, dt: float, dw: np.ndarray | None) -> np.ndarray:
    """``dt F(X) + (dW . grad) X`` with the mean mode removed."""
    if isinstance(model, KellerSegel):
        out = _keller_segel_increment(model, grid, state, dt, dw)
    else:
        u = model.velocity(grid, state)
        v = None if u is None else dt * u
        if dw is not None:
            v = dw if v is None else v + dw
        out = np.zeros_like(state) if v is None else _advect_fields(grid, v, state)
        if isinstance(model, Boussinesq):
            out -= dt * model.forcing(grid, state)
    out = grid.dealias(out)
    # all dynamics in scope are in divergence form and keep the mean fixed
    out[(..., *([0] * grid.d))] = 0.0
    return out


def _keller_segel_increment(model: KellerSegel, grid, state, dt, dw):
    # div[u grad^{-1} u] = (grad^{-1} u).grad u - u^2, because div grad^{-1} u = -u
    u = state[:, 0]
    g = model.cutoff(grid.sobolev_norm(u, -model.cutoff_alpha))
    scale = dt * g[(slice(None),) + (None,) * (grid.d + 1)]
    vh = scale * grid.inv_gradient(u)
    if dw is not None:
        vh = vh + dw
    v = grid.inverse(vh)
    grad = grid.inverse(grid.gradient(u))
    up = grid.inverse(u)
    phys = np.sum(v * grad, axis=1) - scale[:, 0] * up**2
    return (grid.forward(phys) - dt * model.rho_bar * u)[:, None]


def nonlinearity(model, grid: FourierGrid, state: np.ndarray) -> np.ndarray:
    """Drift ``F(X)`` such that ``dX = (delta Lap X - F(X)) dt + noise``."""
    batched = np.asarray(state)
    return increment(model, grid, batched, 1.0, None)


# -- integrator ---------------------------------------------------------------


@dataclass
class SimConfig:
    T: float
    dt: float
    grid: FourierGrid
    record_every: int = 1
    seed: int = 0
    substeps: int = 1
    alpha: float = 0.5
    blowup_factor: float = 10.0
    cfl: float = 0.5

    def __post_init__(self):
        if not self.T >= 0:
            raise ValueError("horizon T must be >= 0")
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    def step_sizes(self) -> list[float]:
        """Full steps, plus one shorter final step when ``T / dt`` is not integral."""
        n = int(math.floor(self.T / self.dt + 1e-9))
        steps = [self.dt] * n
        rest = self.T - n * self.dt
        if rest > 1e-12 * max(self.T, 1.0):
            steps.append(rest)
        return steps


class Integrator:
    """One-step map for a batch of samples sharing a model and a noise law."""

    def __init__(self, model, grid: FourierGrid, noise: NoiseConfig | None, kappa_eff: float | None = None):
        self.model = model
        self.grid = grid
        if noise is not None and noise.kappa == 0:
            noise_layout = None
        else:
            noise_layout = noise.layout(grid) if noise is not None else None
        self.noise = noise_layout
        kappa = kappa_eff if kappa_eff is not None else (noise.kappa if noise is not None else 0.0)
        self.kappa = kappa
        self.delta = np.array(model.viscosity(kappa), dtype=float)
        self._decay = {}

    def decay(self, dt: float) -> np.ndarray:
        key = float(dt)
        if key not in self._decay:
            delta = self.delta[(slice(None),) + (None,) * self.grid.d]
            self._decay[key] = np.exp(-FOUR_PI2 * dt * delta * self.grid.k2)
        return self._decay[key]

    def brownian(self, dt: float, step: int, samples, seed: int, substeps: int = 1) -> np.ndarray:
        """Increment over ``[t_step, t_step + dt]`` as the sum of ``substeps`` fine blocks."""
        lay = self.noise
        total = None
        for i in range(substeps):
            rngs = [rng_for(seed, s, step * substeps + i) for s in samples]
            part = lay.brownian(rngs, dt / substeps)
            total = part if total is None else total + part
        return total

    def step(self, state: np.ndarray, dt: float, dw_modes: np.ndarray | None = None) -> np.ndarray:
        dw = None if (self.noise is None or dw_modes is None) else self.noise.field(dw_modes)
        if dw is None and not self.model.has_drift:
            return self.decay(dt) * state
        return self.decay(dt) * (state - increment(self.model, self.grid, state, dt, dw))


def _as_batch(initial, grid: FourierGrid, m: int, samples: int) -> np.ndarray:
    if isinstance(initial, SpectralField):
        arr = initial.coeffs
    elif isinstance(initial, (tuple, list)):
        arr = np.stack([f.coeffs if isinstance(f, SpectralField) else np.asarray(f) for f in initial])
    else:
        arr = np.asarray(initial)
    arr = np.asarray(arr, dtype=complex)
    spec = grid.spec_shape
    if arr.shape == spec:
        arr = arr[None]
    if arr.shape == (m, *spec):
        arr = np.broadcast_to(arr, (samples, m, *spec))
    if arr.shape != (samples, m, *spec):
        raise ValueError(f"initial state of shape {arr.shape} does not fit {samples} samples of {m} fields on {spec}")
    return grid.dealias(np.array(arr))


@dataclass
class Trajectory:
    """Recorded output of a batched run."""

    times: np.ndarray
    states: np.ndarray | None
    diagnostics: dict
    step_times: np.ndarray
    blowup: np.ndarray
    blowup_time: np.ndarray
    grid: FourierGrid
    names: tuple
    info: dict = field(default_factory=dict)

    @property
    def samples(self) -> int:
        return len(self.blowup)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def field(self, record: int, sample: int = 0, component: int = 0) -> SpectralField:
        return SpectralField(self.grid, np.array(self.states[record, sample, component]))

    def export(self, directory, record: int = -1, sample: int = 0, fmt: str = "npy", metadata: dict | None = None):
        """Write physical samples of one snapshot plus a JSON sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        phys = self.grid.inverse(self.states[record, sample])
        t = float(self.times[record])
        stem = f"snapshot_t{t:.6f}_s{sample}"
        if fmt == "npy":
            np.save(directory / f"{stem}.npy", phys)
        elif fmt == "csv":
            if self.grid.d != 2:
                raise ValueError("CSV snapshots are written for 2D grids only")
            for name, comp in zip(self.names, phys):
                np.savetxt(directory / f"{stem}_{name}.csv", comp, delimiter=",", fmt="%.17g")
        else:
            raise ValueError(f"unknown snapshot format {fmt!r}")
        sidecar = {"grid": {"N": self.grid.N, "d": self.grid.d}, "time": t, "sample": sample, "fields": list(self.names)}
        sidecar.update(metadata or {})
        (directory / f"{stem}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
        return directory / stem


def _diag(grid: FourierGrid, state: np.ndarray, alpha: float) -> tuple:
    return (
        grid.sobolev_norm(state, 0.0),
        grid.sobolev_norm(state, 1.0),
        grid.sobolev_norm(state, -alpha),
    )


class Run:
    """Stateful driver: owns the batch, its diagnostics and blow-up bookkeeping."""

    def __init__(self, model, noise, cfg: SimConfig, initial, samples: int = 1, sample_offset: int = 0,
                 deterministic: bool = False, kappa_eff: float | None = None, store_states: bool = True):
        self.model = model
        self.cfg = cfg
        grid = cfg.grid
        self.grid = grid
        self.deterministic = deterministic or noise is None
        if deterministic and kappa_eff is None:
            kappa_eff = noise.kappa if noise is not None else 0.0
        self.integ = Integrator(model, grid, None if self.deterministic else noise, kappa_eff)
        self.m = field_count(model)
        self.state = _as_batch(initial, grid, self.m, samples)
        self.ids = np.arange(sample_offset, sample_offset + samples)
        self.alive = np.ones(samples, bool)
        self.blowup_time = np.full(samples, np.nan)
        self.cutoff_time = np.full(samples, np.nan)
        self.store = store_states
        self.t = 0.0
        self.n = 0
        self.times = [0.0]
        self.states = [self.state.copy()] if store_states else None
        self.step_times = [0.0]
        l2, h1, hn = _diag(grid, self.state, cfg.alpha)
        self.diag = {"l2": [l2], "h1": [h1], "hneg": [hn]}
        self.threshold = None
        if isinstance(model, KellerSegel):
            rho0 = np.sqrt(l2[:, 0] ** 2 + model.rho_bar**2)
            self.threshold = cfg.blowup_factor * rho0
        self.info = self._stability_report(noise)

    def _stability_report(self, noise) -> dict:
        grid = self.grid
        u = self.model.velocity(grid, self.state)
        umax = float(np.abs(grid.inverse(u)).max()) if u is not None else 0.0
        adv = self.cfg.dt * grid.N * umax
        info = {"advective_cfl": adv}
        if noise is not None and not self.deterministic:
            th = noise.theta
            info["noise_cfl"] = (self.cfg.dt * grid.N * math.sqrt(2 * noise.kappa) * 2 * math.pi * th.radius
                                 * float(th.values.sum()))
            # Ito damping exponent at the band edge: the scheme's energy defect
            # is O(dt^2) per step only while this is small
            info["ito_stiffness"] = 2 * FOUR_PI2 * noise.kappa * float(grid.k2[grid.dealias_mask].max()) * self.cfg.dt
        if adv > self.cfg.cfl:
            warnings.warn(f"advective CFL number {adv:.3g} exceeds {self.cfg.cfl}; consider a smaller dt",
                          RuntimeWarning, stacklevel=3)
        return info

    def advance(self, dt: float, dw_modes=None):
        grid = self.grid
        if dw_modes is None and self.integ.noise is not None:
            dw_modes = self.integ.brownian(dt, self.n, self.ids, self.cfg.seed, self.cfg.substeps)
        with np.errstate(all="ignore"):
            new = self.integ.step(self.state, dt, dw_modes)
        finite = np.isfinite(new).all(axis=tuple(range(1, new.ndim)))
        l2, h1, hn = _diag(grid, np.where(finite[(slice(None),) + (None,) * (new.ndim - 1)], new, 0), self.cfg.alpha)
        bad = ~finite
        if self.threshold is not None:
            rho = np.sqrt(l2[:, 0] ** 2 + self.model.rho_bar**2)
            bad |= rho > self.threshold
            if self.model.cutoff_enabled:
                cross = np.isnan(self.cutoff_time) & (hn[:, 0] > self.model.cutoff_radius)
                self.cutoff_time[cross] = self.t + dt
        newly = bad & self.alive
        self.blowup_time[newly] = self.t + dt
        self.alive &= ~bad
        # blown-up samples stay frozen at their last admissible state
        keep = self.alive[(slice(None),) + (None,) * (new.ndim - 1)]
        self.state = np.where(keep, new, self.state)
        self.t += dt
        self.n += 1
        old = self.diag
        frozen = ~self.alive[:, None]
        for key, val in (("l2", l2), ("h1", h1), ("hneg", hn)):
            old[key].append(np.where(frozen, old[key][-1], val))
        self.step_times.append(self.t)
        if self.store and self.n % self.cfg.record_every == 0:
            self.times.append(self.t)
            self.states.append(self.state.copy())
        return newly

    def trajectory(self) -> Trajectory:
        if self.store and self.times[-1] != self.t:
            self.times.append(self.t)
            self.states.append(self.state.copy())
        info = dict(self.info, steps=self.n)
        if isinstance(self.model, KellerSegel) and self.model.cutoff_enabled:
            info["cutoff_exceeded_time"] = self.cutoff_time.copy()
        return Trajectory(
            times=np.array(self.times),
            states=np.array(self.states) if self.store else None,
            diagnostics={k: np.array(v) for k, v in self.diag.items()},
            step_times=np.array(self.step_times),
            blowup=~self.alive,
            blowup_time=self.blowup_time.copy(),
            grid=self.grid,
            names=tuple(self.model.names),
            info=info,
        )


def simulate(model, noise: NoiseConfig | None, cfg: SimConfig, initial, samples: int = 1, sample_offset: int = 0,
             deterministic: bool = False, kappa_eff: float | None = None, strict: bool = False,
             store_states: bool = True) -> Trajectory:
    """Advance ``samples`` independent copies of ``initial`` to time ``cfg.T``.

    Sample ``j`` draws its noise from the stream ``(cfg.seed, sample_offset + j)``,
    so results do not depend on batching.  With ``strict`` a blow-up raises
    :class:`BlowupDetected`; otherwise it is recorded in the trajectory.
    """
    run = Run(model, noise, cfg, initial, samples, sample_offset, deterministic, kappa_eff, store_states)
    for dt in cfg.step_sizes():
        newly = run.advance(dt)
        if strict and newly.any():
            raise BlowupDetected(run.n, run.t, np.flatnonzero(newly))
        if not run.alive.any():
            break
    return run.trajectory()


def step_stochastic(model, state, noise: NoiseConfig, dt: float, rng, grid: FourierGrid | None = None):
    """One stochastic step of a single state (SpectralField, or tuple for Boussinesq)."""
    grid = grid or _grid_of(state)
    integ = Integrator(model, grid, noise)
    batch = _as_batch(state, grid, field_count(model), 1)
    dw = integ.noise.brownian([rng], dt) if integ.noise is not None else None
    return _unbatch(_checked(integ.step(batch, dt, dw)), grid, model)


def step_deterministic(model, state, kappa_eff: float, dt: float, grid: FourierGrid | None = None):
    grid = grid or _grid_of(state)
    integ = Integrator(model, grid, None, kappa_eff)
    batch = _as_batch(state, grid, field_count(model), 1)
    return _unbatch(_checked(integ.step(batch, dt)), grid, model)


def _checked(arr):
    if not np.isfinite(arr).all():
        raise BlowupDetected(1, float("nan"))
    return arr


def _grid_of(state) -> FourierGrid:
    if isinstance(state, SpectralField):
        return state.grid
    if isinstance(state, (tuple, list)) and isinstance(state[0], SpectralField):
        return state[0].grid
    raise TypeError("pass grid= when the state is a raw array")


def _unbatch(arr, grid, model):
    fields = [SpectralField(grid, a) for a in arr[0]]
    return fields[0] if len(fields) == 1 else tuple(fields)


@dataclass
class PairResult:
    stochastic: Trajectory
    deterministic: Trajectory
    error: np.ndarray  # running sup of the H^{-alpha} distance, shape (steps+1, B)
    distance: np.ndarray  # instantaneous distance, same shape

    @property
    def sup_error(self) -> np.ndarray:
        """Final running sup per sample; NaN for samples that blew up."""
        return np.where(self.stochastic.blowup, np.nan, self.error[-1])


def run_pair(model, noise: NoiseConfig, cfg: SimConfig, initial, samples: int = 1, sample_offset: int = 0,
             alpha: float | None = None, store_states: bool = False, strict: bool = False) -> PairResult:
    """Stochastic batch and its deterministic limit from the same initial data, stepped in lockstep.

    The distance is measured jointly over all fields in ``H^{-alpha}``.
    """
    alpha = cfg.alpha if alpha is None else alpha
    grid = cfg.grid
    sto = Run(model, noise, cfg, initial, samples, sample_offset, store_states=store_states)
    det = Run(model, noise, cfg, initial, 1, 0, deterministic=True, store_states=store_states)
    dist = [np.zeros(samples)]
    for dt in cfg.step_sizes():
        newly = sto.advance(dt)
        det.advance(dt)
        if strict and newly.any():
            raise BlowupDetected(sto.n, sto.t, np.flatnonzero(newly))
        diff = sto.state - det.state
        d = np.sqrt(np.sum(grid.sobolev_norm(diff, -alpha) ** 2, axis=1))
        dist.append(np.where(sto.alive, d, np.nan))
    dist = np.array(dist)
    err = np.fmax.accumulate(dist, axis=0)
    return PairResult(sto.trajectory(), det.trajectory(), err, dist)
