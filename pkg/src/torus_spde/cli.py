"""Experiment configs and the ``torus-spde`` command line.

Usage::

    torus-spde <experiment> --config FILE [--seed U64] [--output DIR] [--threads K]

Exit codes:

* 0: success, every sample stayed regular
* 1: invalid config or runtime error (all config violations are listed)
* 2: finished, but at least one sample blew up in an experiment other than
  ``blowup-sweep`` (those samples are excluded from the estimates)
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimators as est
from .initial import INITIAL, make_initial
from .io import emit_plot_script, write_csv, write_summary
from .noise import (BandError, NoiseConfig, SymmetryError, ThetaSpectrum, make_theta_ball, make_theta_band,
                    make_theta_kraichnan)
from .solvers import MODELS, SimConfig, make_model, simulate
from .spectral import FourierGrid

log = logging.getLogger("torus_spde")

EXIT_OK, EXIT_ERROR, EXIT_BLOWUP = 0, 1, 2

EXPERIMENTS = ("simulate", "rate-sweep", "blowup-sweep", "mixing", "dissipation", "convolution-probe", "hs-mixing")

DEFAULT_MODEL = {
    "simulate": "navier-stokes",
    "rate-sweep": "navier-stokes",
    "blowup-sweep": "keller-segel",
    "mixing": "linear-transport",
    "dissipation": "transport-diffusion",
    "convolution-probe": "linear-transport",
    "hs-mixing": "linear-transport",
}

ALLOWED_MODELS = {
    "blowup-sweep": ("keller-segel",),
    "mixing": ("linear-transport",),
    "dissipation": ("transport-diffusion",),
    "convolution-probe": ("linear-transport",),
    "hs-mixing": ("linear-transport",),
}

DEFAULT_INITIAL = {
    "simulate": {"kind": "shear-layer"},
    "rate-sweep": {"kind": "shear-layer"},
    "blowup-sweep": {"kind": "gaussian-bump", "mass": 40.0, "width": 0.05},
    "mixing": {"kind": "two-mode"},
    "dissipation": {"kind": "single-mode", "k": [1, 0]},
    "convolution-probe": {"kind": "random-band", "kmin": 1, "slope": 1.0, "seed": 11},
    "hs-mixing": {"kind": "shear-layer"},  # unused: the basis functions are the data
}

OPTION_DEFAULTS = {
    "simulate": {"snapshot_format": "npy", "deterministic": False},
    "rate-sweep": {},
    "blowup-sweep": {"level": 0.95, "check_deterministic": True},
    "mixing": {"times": [0.1, 0.5, 1.0], "phi": [1, 0], "mollifier_width": 0.1},
    "dissipation": {"t_min": 1.0},
    "convolution-probe": {"delta": 1.0, "betas": None},
    "hs-mixing": {"s": 2.0, "k_max": 8.0, "heat_kappa": None},
}

FAMILY_KEYS = {
    "band": {"a": 0.0},
    "ball": {"a": 0.0},
    "kraichnan": {"k0": 1.0, "zeta": 1.0},
    "file": {},
}

TOP_DEFAULTS = {
    "samples": 32,
    "p": 2.0,
    "alpha": 0.5,
    "eps": 0.25,
    "seed": 0,
    "batch": 64,
    "substeps": 1,
    "record_every": 1,
    "blowup_factor": 10.0,
    "cfl": 0.5,
    "output": "results",
    "threads": 1,
}
REQUIRED = ("experiment", "grid", "dt", "T", "noise")
TOP_KEYS = set(REQUIRED) | set(TOP_DEFAULTS) | {"model", "initial", "options"}


class ConfigError(ValueError):
    """Carries every violation found in a config, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    experiment: str
    grid: dict
    dt: float
    T: float
    noise: dict
    model: dict
    initial: dict
    options: dict
    samples: int = 32
    p: float = 2.0
    alpha: float = 0.5
    eps: float = 0.25
    seed: int = 0
    batch: int = 64
    substeps: int = 1
    record_every: int = 1
    blowup_factor: float = 10.0
    cfl: float = 0.5
    output: str = "results"
    threads: int = 1
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    # -- construction ----------------------------------------------------
    @classmethod
    def from_dict(cls, data, base_dir=".") -> "ExperimentConfig":
        return parse_dict(data, base_dir)

    def to_dict(self) -> dict:
        out = {
            "experiment": self.experiment,
            "grid": dict(self.grid),
            "dt": self.dt,
            "T": self.T,
            "noise": copy.deepcopy(self.noise),
            "model": dict(self.model),
            "initial": copy.deepcopy(self.initial),
            "options": copy.deepcopy(self.options),
        }
        for key in TOP_DEFAULTS:
            out[key] = getattr(self, key)
        return out

    # -- derived objects --------------------------------------------------
    def make_grid(self) -> FourierGrid:
        return FourierGrid(self.grid["N"], self.grid.get("d", 2), workers=self.threads)

    def make_model(self):
        params = {k: v for k, v in self.model.items() if k != "name"}
        return make_model(self.model["name"], **params)

    def family(self) -> list:
        return _family(self.noise, self.grid.get("d", 2), self.base_dir)

    @property
    def kappas(self) -> list:
        k = self.noise["kappa"]
        return list(k) if isinstance(k, list) else [k]

    def sim(self, grid: FourierGrid, T: float | None = None) -> SimConfig:
        return SimConfig(T=self.T if T is None else T, dt=self.dt, grid=grid, record_every=self.record_every,
                         seed=self.seed, substeps=self.substeps, alpha=self.alpha,
                         blowup_factor=self.blowup_factor, cfl=self.cfl)

    def estimator(self) -> est.EstimatorConfig:
        return est.EstimatorConfig(samples=self.samples, p=self.p, alpha=self.alpha, eps=self.eps, batch=self.batch)

    def initial_data(self, grid: FourierGrid):
        f0 = make_initial(grid, _initial_args(self.initial))
        if self.model["name"] == "keller-segel":
            # Keller-Segel evolves u = rho - rho_bar
            f0 = f0.copy()
            f0[(0,) * grid.d] = 0.0
        return f0


def _initial_args(spec: dict) -> dict:
    out = dict(spec)
    for key in ("k", "l", "center"):
        if key in out and isinstance(out[key], list):
            out[key] = tuple(out[key])
    return out


def _family(noise: dict, d: int, base_dir) -> list:
    fam = noise["family"]
    out = []
    for m in noise["members"]:
        if fam == "band":
            out.append((m, make_theta_band(m, noise["a"], d)))
        elif fam == "ball":
            out.append((m, make_theta_ball(m, noise["a"], d)))
        elif fam == "kraichnan":
            out.append((m, make_theta_kraichnan(noise["k0"], noise["zeta"], m, d)))
        else:
            path = Path(m)
            if not path.is_absolute():
                path = Path(base_dir) / path
            th = ThetaSpectrum.load(path)
            if th.d != d:
                raise ValueError(f"theta file {m} is {th.d}-dimensional, grid is {d}-dimensional")
            out.append((Path(m).stem, th))
    return out


# -- validation -------------------------------------------------------------------


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _check(errors, cond, msg):
    if not cond:
        errors.append(msg)
    return cond


def parse_dict(data, base_dir=".") -> ExperimentConfig:
    """Validate a config mapping, fill defaults and return an :class:`ExperimentConfig`."""
    errors: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError(["config must be a JSON object"])
    for key in sorted(set(data) - TOP_KEYS):
        errors.append(f"{key}: unknown key")
    for key in REQUIRED:
        if key not in data:
            errors.append(f"{key}: missing required field")
    exp = data.get("experiment")
    if "experiment" in data and exp not in EXPERIMENTS:
        errors.append(f"experiment: must be one of {list(EXPERIMENTS)}, got {exp!r}")
        exp = None
    top = {k: data.get(k, v) for k, v in TOP_DEFAULTS.items()}

    # scalars
    dt, T = data.get("dt"), data.get("T")
    if "dt" in data:
        _check(errors, _is_num(dt) and dt > 0, f"dt: must be a positive number, got {dt!r}")
    if "T" in data:
        _check(errors, _is_num(T) and T > 0, f"T: must be a positive number, got {T!r}")
    _check(errors, _is_int(top["samples"]) and top["samples"] >= 1, "samples: must be an integer >= 1")
    _check(errors, _is_num(top["p"]) and top["p"] >= 1, "p: must be a number >= 1")
    a_ok = _check(errors, _is_num(top["alpha"]) and 0 < top["alpha"] < 1,
                  f"alpha: must lie in the open interval (0, 1), got {top['alpha']!r}")
    if _check(errors, _is_num(top["eps"]) and top["eps"] > 0, "eps: must be a positive number") and a_ok:
        _check(errors, top["eps"] <= top["alpha"], "eps: must lie in (0, alpha]")
    _check(errors, _is_int(top["seed"]) and 0 <= top["seed"] < 2**64, "seed: must be an integer in [0, 2^64)")
    for key in ("batch", "substeps", "record_every", "threads"):
        _check(errors, _is_int(top[key]) and top[key] >= 1, f"{key}: must be an integer >= 1")
    _check(errors, _is_num(top["blowup_factor"]) and top["blowup_factor"] > 1, "blowup_factor: must exceed 1")
    _check(errors, _is_num(top["cfl"]) and top["cfl"] > 0, "cfl: must be positive")
    _check(errors, isinstance(top["output"], str) and top["output"] != "", "output: must be a non-empty path")

    # grid
    grid_spec, grid = data.get("grid"), None
    if "grid" in data:
        if _check(errors, isinstance(grid_spec, dict), "grid: must be an object {N, d}"):
            grid_spec = {"d": 2, **grid_spec}
            for key in sorted(set(grid_spec) - {"N", "d"}):
                errors.append(f"grid.{key}: unknown key")
            n_ok = _check(errors, _is_int(grid_spec.get("N")) and grid_spec.get("N", 0) >= 4
                          and grid_spec["N"] % 2 == 0, f"grid.N: must be an even integer >= 4, got {grid_spec.get('N')!r}")
            d_ok = _check(errors, grid_spec["d"] in (2, 3) and _is_int(grid_spec["d"]), "grid.d: must be 2 or 3")
            if n_ok and d_ok:
                grid = FourierGrid(grid_spec["N"], grid_spec["d"])
    d = grid.d if grid is not None else 2

    # model
    model_spec = data.get("model", {})
    if not isinstance(model_spec, dict):
        errors.append("model: must be an object {name, ...params}")
        model_spec = {}
    model_spec = dict(model_spec)
    if exp is not None:
        model_spec.setdefault("name", DEFAULT_MODEL[exp])
    name = model_spec.get("name")
    init_pre = data.get("initial", DEFAULT_INITIAL.get(exp, {}))
    if name == "keller-segel" and isinstance(init_pre, dict) and init_pre.get("kind") == "gaussian-bump":
        # the initial spec describes rho and rho_bar is its mean on the unit torus
        mass = init_pre.get("mass", 40.0)
        if "rho_bar" not in model_spec:
            model_spec["rho_bar"] = mass
        elif model_spec["rho_bar"] != mass:
            errors.append(f"model.rho_bar: must equal initial.mass = {mass} (the mean of rho)")
    if name is not None:
        if name not in MODELS:
            errors.append(f"model.name: must be one of {sorted(MODELS)}, got {name!r}")
        elif exp in ALLOWED_MODELS and name not in ALLOWED_MODELS[exp]:
            errors.append(f"model.name: {exp} needs one of {list(ALLOWED_MODELS[exp])}, got {name!r}")
        else:
            try:
                obj = make_model(name, **{k: v for k, v in model_spec.items() if k != "name"})
                model_spec = {"name": name, **{k: getattr(obj, k) for k in MODELS[name].__dataclass_fields__}}
                if d != 2 and name not in ("linear-transport", "transport-diffusion"):
                    errors.append(f"model.name: {name} is implemented for d = 2 only")
            except (TypeError, ValueError) as exc:
                errors.append(f"model: {exc}")

    # noise
    noise = data.get("noise")
    if "noise" in data:
        noise = _parse_noise(noise, exp, d, grid, base_dir, errors)

    # initial data
    init = data.get("initial", DEFAULT_INITIAL.get(exp, {"kind": "shear-layer"}))
    if _check(errors, isinstance(init, dict) and "kind" in init, "initial: must be an object {kind, ...params}"):
        init = copy.deepcopy(init)
        if init["kind"] not in INITIAL:
            errors.append(f"initial.kind: must be one of {sorted(INITIAL)}, got {init['kind']!r}")
        elif grid is not None:
            try:
                f0 = make_initial(grid, _initial_args(init))
                if not np.isfinite(f0).all():
                    errors.append("initial: produced non-finite values")
            except (TypeError, ValueError) as exc:
                errors.append(f"initial: {exc}")

    # experiment options
    opts = data.get("options", {})
    if exp is not None and _check(errors, isinstance(opts, dict), "options: must be an object"):
        allowed = OPTION_DEFAULTS[exp]
        for key in sorted(set(opts) - set(allowed)):
            errors.append(f"options.{key}: unknown key for {exp}")
        opts = {**copy.deepcopy(allowed), **{k: v for k, v in opts.items() if k in allowed}}
        _check_options(exp, opts, top, dt, T, d, grid, errors)

    if exp == "dissipation" and _is_num(T):
        _check(errors, T >= 2, "T: dissipation fits need T >= 2")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(experiment=exp, grid=grid_spec, dt=dt, T=T, noise=noise, model=model_spec,
                            initial=init, options=opts, base_dir=Path(base_dir), **top)


def _parse_noise(noise, exp, d, grid, base_dir, errors) -> dict:
    if not isinstance(noise, dict):
        errors.append("noise: must be an object {kappa, family, members, ...}")
        return {}
    noise = copy.deepcopy(noise)
    fam = noise.setdefault("family", "band")
    if fam not in FAMILY_KEYS:
        errors.append(f"noise.family: must be one of {sorted(FAMILY_KEYS)}, got {fam!r}")
        return noise
    for key, val in FAMILY_KEYS[fam].items():
        noise.setdefault(key, val)
    noise.setdefault("frame", "default")
    for key in sorted(set(noise) - {"kappa", "family", "members", "frame"} - set(FAMILY_KEYS[fam])):
        errors.append(f"noise.{key}: unknown key for family {fam}")
    kappa = noise.get("kappa")
    if kappa is None:
        errors.append("noise.kappa: missing required field")
    elif isinstance(kappa, list):
        if exp not in ("dissipation", "convolution-probe"):
            errors.append("noise.kappa: a list of intensities is only accepted by dissipation and convolution-probe")
        elif not kappa or not all(_is_num(k) and k >= 0 for k in kappa):
            errors.append("noise.kappa: must be a non-empty list of numbers >= 0")
    elif not (_is_num(kappa) and kappa >= 0):
        errors.append(f"noise.kappa: must be a number >= 0, got {kappa!r}")
    elif exp in ("rate-sweep", "convolution-probe") and kappa == 0:
        errors.append(f"noise.kappa: {exp} needs kappa > 0")
    members = noise.get("members")
    if members is None:
        errors.append("noise.members: missing required field")
        return noise
    if not isinstance(members, list) or not members:
        errors.append("noise.members: must be a non-empty list")
        return noise
    if exp == "rate-sweep" and len(members) < 3:
        errors.append("noise.members: a rate sweep needs at least 3 members")
    for key in ("a", "k0", "zeta"):
        if key in noise and not _is_num(noise[key]):
            errors.append(f"noise.{key}: must be a number")
    if noise["frame"] != "default":
        errors.append("noise.frame: only 'default' is supported")
    for i, m in enumerate(members):
        try:
            if fam in ("band", "ball"):
                if not (_is_int(m) and m >= 1):
                    errors.append(f"noise.members[{i}]: band index must be an integer >= 1, got {m!r}")
                    continue
            elif fam == "kraichnan":
                if not (_is_num(m) and m >= 1):
                    errors.append(f"noise.members[{i}]: k_max must be a number >= 1, got {m!r}")
                    continue
            elif not isinstance(m, str):
                errors.append(f"noise.members[{i}]: must be a path to a theta JSON file")
                continue
            if not all(_is_num(noise[k]) for k in FAMILY_KEYS[fam]):
                continue
            ((_, th),) = _family({**noise, "members": [m]}, d, base_dir)
            if grid is not None:
                th.on_grid(grid)
        except BandError as exc:
            errors.append(f"noise.members[{i}]: {exc}")
        except (SymmetryError, ValueError, OSError, KeyError) as exc:
            errors.append(f"noise.members[{i}]: {exc}")
    return noise


def _check_options(exp, opts, top, dt, T, d, grid, errors):
    if exp == "simulate":
        _check(errors, opts["snapshot_format"] in ("npy", "csv", None),
               "options.snapshot_format: must be 'npy', 'csv' or null")
        _check(errors, isinstance(opts["deterministic"], bool), "options.deterministic: must be true or false")
    elif exp == "blowup-sweep":
        _check(errors, _is_num(opts["level"]) and 0 < opts["level"] < 1, "options.level: must lie in (0, 1)")
        _check(errors, isinstance(opts["check_deterministic"], bool),
               "options.check_deterministic: must be true or false")
    elif exp == "mixing":
        times = opts["times"]
        if _check(errors, isinstance(times, list) and times and all(_is_num(t) and t >= 0 for t in times),
                  "options.times: must be a non-empty list of times >= 0"):
            if _is_num(dt) and _is_num(T) and dt > 0:
                for t in times:
                    if t > T + 1e-12 or abs(t / dt - round(t / dt)) > 1e-6:
                        errors.append(f"options.times: {t} must be a multiple of dt within [0, T]")
        phi = opts["phi"]
        if _check(errors, isinstance(phi, list) and len(phi) == d and all(_is_int(c) for c in phi),
                  f"options.phi: must be an integer wavevector of length {d}") and grid is not None:
            _check(errors, max(abs(c) for c in phi) <= grid.band, "options.phi: wavevector outside the dealiased band")
        w = opts["mollifier_width"]
        _check(errors, w is None or (_is_num(w) and w > 0), "options.mollifier_width: must be positive or null")
    elif exp == "dissipation":
        _check(errors, _is_num(opts["t_min"]) and opts["t_min"] >= 0, "options.t_min: must be >= 0")
        if _is_num(opts["t_min"]) and _is_num(T):
            _check(errors, opts["t_min"] < T, "options.t_min: must be below T")
    elif exp == "convolution-probe":
        _check(errors, _is_num(opts["delta"]) and opts["delta"] > 0, "options.delta: must be positive")
        if opts["betas"] is None and _is_num(top["eps"]):
            opts["betas"] = [top["eps"], d / 2 + top["eps"]]
        betas = opts["betas"]
        _check(errors, isinstance(betas, list) and betas and all(_is_num(b) and b >= 0 for b in betas),
               "options.betas: must be a non-empty list of numbers >= 0")
    elif exp == "hs-mixing":
        s, k = opts["s"], opts["k_max"]
        _check(errors, _is_num(s) and s > d / 2, f"options.s: must exceed d/2 = {d / 2}")
        if _check(errors, _is_num(k) and k >= 1, "options.k_max: must be >= 1") and grid is not None:
            _check(errors, math.floor(k) <= grid.band,
                   f"options.k_max: {k} exceeds the dealiased band {grid.band} of N = {grid.N}")
        hk = opts["heat_kappa"]
        _check(errors, hk is None or (_is_num(hk) and hk >= 0), "options.heat_kappa: must be >= 0 or null")


def parse_config(path) -> ExperimentConfig:
    """Read and validate a JSON config file; raises :class:`ConfigError` listing every problem."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config file {path} does not exist"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
    return parse_dict(data, base_dir=path.parent)


def serialize(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n"


# -- experiments -------------------------------------------------------------------


def _noise(kappa, theta) -> NoiseConfig:
    return NoiseConfig(float(kappa), theta)


def _run_simulate(cfg, out: Path):
    grid = cfg.make_grid()
    model = cfg.make_model()
    sim = cfg.sim(grid)
    f0 = cfg.initial_data(grid)
    det = cfg.options["deterministic"]
    rows, blown, per = [], 0, []
    for label, theta in cfg.family():
        noise = _noise(cfg.kappas[0], theta)
        tr = simulate(model, noise, sim, f0, samples=cfg.samples, deterministic=det)
        idx = np.arange(0, len(tr.step_times), cfg.record_every)
        if idx[-1] != len(tr.step_times) - 1:
            idx = np.append(idx, len(tr.step_times) - 1)
        for s in range(tr.samples):
            for j in idx:
                for c, fname in enumerate(tr.names):
                    rows.append((label, s, tr.step_times[j], fname, tr.diagnostics["l2"][j, s, c],
                                 tr.diagnostics["h1"][j, s, c], tr.diagnostics["hneg"][j, s, c], bool(tr.blowup[s])))
        blown += int(tr.blowup.sum())
        if cfg.options["snapshot_format"]:
            tr.export(out / "snapshots" / str(label), fmt=cfg.options["snapshot_format"],
                      metadata={"model": cfg.model, "noise": {"kappa": cfg.kappas[0], "member": label},
                                "seed": cfg.seed})
        per.append({"n": label, "theta_linf": theta.linf, "blowups": int(tr.blowup.sum()),
                    "final_l2_mean": float(np.mean(tr.diagnostics["l2"][-1, :, 0])), "stability": tr.info})
    write_csv(out / "results.csv", ["n", "sample", "time", "field", "l2", "h1", "hneg_alpha", "blowup"], rows)
    checks = {"no_blowup": blown == 0}
    return {"members": per, "blowups": blown, "checks": checks}, blown


def _run_rate_sweep(cfg, out: Path):
    grid = cfg.make_grid()
    fit = est.rate_sweep(cfg.make_model(), cfg.kappas[0], cfg.family(), cfg.sim(grid), cfg.estimator(),
                         cfg.initial_data(grid))
    fam = cfg.family()
    rows = [(lab, th.linf, r.estimate, r.stderr) for (lab, th), r in zip(fam, fit.results)]
    write_csv(out / "results.csv", ["n", "theta_linf", "estimate", "stderr"], rows)
    emit_plot_script(out / "results.csv", "rate")
    excluded = sum(r.excluded for r in fit.results)
    gaps = [a.estimate - b.estimate > 2 * math.hypot(a.stderr, b.stderr) for a, b in zip(fit.results, fit.results[1:])]
    checks = {"strictly_decreasing": all(gaps), "slope_positive": fit.slope > 0}
    return {
        "estimate": [r.estimate for r in fit.results],
        "stderr": [r.stderr for r in fit.results],
        "slope": fit.slope,
        "intercept": fit.intercept,
        "r2": fit.r2,
        "alpha_minus_slope": cfg.alpha - fit.slope,
        "excluded": excluded,
        "checks": checks,
    }, excluded


def _run_blowup(cfg, out: Path):
    grid = cfg.make_grid()
    model = cfg.make_model()
    sim = cfg.sim(grid)
    f0 = cfg.initial_data(grid)
    summary = {}
    if cfg.options["check_deterministic"]:
        summary["deterministic_blowup_time"] = est.deterministic_blowup(model, f0, sim)
    res = est.blowup_probability(model, cfg.kappas[0], cfg.family(), f0, sim, cfg.samples, cfg.batch,
                                 cfg.options["level"])
    rows = [(r.label, r.count, r.samples, r.freq, r.ci_low, r.ci_high) for r in res]
    write_csv(out / "results.csv", ["n", "blowup_count", "M", "freq", "ci_low", "ci_high"], rows)
    emit_plot_script(out / "results.csv", "blowup")
    freqs = [r.freq for r in res]
    summary.update({
        "estimate": freqs,
        "stderr": [math.sqrt(f * (1 - f) / r.samples) for f, r in zip(freqs, res)],
        "checks": {"non_increasing": all(a >= b for a, b in zip(freqs, freqs[1:])),
                   "last_below_one": res[-1].ci_high < 1.0},
    })
    return summary, 0


def _run_mixing(cfg, out: Path):
    grid = cfg.make_grid()
    sim = cfg.sim(grid, T=max(cfg.options["times"]))
    f0 = cfg.initial_data(grid)
    x = grid.coordinates()
    phi = np.exp(2j * np.pi * sum(k * xc for k, xc in zip(cfg.options["phi"], x)))
    w = cfg.options["mollifier_width"]
    chi = est.gaussian_mollifier(grid, w) if w is not None else None
    rows, checks, per = [], {}, []
    for label, theta in cfg.family():
        res = est.mixing_variance(f0, phi, cfg.options["times"], _noise(cfg.kappas[0], theta), sim, cfg.samples,
                                  cfg.batch, chi)
        for i, t in enumerate(res.times):
            v = res.variance[i]
            sm = res.smeared[i] if res.smeared is not None else None
            rows.append((label, t, v.estimate, v.stderr, v.upper(), res.bound,
                         sm.estimate if sm else float("nan"), sm.upper() if sm else float("nan"),
                         res.smeared_bound if sm else float("nan")))
        checks[f"bound_n{label}"] = all(v.upper() <= res.bound for v in res.variance)
        if res.smeared is not None:
            checks[f"smeared_bound_n{label}"] = all(v.upper() <= res.smeared_bound for v in res.smeared)
        per.append({"n": label, "bound": res.bound, "smeared_bound": res.smeared_bound})
    write_csv(out / "results.csv", ["n", "time", "variance", "stderr", "upper95", "bound", "smeared",
                                    "smeared_upper95", "smeared_bound"], rows)
    return {"members": per, "checks": checks}, 0


def _run_dissipation(cfg, out: Path):
    grid = cfg.make_grid()
    sim = cfg.sim(grid)
    f0 = cfg.initial_data(grid)
    nu = cfg.model["nu"]
    rows, decay_rows, per = [], [], []
    for kappa in cfg.kappas:
        for label, theta in cfg.family():
            fit = est.dissipation_decay_fit(_noise(kappa, theta), nu, f0, sim, cfg.samples, cfg.batch,
                                            cfg.options["t_min"])
            for s, r in enumerate(fit.rates):
                rows.append((kappa, label, s, r))
            tag = f"kappa={kappa:g} n={label}"
            mean_log = fit.log_norm.mean(axis=1)
            for j in range(0, len(fit.times), cfg.record_every):
                decay_rows.append((tag, fit.times[j], mean_log[j]))
            per.append({"kappa": kappa, "n": label, "median_rate": fit.median_rate,
                        "contraction": fit.contraction.tolist()})
    write_csv(out / "results.csv", ["kappa", "n", "sample", "rate"], rows)
    write_csv(out / "decay.csv", ["label", "time", "mean_log_norm"], decay_rows)
    emit_plot_script(out / "decay.csv", "decay")
    meds = [p["median_rate"] for p in per]
    checks = {"contraction_below_one": all(max(p["contraction"]) < 1 for p in per if p["kappa"] > 0)}
    if len(cfg.family()) == 1 and len(cfg.kappas) > 1:
        order = np.argsort(cfg.kappas, kind="stable")
        checks["rate_increasing_in_kappa"] = bool(np.all(np.diff(np.array(meds)[order]) > 0))
    return {"members": per, "estimate": meds, "checks": checks}, 0


def _run_probe(cfg, out: Path):
    grid = cfg.make_grid()
    sim = cfg.sim(grid)
    w0 = cfg.initial_data(grid)
    rows, estimates = [], []
    for kappa in cfg.kappas:
        for label, theta in cfg.family():
            res = est.convolution_probe(_noise(kappa, theta), cfg.options["delta"], w0, sim, cfg.estimator(),
                                        tuple(cfg.options["betas"]))
            for beta, r in res.items():
                rows.append((label, kappa, beta, theta.linf, r.estimate, r.stderr))
                estimates.append(r.estimate)
    write_csv(out / "results.csv", ["n", "kappa", "beta", "theta_linf", "estimate", "stderr"], rows)
    return {"estimate": estimates, "checks": {"finite": bool(np.isfinite(estimates).all())}}, 0


def _run_hs(cfg, out: Path):
    grid = cfg.make_grid()
    sim = cfg.sim(grid)
    o = cfg.options
    rows, per = [], []
    for label, theta in cfg.family():
        res = est.hilbert_schmidt_mixing(_noise(cfg.kappas[0], theta), o["s"], cfg.alpha, sim, cfg.samples,
                                         o["k_max"], o["heat_kappa"])
        rows.append((label, theta.linf, res.estimate, res.stderr, res.tail))
        per.append(res)
    write_csv(out / "results.csv", ["n", "theta_linf", "estimate", "stderr", "tail_bound"], rows)
    gaps = [a.estimate - b.estimate > 2 * math.hypot(a.stderr, b.stderr) for a, b in zip(per, per[1:])]
    checks = {"decreasing": all(gaps), "tail_below_10pct": all(r.tail < 0.1 * r.estimate for r in per)}
    return {"estimate": [r.estimate for r in per], "stderr": [r.stderr for r in per],
            "tail_bound": per[0].tail if per else None, "checks": checks}, 0


RUNNERS = {
    "simulate": _run_simulate,
    "rate-sweep": _run_rate_sweep,
    "blowup-sweep": _run_blowup,
    "mixing": _run_mixing,
    "dissipation": _run_dissipation,
    "convolution-probe": _run_probe,
    "hs-mixing": _run_hs,
}


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one experiment, writing ``results.csv`` and ``summary.json`` under ``cfg.output``.

    A relative output directory is taken relative to the working directory;
    theta files are looked up relative to the config file.
    """
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            results, blown = RUNNERS[cfg.experiment](cfg, out)
    except (ValueError, RuntimeError, OSError) as exc:
        log.error("%s failed: %s", cfg.experiment, exc)
        return EXIT_ERROR
    checks = results.get("checks", {})
    results["pass"] = bool(all(checks.values()))
    results["blowups"] = int(blown)
    write_summary(out / "summary.json", cfg.experiment, cfg.to_dict(), results)
    if blown and cfg.experiment != "blowup-sweep":
        log.warning("%d samples blew up", blown)
        return EXIT_BLOWUP
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="torus-spde", description="Transport-noise SPDE experiments on the torus.",
                                 epilog="exit codes: 0 ok, 1 config or runtime error, 2 sample blow-up")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    ap.add_argument("--output", help="override the output directory")
    ap.add_argument("--threads", type=int, help="FFT worker threads")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        path = Path(args.config)
        data = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ConfigError(["config must be a JSON object"])
        data.setdefault("experiment", args.experiment)
        if data["experiment"] != args.experiment:
            raise ConfigError([f"experiment: config is for {data['experiment']!r}, command is {args.experiment!r}"])
        for key in ("seed", "output", "threads"):
            if getattr(args, key) is not None:
                data[key] = getattr(args, key)
        cfg = parse_dict(data, base_dir=path.parent)
    except ConfigError as exc:
        for e in exc.errors:
            log.error("config: %s", e)
        return EXIT_ERROR
    except (OSError, json.JSONDecodeError) as exc:
        log.error("cannot read config: %s", exc)
        return EXIT_ERROR
    code = run_experiment(cfg)
    log.info("results in %s (exit %d)", cfg.output, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
