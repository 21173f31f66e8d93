import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from torus_spde.estimators import expected_energy_change
from torus_spde.initial import gaussian_bump, random_band, shear_layer, single_mode, two_mode
from torus_spde.noise import NoiseConfig, make_theta_ball, make_theta_band, rng_for
from torus_spde.solvers import (MSQG, BlowupDetected, Boussinesq, Integrator, KellerSegel, LinearTransport,
                                NavierStokes, SimConfig, TransportDiffusion, field_count, make_model, model_name,
                                nonlinearity, run_pair, simulate, step_deterministic, step_stochastic)
from torus_spde.spectral import FOUR_PI2, FourierGrid, SpectralField


def batch(f, m=1):
    return np.asarray(f)[None, None] if m == 1 else np.asarray(f)[None]


def test_single_mode_self_advection_vanishes():
    g = FourierGrid(32)
    w = single_mode(g, (2, 1), 1.3)
    assert np.abs(nonlinearity(NavierStokes(), g, batch(w))).max() < 1e-12


def test_msqg_euler_limit_matches_navier_stokes():
    g = FourierGrid(32)
    w = random_band(g, 1, 6, seed=2)
    a = nonlinearity(MSQG(beta=1.0), g, batch(w))
    b = nonlinearity(NavierStokes(), g, batch(w))
    assert np.array_equal(a, b)


def test_boussinesq_without_temperature_is_euler():
    g = FourierGrid(32)
    w = random_band(g, 1, 6, seed=3)
    state = np.stack([np.zeros_like(w), w])[None]
    out = nonlinearity(Boussinesq(), g, state)
    assert np.abs(out[0, 0]).max() == 0
    assert np.allclose(out[0, 1], nonlinearity(NavierStokes(), g, batch(w))[0, 0], atol=1e-14)


def test_boussinesq_buoyancy_forcing():
    g = FourierGrid(32)
    gamma = single_mode(g, (1, 0))
    state = np.stack([gamma, np.zeros_like(gamma)])[None]
    out = nonlinearity(Boussinesq(), g, state)
    # with omega = 0 the only drift is -d_1 gamma in the omega equation
    assert np.allclose(out[0, 1], -g.ik[0] * gamma, atol=1e-13)


def test_keller_segel_cutoff_switches_off_nonlinearity():
    g = FourierGrid(32)
    u = random_band(g, 1, 5, seed=4, norm=50.0)
    model = KellerSegel(rho_bar=3.0, cutoff_alpha=0.5, cutoff_radius=1.0, cutoff_enabled=True)
    assert g.sobolev_norm(u, -0.5) > 2.0
    out = nonlinearity(model, g, batch(u))
    assert np.allclose(out[0, 0], -3.0 * u, atol=1e-12)
    assert model.cutoff(0.5) == 1.0 and model.cutoff(1.5) == 0.5 and model.cutoff(2.5) == 0.0


def test_keller_segel_identity_against_direct_divergence():
    g = FourierGrid(32)
    u = random_band(g, 1, 5, seed=8)
    model = KellerSegel(rho_bar=2.0)
    out = nonlinearity(model, g, batch(u))[0, 0]
    flux = g.inverse(u) * g.inverse(g.inv_gradient(u))
    direct = g.dealias(g.divergence(g.forward(flux))) - 2.0 * u
    direct[0, 0] = 0
    assert np.abs(out - direct).max() < 1e-10


def test_zero_noise_step_is_deterministic_step():
    g = FourierGrid(32)
    w = random_band(g, 1, 6, seed=5)
    noise = NoiseConfig(0.0, make_theta_band(2))
    a = Integrator(NavierStokes(0.01), g, noise).step(batch(w), 0.01, None)
    b = Integrator(NavierStokes(0.01), g, None, 0.0).step(batch(w), 0.01)
    assert np.array_equal(a, b)


def test_heat_flow_exact_over_many_steps():
    g = FourierGrid(32)
    f = random_band(g, 1, 10, seed=6)
    cfg = SimConfig(T=0.37, dt=0.01, grid=g)
    tr = simulate(TransportDiffusion(0.05), None, cfg, f)
    exact = np.exp(-FOUR_PI2 * 0.05 * 0.37 * g.k2) * g.dealias(f)
    assert np.abs(tr.final[0, 0] - exact).max() < 1e-12
    assert tr.times[-1] == pytest.approx(0.37)


def test_stochastic_isometry_defect_is_quadratic():
    g = FourierGrid(32)
    f = random_band(g, 1, 4, seed=1)[None, None]
    # kappa small enough that 8 pi^2 kappa |k|^2 dt << 1 on the support of f
    noise = NoiseConfig(0.01, make_theta_ball(1))
    integ = Integrator(LinearTransport(), g, noise)
    e0 = float(g.l2_norm(f[0, 0]) ** 2)
    exact = {dt: float(expected_energy_change(integ, f, dt)[0, 0]) / e0 for dt in (0.004, 0.002, 0.001)}
    # halving dt quarters the one-step defect
    assert exact[0.004] / exact[0.002] == pytest.approx(4, rel=0.1)
    assert exact[0.002] / exact[0.001] == pytest.approx(4, rel=0.1)
    # Monte Carlo over one-step draws agrees with the exact conditional mean
    dt, m = 0.004, 10000
    vals = []
    for start in range(0, m, 2500):
        ids = range(start, start + 2500)
        dwm = integ.noise.brownian([rng_for(21, j, 0) for j in ids], dt)
        new = integ.step(np.broadcast_to(f, (2500, *f.shape[1:])), dt, dwm)
        vals.append(g.l2_norm(new[:, 0]) ** 2 / e0 - 1)
    vals = np.concatenate(vals)
    se = vals.std(ddof=1) / math.sqrt(m)
    assert abs(vals.mean() - exact[dt]) < 3 * se


def test_deterministic_navier_stokes_energy_inequality():
    g = FourierGrid(32)
    w0 = random_band(g, 1, 8, seed=7, norm=3.0)
    nu = 0.005
    cfg = SimConfig(T=0.4, dt=2e-3, grid=g)
    tr = simulate(NavierStokes(nu), None, cfg, w0)
    l2 = tr.diagnostics["l2"][:, 0, 0]
    grad = 2 * np.pi * tr.diagnostics["h1"][:, 0, 0]
    t = tr.step_times
    dissip = np.concatenate([[0], np.cumsum(0.5 * (grad[1:] ** 2 + grad[:-1] ** 2) * np.diff(t))])
    lhs = l2**2 + 2 * nu * dissip
    assert np.all(lhs <= 1.01 * l2[0] ** 2)
    assert np.all(np.diff(l2) <= 1e-14)


def test_keller_segel_strong_noise_decays():
    g = FourierGrid(32)
    u0 = gaussian_bump(g, mass=1.0, width=0.1)
    u0[0, 0] = 0
    cfg = SimConfig(T=0.1, dt=1e-3, grid=g)
    tr = simulate(KellerSegel(rho_bar=1.0), NoiseConfig(5.0, make_theta_band(2)), cfg, u0, samples=2)
    l2 = tr.diagnostics["l2"][:, :, 0]
    assert not tr.blowup.any()
    assert np.all(np.diff(l2, axis=0) < 0)


def test_deterministic_keller_segel_blows_up():
    g = FourierGrid(64)
    u0 = gaussian_bump(g, mass=40.0, width=0.05)
    u0[0, 0] = 0
    cfg = SimConfig(T=1.0, dt=1e-4, grid=g)
    tr = simulate(KellerSegel(rho_bar=40.0), None, cfg, u0, store_states=False)
    assert tr.blowup[0]
    assert tr.blowup_time[0] < 1.0
    with pytest.raises(BlowupDetected):
        simulate(KellerSegel(rho_bar=40.0), None, cfg, u0, strict=True, store_states=False)


def test_zero_horizon_returns_initial_state():
    g = FourierGrid(16)
    w = random_band(g, 1, 4, seed=1)
    tr = simulate(NavierStokes(), NoiseConfig(1.0, make_theta_band(1)), SimConfig(T=0.0, dt=0.1, grid=g), w)
    assert tr.states.shape[0] == 1
    assert np.array_equal(tr.final[0, 0], g.dealias(w))


def test_same_seed_bit_identical_and_batch_independent():
    g = FourierGrid(32)
    w = shear_layer(g)
    noise = NoiseConfig(0.5, make_theta_band(2))
    cfg = SimConfig(T=0.02, dt=2e-3, grid=g, seed=9)
    a = simulate(NavierStokes(), noise, cfg, w, samples=3)
    b = simulate(NavierStokes(), noise, cfg, w, samples=3)
    assert np.array_equal(a.states, b.states)
    for key in a.diagnostics:
        assert np.array_equal(a.diagnostics[key], b.diagnostics[key])
    c = simulate(NavierStokes(), noise, cfg, w, samples=1, sample_offset=2)
    assert np.allclose(c.final[0], a.final[2], rtol=0, atol=1e-14)
    other = simulate(NavierStokes(), noise, SimConfig(T=0.02, dt=2e-3, grid=g, seed=10), w, samples=1)
    assert not np.allclose(other.final[0], a.final[0])


def test_substeps_refine_one_brownian_path():
    g = FourierGrid(16)
    integ = Integrator(LinearTransport(), g, NoiseConfig(1.0, make_theta_band(1)))
    coarse = integ.brownian(0.02, 3, [0], seed=1, substeps=2)
    fine = integ.brownian(0.01, 6, [0], seed=1) + integ.brownian(0.01, 7, [0], seed=1)
    assert np.allclose(coarse, fine, atol=1e-15)


def test_stochastic_run_preserves_mean_and_incompressibility():
    g = FourierGrid(32)
    w = random_band(g, 1, 6, seed=3)
    tr = simulate(NavierStokes(), NoiseConfig(1.0, make_theta_band(2)), SimConfig(T=0.05, dt=5e-3, grid=g), w)
    assert np.abs(tr.states[:, 0, 0, 0, 0]).max() < 1e-15
    assert np.abs(g.divergence(g.biot_savart(tr.final[0, 0]))).max() < 1e-12


def test_run_pair_zero_noise_has_zero_error():
    g = FourierGrid(16)
    w = random_band(g, 1, 4, seed=2)
    res = run_pair(NavierStokes(), NoiseConfig(0.0, make_theta_band(1)), SimConfig(T=0.05, dt=0.01, grid=g), w, 2)
    assert np.all(res.error == 0)


def test_run_pair_error_is_running_sup():
    g = FourierGrid(16)
    w = random_band(g, 1, 4, seed=2)
    res = run_pair(NavierStokes(), NoiseConfig(0.5, make_theta_band(1)), SimConfig(T=0.05, dt=0.01, grid=g), w, 2)
    assert np.all(res.error[0] == 0)
    assert np.all(res.error >= 0)
    assert np.all(np.diff(res.error, axis=0) >= 0)
    assert np.allclose(res.error[-1], np.max(res.distance, axis=0))


def test_run_pair_marks_blown_up_samples():
    g = FourierGrid(64)
    u0 = gaussian_bump(g, mass=40.0, width=0.05)
    u0[0, 0] = 0
    res = run_pair(KellerSegel(rho_bar=40.0), NoiseConfig(0.01, make_theta_band(1)),
                   SimConfig(T=0.01, dt=1e-4, grid=g), u0, 1)
    assert res.stochastic.blowup[0]
    assert np.isnan(res.sup_error[0])


def test_single_state_api():
    g = FourierGrid(16)
    w = SpectralField(g, random_band(g, 1, 4, seed=5))
    out = step_stochastic(NavierStokes(), w, NoiseConfig(1.0, make_theta_band(1)), 0.01, rng_for(0, 0, 0))
    assert isinstance(out, SpectralField)
    det = step_deterministic(NavierStokes(), w, 0.0, 0.01)
    assert np.abs(out.coeffs - det.coeffs).max() > 0
    pair = step_deterministic(Boussinesq(), (w, w), 0.1, 0.01)
    assert len(pair) == 2
    with pytest.raises(TypeError):
        step_deterministic(NavierStokes(), w.coeffs, 0.0, 0.01)


def test_trajectory_export(tmp_path):
    g = FourierGrid(16)
    tr = simulate(Boussinesq(), None, SimConfig(T=0.02, dt=0.01, grid=g), (two_mode(g), two_mode(g)))
    stem = tr.export(tmp_path, fmt="csv", metadata={"seed": 3})
    side = json.loads(open(f"{stem}.json").read())
    assert side["seed"] == 3 and side["fields"] == ["gamma", "omega"]
    arr = np.loadtxt(f"{stem}_omega.csv", delimiter=",")
    assert np.allclose(arr, g.inverse(tr.final[0, 1]), atol=1e-15)
    stem = tr.export(tmp_path, fmt="npy")
    assert np.load(f"{stem}.npy").shape == (2, 16, 16)


def test_cfl_warning():
    g = FourierGrid(32)
    w = random_band(g, 1, 4, seed=1, norm=100.0)
    with pytest.warns(RuntimeWarning, match="CFL"):
        simulate(NavierStokes(), None, SimConfig(T=0.1, dt=0.1, grid=g), w, store_states=False)


def test_model_registry():
    for name in ("navier-stokes", "boussinesq", "msqg", "keller-segel", "linear-transport", "transport-diffusion"):
        m = make_model(name)
        assert model_name(m) == name
        assert field_count(m) == (2 if name == "boussinesq" else 1)
    with pytest.raises(ValueError):
        make_model("euler")
    with pytest.raises(ValueError):
        NavierStokes(-1.0)
    with pytest.raises(ValueError):
        MSQG(beta=0.0)


def test_sim_config_step_sizes():
    g = FourierGrid(8)
    assert SimConfig(T=0.3, dt=0.1, grid=g).step_sizes() == [0.1] * 3
    steps = SimConfig(T=0.25, dt=0.1, grid=g).step_sizes()
    assert len(steps) == 3 and steps[-1] == pytest.approx(0.05)
    with pytest.raises(ValueError):
        SimConfig(T=1.0, dt=0.0, grid=g)


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["navier-stokes", "msqg", "linear-transport"]))
def test_stochastic_step_keeps_fields_real(seed, name):
    g = FourierGrid(16)
    w = random_band(g, 1, 4, seed=seed % 1000)
    integ = Integrator(make_model(name), g, NoiseConfig(1.0, make_theta_band(1)))
    dwm = integ.brownian(0.01, 0, [seed % 97], seed)
    new = integ.step(batch(w), 0.01, dwm)
    assert g.hermitian_defect(new[0, 0]) < 1e-14
    assert np.abs(g.forward(g.inverse(new)) - new).max() < 1e-13
