import copy
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from torus_spde import cli
from torus_spde.cli import ConfigError, parse_config, parse_dict, run_experiment, serialize
from torus_spde.io import PLOT_SCHEMAS, SchemaError, detect_kind, emit_plot_script, plot_script_text, read_csv, write_csv, write_summary

GOLDEN = Path(__file__).parent / "golden"

RATE = {
    "experiment": "rate-sweep",
    "grid": {"N": 20},
    "dt": 0.01,
    "T": 0.03,
    "noise": {"kappa": 1.0, "members": [1, 2, 3]},
    "initial": {"kind": "random-band", "kmin": 1, "kmax": 4, "slope": 1.0, "seed": 2},
    "samples": 4,
    "alpha": 0.9,
}

BLOWUP = {
    "experiment": "blowup-sweep",
    "grid": {"N": 32},
    "dt": 1e-4,
    "T": 0.005,
    "noise": {"kappa": 0.0, "members": [1, 2]},
    "samples": 2,
}


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def _errors(data):
    with pytest.raises(ConfigError) as exc:
        parse_dict(data)
    return exc.value.errors


# -- parsing ------------------------------------------------------------------------


def test_minimal_rate_sweep_gets_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, {k: RATE[k] for k in ("experiment", "grid", "dt", "T", "noise")}))
    assert cfg.samples == 32 and cfg.p == 2.0 and cfg.alpha == 0.5 and cfg.eps == 0.25
    assert cfg.seed == 0 and cfg.output == "results" and cfg.threads == 1
    assert cfg.grid == {"N": 20, "d": 2}
    assert cfg.model == {"name": "navier-stokes", "nu": 0.0}
    assert cfg.initial == {"kind": "shear-layer"}
    assert cfg.noise["family"] == "band" and cfg.noise["a"] == 0.0


def test_alpha_out_of_range_names_field_and_interval():
    errs = _errors({**RATE, "alpha": 1.5})
    assert any(e.startswith("alpha:") and "(0, 1)" in e for e in errs)


def test_band_beyond_dealias_band():
    errs = _errors({**RATE, "grid": {"N": 32}, "noise": {"kappa": 1.0, "members": [1, 2, 32]}})
    assert len(errs) == 1
    assert errs[0].startswith("noise.members[2]:") and "band" in errs[0]


def test_unknown_keys_rejected_at_every_level():
    data = copy.deepcopy(RATE)
    data["colour"] = 1
    data["grid"]["M"] = 3
    data["noise"]["zeta"] = 2.0
    data["options"] = {"bogus": 1}
    errs = _errors(data)
    for key in ("colour", "grid.M", "noise.zeta", "options.bogus"):
        assert any(e.startswith(key + ":") for e in errs), key


def test_all_errors_are_collected():
    data = {k: v for k, v in RATE.items() if k != "T"}
    data.update(alpha=2.0, samples=0, dt=-1.0)
    errs = _errors(data)
    for key in ("T", "alpha", "samples", "dt"):
        assert any(e.startswith(key + ":") for e in errs), key


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config(bad)


def test_model_experiment_compatibility():
    errs = _errors({**BLOWUP, "model": {"name": "navier-stokes"}})
    assert any("keller-segel" in e for e in errs)


def test_keller_segel_mean_rule():
    cfg = parse_dict(BLOWUP)
    assert cfg.model["rho_bar"] == 40.0
    errs = _errors({**BLOWUP, "model": {"name": "keller-segel", "rho_bar": 1.0}})
    assert any(e.startswith("model.rho_bar") for e in errs)


def test_option_checks():
    mix = {"experiment": "mixing", "grid": {"N": 16}, "dt": 0.1, "T": 1.0,
           "noise": {"kappa": 1.0, "members": [1]}, "options": {"times": [0.15, 2.0], "phi": [9, 0]}}
    errs = _errors(mix)
    assert sum(e.startswith("options.times") for e in errs) == 2
    assert any(e.startswith("options.phi") for e in errs)
    hs = {"experiment": "hs-mixing", "grid": {"N": 16}, "dt": 0.1, "T": 1.0,
          "noise": {"kappa": 1.0, "members": [1]}, "options": {"s": 0.5, "k_max": 8}}
    errs = _errors(hs)
    assert any(e.startswith("options.s") for e in errs)
    assert any(e.startswith("options.k_max") for e in errs)
    dis = {"experiment": "dissipation", "grid": {"N": 16}, "dt": 0.1, "T": 1.0,
           "noise": {"kappa": [0.0, 1.0], "members": [1]}}
    assert any(e.startswith("T:") for e in _errors(dis))


def test_kappa_list_only_where_allowed():
    errs = _errors({**RATE, "noise": {"kappa": [1.0, 2.0], "members": [1, 2, 3]}})
    assert any(e.startswith("noise.kappa") for e in errs)


def test_theta_file_family(tmp_path):
    from torus_spde.noise import make_theta_band
    make_theta_band(2).dump(tmp_path / "th2.json")
    data = {**RATE, "noise": {"kappa": 1.0, "family": "file", "members": ["th2.json", "missing.json", 5]}}
    with pytest.raises(ConfigError) as exc:
        parse_config(_write(tmp_path, data))
    errs = exc.value.errors
    assert not any("members[0]" in e for e in errs)
    assert any("members[1]" in e for e in errs) and any("members[2]" in e for e in errs)


def test_round_trip_idempotent(tmp_path):
    cfg = parse_dict(RATE)
    once = serialize(cfg)
    twice = serialize(parse_dict(json.loads(once)))
    assert once == twice


@given(st.sampled_from(["rate-sweep", "mixing", "hs-mixing", "dissipation", "convolution-probe", "simulate"]),
       st.integers(0, 2**63), st.floats(0.1, 0.9), st.integers(1, 40))
def test_round_trip_property(exp, seed, alpha, samples):
    data = {"experiment": exp, "grid": {"N": 32}, "dt": 0.1, "T": 2.0,
            "noise": {"kappa": 1.0, "members": [1, 2, 3]}, "seed": seed, "alpha": alpha,
            "eps": alpha / 2, "samples": samples}
    once = serialize(parse_dict(data))
    assert serialize(parse_dict(json.loads(once))) == once


# -- runs ---------------------------------------------------------------------------


def test_rate_sweep_schema_and_summary(tmp_path):
    cfg = parse_dict({**RATE, "output": str(tmp_path / "out")})
    assert run_experiment(cfg) == 0
    header, rows = read_csv(tmp_path / "out" / "results.csv")
    assert header == ["n", "theta_linf", "estimate", "stderr"]
    assert [r[0] for r in rows] == ["1", "2", "3"]
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["schema_version"] == 1 and summary["experiment"] == "rate-sweep"
    est = [float(r[2]) for r in rows]
    linf = [float(r[1]) for r in rows]
    slope = np.polyfit(np.log(linf), np.log(est), 1)[0]
    assert summary["slope"] == pytest.approx(slope, rel=1e-9)
    assert isinstance(summary["pass"], bool)
    assert (tmp_path / "out" / "plot_results.py").read_text() == (GOLDEN / "rate.py").read_text()


def test_identical_configs_give_identical_csv(tmp_path):
    a = parse_dict({**RATE, "output": str(tmp_path / "a"), "seed": 7})
    b = parse_dict({**RATE, "output": str(tmp_path / "b"), "seed": 7})
    assert run_experiment(a) == 0 and run_experiment(b) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_blowup_sweep_schema(tmp_path):
    cfg = parse_dict({**BLOWUP, "output": str(tmp_path / "out")})
    assert run_experiment(cfg) == 0
    header, rows = read_csv(tmp_path / "out" / "results.csv")
    assert header == ["n", "blowup_count", "M", "freq", "ci_low", "ci_high"]
    assert [r[1:4] for r in rows] == [["2", "2", "1"], ["2", "2", "1"]]
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["deterministic_blowup_time"] < 0.005
    assert (tmp_path / "out" / "plot_results.py").read_text() == (GOLDEN / "blowup.py").read_text()


def test_blowup_in_simulation_exits_two(tmp_path):
    data = {"experiment": "simulate", "grid": {"N": 32}, "dt": 1e-4, "T": 0.005,
            "model": {"name": "keller-segel"}, "initial": {"kind": "gaussian-bump", "mass": 40.0, "width": 0.05},
            "noise": {"kappa": 0.0, "members": [1]}, "samples": 1, "output": str(tmp_path / "out"),
            "options": {"snapshot_format": None}}
    assert run_experiment(parse_dict(data)) == 2
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["blowups"] == 1


def test_simulate_writes_snapshots(tmp_path):
    data = {"experiment": "simulate", "grid": {"N": 16}, "dt": 0.01, "T": 0.02,
            "noise": {"kappa": 0.5, "members": [1]}, "samples": 2, "output": str(tmp_path / "out")}
    assert run_experiment(parse_dict(data)) == 0
    header, rows = read_csv(tmp_path / "out" / "results.csv")
    assert header == ["n", "sample", "time", "field", "l2", "h1", "hneg_alpha", "blowup"]
    assert len(rows) == 2 * 3
    snaps = list((tmp_path / "out" / "snapshots" / "1").glob("*.npy"))
    assert len(snaps) == 1


def test_dissipation_emits_decay_script(tmp_path):
    data = {"experiment": "dissipation", "grid": {"N": 16}, "dt": 0.05, "T": 2.0,
            "noise": {"kappa": [0.0, 1.0], "members": [1]}, "samples": 2, "output": str(tmp_path / "out")}
    assert run_experiment(parse_dict(data)) == 0
    header, rows = read_csv(tmp_path / "out" / "decay.csv")
    assert header == ["label", "time", "mean_log_norm"]
    assert (tmp_path / "out" / "plot_decay.py").read_text() == (GOLDEN / "decay.py").read_text()
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["estimate"][0] == pytest.approx(4 * math.pi**2 * 0.01, rel=1e-10)


def test_main_exit_codes_and_overrides(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = _write(tmp_path, {**RATE, "alpha": 1.5})
    assert cli.main(["rate-sweep", "--config", str(path)]) == 1
    path = _write(tmp_path, RATE)
    assert cli.main(["mixing", "--config", str(path)]) == 1
    assert cli.main(["rate-sweep", "--config", str(path), "--seed", "3", "--output", "o", "--threads", "2"]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["params"]["seed"] == 3 and summary["params"]["threads"] == 2
    assert cli.main(["rate-sweep", "--config", str(tmp_path / "missing.json")]) == 1


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "torus_spde.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for exp in cli.EXPERIMENTS:
        assert exp in out.stdout


# -- io -----------------------------------------------------------------------------


def test_csv_full_precision(tmp_path):
    p = write_csv(tmp_path / "x.csv", ["a", "b", "c"], [(1 / 3, True, 7)])
    text = p.read_text()
    assert text == "a,b,c\n0.33333333333333331,true,7\n"
    assert float(read_csv(p)[1][0][0]) == 1 / 3


def test_summary_maps_nonfinite_to_null(tmp_path):
    p = write_summary(tmp_path / "s.json", "mixing", {"x": np.float64(1.5)},
                      {"v": float("nan"), "arr": np.array([1.0, np.inf])})
    data = json.loads(p.read_text())
    assert data["schema_version"] == 1
    assert data["v"] is None and data["arr"] == [1.0, None]
    assert data["params"]["x"] == 1.5


@pytest.mark.parametrize("kind,name", [("rate", "results.csv"), ("blowup", "results.csv"), ("decay", "decay.csv")])
def test_golden_plot_scripts(tmp_path, kind, name):
    csv_path = write_csv(tmp_path / name, PLOT_SCHEMAS[kind], [])
    assert plot_script_text(csv_path, kind) == (GOLDEN / f"{kind}.py").read_text()
    assert detect_kind(PLOT_SCHEMAS[kind]) == kind


def test_plot_schema_mismatch(tmp_path):
    p = write_csv(tmp_path / "results.csv", ["n", "kappa", "beta"], [])
    with pytest.raises(SchemaError):
        emit_plot_script(p)
    q = write_csv(tmp_path / "r2.csv", PLOT_SCHEMAS["rate"], [])
    with pytest.raises(SchemaError):
        emit_plot_script(q, "decay")


@pytest.mark.parametrize("kind", ["rate", "blowup", "decay"])
def test_emitted_scripts_render(tmp_path, kind):
    pytest.importorskip("matplotlib")
    rows = {
        "rate": [(2, 0.5, 0.1, 0.01), (4, 0.25, 0.06, 0.01), (8, 0.125, 0.04, 0.005)],
        "blowup": [(2, 10, 64, 10 / 64, 0.08, 0.26), (4, 3, 64, 3 / 64, 0.02, 0.13)],
        "decay": [("a", 0.0, 0.0), ("a", 1.0, -0.4), ("b", 0.0, 0.0), ("b", 1.0, -1.0)],
    }[kind]
    csv_path = write_csv(tmp_path / "data.csv", PLOT_SCHEMAS[kind], rows)
    script = emit_plot_script(csv_path, kind)
    out = subprocess.run([sys.executable, script.name, "fig.png"], cwd=tmp_path, capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "fig.png").stat().st_size > 0


@pytest.mark.parametrize("path", sorted((Path(__file__).parents[1] / "scripts" / "configs").glob("*.json")),
                         ids=lambda p: p.stem)
def test_shipped_configs_are_valid(path):
    cfg = parse_config(path)
    assert cfg.experiment in cli.EXPERIMENTS
