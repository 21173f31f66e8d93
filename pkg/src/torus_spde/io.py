"""CSV/JSON result files and emitted plotting scripts."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(v)


def write_csv(path, columns, rows) -> Path:
    """UTF-8 CSV with a header row; floats carry 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list, list]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_summary(path, experiment: str, params: dict, results: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "experiment": experiment, "params": params}
    doc.update(results)
    path.write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- plot scripts ----------------------------------------------------------------

PLOT_SCHEMAS = {
    "rate": ["n", "theta_linf", "estimate", "stderr"],
    "blowup": ["n", "blowup_count", "M", "freq", "ci_low", "ci_high"],
    "decay": ["label", "time", "mean_log_norm"],
}

_HEAD = '''"""Plot {title} from {csv_name}; run with python, needs matplotlib."""
import csv
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

CSV = {csv_path!r}
OUT = sys.argv[1] if len(sys.argv) > 1 else {png!r}

with open(CSV, encoding="utf-8") as fh:
    rows = list(csv.DictReader(fh))
'''

_BODY = {
    "rate": '''
x = [float(r["theta_linf"]) for r in rows]
y = [float(r["estimate"]) for r in rows]
e = [2 * float(r["stderr"]) for r in rows]
fig, ax = plt.subplots(figsize=(5, 4))
ax.errorbar(x, y, yerr=e, fmt="o-", capsize=3)
for r, xi, yi in zip(rows, x, y):
    ax.annotate("n=" + r["n"], (xi, yi), textcoords="offset points", xytext=(4, 4), fontsize=8)
ax.set_xscale("log")
ax.set_yscale("log")
ax.set_xlabel("theta l-infinity norm")
ax.set_ylabel("error moment")
fig.tight_layout()
fig.savefig(OUT, dpi=150)
''',
    "blowup": '''
labels = [r["n"] for r in rows]
freq = [float(r["freq"]) for r in rows]
lo = [f - float(r["ci_low"]) for f, r in zip(freq, rows)]
hi = [float(r["ci_high"]) - f for f, r in zip(freq, rows)]
fig, ax = plt.subplots(figsize=(5, 4))
ax.bar(labels, freq, yerr=[lo, hi], capsize=4, color="tab:red", alpha=0.7)
ax.set_ylim(0, 1.05)
ax.set_xlabel("band index n")
ax.set_ylabel("blow-up frequency")
fig.tight_layout()
fig.savefig(OUT, dpi=150)
''',
    "decay": '''
curves = {}
for r in rows:
    t, y = curves.setdefault(r["label"], ([], []))
    t.append(float(r["time"]))
    y.append(float(r["mean_log_norm"]))
fig, ax = plt.subplots(figsize=(5, 4))
for label, (t, y) in curves.items():
    ax.plot(t, y, label=label)
ax.legend(fontsize=8)
ax.set_xlabel("t")
ax.set_ylabel("mean log L2 norm")
fig.tight_layout()
fig.savefig(OUT, dpi=150)
''',
}

_TITLES = {"rate": "log-log error rates", "blowup": "blow-up frequencies", "decay": "L2 decay curves"}


class SchemaError(ValueError):
    pass


def detect_kind(header) -> str:
    for kind, cols in PLOT_SCHEMAS.items():
        if list(header[: len(cols)]) == cols:
            return kind
    raise SchemaError(f"CSV header {header} matches no plot schema")


def plot_script_text(csv_path, kind: str | None = None) -> str:
    csv_path = Path(csv_path)
    header, _ = read_csv(csv_path)
    found = detect_kind(header)
    if kind is not None and kind != found:
        raise SchemaError(f"CSV schema is {found!r}, not {kind!r}")
    return _HEAD.format(title=_TITLES[found], csv_name=csv_path.name, csv_path=csv_path.name,
                        png=csv_path.stem + ".png") + _BODY[found]


def emit_plot_script(csv_path, kind: str | None = None, out=None) -> Path:
    """Write a standalone matplotlib script next to (or at ``out`` for) the CSV.

    Paths inside the script are relative to the CSV's directory.
    """
    csv_path = Path(csv_path)
    text = plot_script_text(csv_path, kind)
    out = Path(out) if out is not None else csv_path.with_name(f"plot_{csv_path.stem}.py")
    out.write_text(text, encoding="utf-8")
    return out
