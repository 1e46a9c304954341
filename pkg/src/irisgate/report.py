"""Plot-ready summaries of a finished run.

Writes into ``<run>/report/``:

* ``boxplots.csv``: per condition and metric, the median, linear-interpolated
  quartiles and Tukey whiskers (furthest points within 1.5 IQR).
* ``histograms.csv``: genuine and impostor bin counts per enrollment condition.
* ``sweep_table.csv``: the discard sweep as percentages with 95% CIs.
"""

from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import numpy as np

from .model import CONDITIONS, condition_name
from .pipeline import ArtifactMissing, read_gate_csv

BOX_METRICS = ("via", "pir", "mrd1", "mrd2", "sharpness")


class ReportWarning(UserWarning):
    pass


def boxplot_stats(values) -> dict:
    """Median, quartiles (linear interpolation) and 1.5 IQR whiskers."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("no values")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "n": int(v.size),
        "min": float(v[0]),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v[-1]),
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": int(v.size - inside.size),
    }


def _require(path: Path) -> Path:
    if not path.exists():
        raise ArtifactMissing(f"missing artifact: {path.name} (looked in {path.parent})")
    return path


def _write(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _metric_groups(metrics_csv: Path) -> dict:
    """condition -> metric -> values, over captures that passed validation."""
    groups: dict = {condition_name(l, d): {m: [] for m in BOX_METRICS} for l, d in CONDITIONS}
    with metrics_csv.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["passed"] != "1":
                continue
            g = groups.setdefault(row["condition"], {m: [] for m in BOX_METRICS})
            for m in BOX_METRICS:
                if row[m] != "":
                    g[m].append(float(row[m]))
    return groups


def _pct(x: str) -> str:
    return "n/a" if x == "" else f"{100 * float(x):.2f}"


def report(run_dir, out_dir=None) -> str:
    """Write the report CSVs and return a text summary.

    Raises:
        ArtifactMissing: naming the first required artifact that is absent.
    """
    run = Path(run_dir)
    metrics_csv = _require(run / "metrics.csv")
    env_json = _require(run / "decision_env.json")
    gate_csv = _require(run / "gate_sweep.csv")
    out = Path(out_dir) if out_dir else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"irisgate report for {run}", ""]

    box_rows = []
    lines.append("Metric medians by condition (passing captures)")
    for cond, by_metric in _metric_groups(metrics_csv).items():
        if not by_metric["via"]:
            warnings.warn(f"condition {cond} has no passing captures; omitted", ReportWarning, stacklevel=2)
            lines.append(f"  {cond:<18} (no captures)")
            continue
        meds = []
        for m in BOX_METRICS:
            st = boxplot_stats(by_metric[m])
            box_rows.append([cond, m, st["n"], st["min"], st["whisker_low"], st["q1"], st["median"],
                             st["q3"], st["whisker_high"], st["max"], st["outliers"]])
            meds.append(f"{m}={st['median']:.4g}")
        lines.append(f"  {cond:<18} n={len(by_metric['via']):<4} " + " ".join(meds))
    _write(out / "boxplots.csv",
           ("condition", "metric", "n", "min", "whisker_low", "q1", "median", "q3", "whisker_high", "max",
            "outliers"), box_rows)

    env = json.loads(env_json.read_text())
    hist_rows = []
    lines += ["", f"Decidability by enrollment condition (main: {env['enrollment_condition']})"]
    for cond, e in env["environments"].items():
        if e is None:
            warnings.warn(f"enrollment condition {cond} has no pairs; omitted", ReportWarning, stacklevel=2)
            lines.append(f"  {cond:<18} (no pairs)")
            continue
        edges = e["bin_edges"]
        for k in range(len(edges) - 1):
            hist_rows.append([cond, edges[k], edges[k + 1], e["genuine_hist"][k], e["impostor_hist"][k]])
        d = e["d_prime"]
        dtxt = "undefined" if d is None else f"{d:.3f}"
        lines.append(f"  {cond:<18} d'={dtxt:<9} genuine {e['mu1']:.3f}  impostor {e['mu2']:.3f}  "
                     f"(n={e['n_genuine']}/{e['n_impostor']})")
    _write(out / "histograms.csv", ("enrollment_condition", "bin_low", "bin_high", "genuine", "impostor"),
           hist_rows)

    sweep = read_gate_csv(gate_csv)
    table_rows = []
    lines += ["", "Discard sweep (percent, mean [95% CI])"]
    if not sweep:
        warnings.warn("gate sweep is empty; table omitted", ReportWarning, stacklevel=2)
        lines.append("  (gate skipped)")
    current = None
    for r in sweep:
        if r["model"] != current:
            current = r["model"]
            lines.append(f"  {current}")
            lines.append(f"    {'discard':>7}  {'FMR':>22}  {'FNMR':>22}")
        rate = f"{100 * float(r['discard_rate']):.0f}%"
        fmr = f"{_pct(r['mean_fmr'])} [{_pct(r['fmr_ci_low'])}, {_pct(r['fmr_ci_high'])}]"
        fnmr = f"{_pct(r['mean_fnmr'])} [{_pct(r['fnmr_ci_low'])}, {_pct(r['fnmr_ci_high'])}]"
        lines.append(f"    {rate:>7}  {fmr:>22}  {fnmr:>22}")
        table_rows.append([r["model"], rate, _pct(r["mean_fmr"]), _pct(r["fmr_ci_low"]), _pct(r["fmr_ci_high"]),
                           _pct(r["mean_fnmr"]), _pct(r["fnmr_ci_low"]), _pct(r["fnmr_ci_high"])])
    _write(out / "sweep_table.csv",
           ("model", "discard", "fmr_pct", "fmr_ci_low_pct", "fmr_ci_high_pct", "fnmr_pct", "fnmr_ci_low_pct",
            "fnmr_ci_high_pct"), table_rows)

    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    return text

