"""CSV/JSON artifacts for attack traces and metrics.

Files (schema tags inside the JSON, headers fixed in the CSVs):

* ``trace.csv`` - one row per outer epoch: epoch, q, L_clf, L_harm, L_div,
  L_G, L_S, disputed_fraction, probe_consistency.
* ``consistency_vs_q.csv`` - q, consistency (plot-ready).
* ``metrics.json`` - ``qedg.metrics/1``.
* ``asr.csv`` - method, attack, targeted, epsilon, asr, n_evaluated, n_success.

Missing values are empty CSV cells and JSON nulls.  Floats use ``repr`` so
re-emission is byte-identical.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from ..evaluation import MetricsReport
from ..extraction import TRACE_COLUMNS, AttackTrace


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _clean(obj):
    """NaN -> None, recursively, so the JSON is strict."""
    if isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def write_trace_csv(trace: AttackTrace, path) -> Path:
    return _write_csv(path, TRACE_COLUMNS, trace.rows())


def write_consistency_csv(trace: AttackTrace, path) -> Path:
    return _write_csv(path, ("q", "consistency"), [(r.q, r.probe_consistency) for r in trace.records])


def write_asr_csv(report: MetricsReport, path, method: str = "qedg", baselines=()) -> Path:
    rows = [
        (method, c.attack, c.targeted, c.epsilon, c.rate, c.n_evaluated, c.n_success)
        for c in list(report.asr_table) + list(baselines)
    ]
    return _write_csv(path, ("method", "attack", "targeted", "epsilon", "asr", "n_evaluated", "n_success"), rows)


def emit_report(trace: AttackTrace, metrics: MetricsReport | None, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    metrics = metrics or MetricsReport()
    return {
        "trace": write_trace_csv(trace, out / "trace.csv"),
        "consistency": write_consistency_csv(trace, out / "consistency_vs_q.csv"),
        "metrics": write_json(out / "metrics.json", metrics.to_dict()),
    }
