"""Plain-text tables and CSV twins built from a ledger snapshot."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ReportError
from .metrics import fewshot_curve
from .pipelines import Status

APPROACH_ORDER = ("FT", "FE")


@dataclass
class ReportBundle:
    summary_table: list
    per_task_table: list
    best_config_table: list
    fewshot_csv: dict = field(default_factory=dict)     # task -> csv text
    timing_csv: dict = field(default_factory=dict)      # "task_approach" -> csv text

    def files(self):
        out = {
            "summary.csv": _csv(self.summary_table),
            "summary.txt": _text(self.summary_table),
            "per_task.csv": _csv(self.per_task_table),
            "per_task.txt": _text(self.per_task_table),
            "best_config.csv": _csv(self.best_config_table),
            "best_config.txt": _text(self.best_config_table),
        }
        for task, text in sorted(self.fewshot_csv.items()):
            out[f"fewshot_{task}.csv"] = text
        for name, text in sorted(self.timing_csv.items()):
            out[f"timing_{name}.csv"] = text
        return out

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, text in self.files().items():
            (out_dir / name).write_text(text)
        return sorted(self.files())


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def _csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _text(rows):
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [cols] + [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _best_records(ledger):
    """(task, approach) -> best record; search-phase records when there are any."""
    has_search = any(r.phase == "search" for r in ledger.records)
    out = {}
    tasks = sorted({r.task for r in ledger.records})
    for task in tasks:
        for approach in APPROACH_ORDER:
            if has_search:
                rec = ledger.best_record(task, approach)
            else:
                cands = [r for r in ledger.records if r.task == task and r.approach == approach
                         and r.status != Status.FAILED.value and r.v_acc is not None]
                rec = max(cands, key=lambda r: r.v_acc) if cands else None
            if rec is not None:
                out[(task, approach)] = rec
    return out


def summary_rows(ledger, best):
    hours = ledger.analyst_hours
    rows = []
    for approach in APPROACH_ORDER:
        recs = ledger.select(approach)
        if not recs:
            continue
        chosen = [r for (t, a), r in sorted(best.items()) if a == approach]
        powered = [r.p_avg_watts for r in recs if r.power_source != "none"]
        rows.append({
            "approach": approach,
            "V_ACC": _mean([r.v_acc for r in chosen]),
            "T_ACC": _mean([r.t_acc for r in chosen]),
            "P_AVG_W": _mean(powered),
            "E_CO2_kg": float(sum(r.e_co2_kg for r in recs)),
            "T_h": float(sum(r.wall_time_hours for r in recs)),
            "n_EXP": len(recs),
            "A_h": hours.get(approach, hours.get("all")),
        })
    return rows


def per_task_rows(best):
    tasks = sorted({t for t, _ in best})
    rows = []
    for approach in APPROACH_ORDER:
        for metric, name in (("v_acc", "V_ACC"), ("t_acc", "T_ACC")):
            vals = {t: getattr(best[(t, approach)], metric) for t in tasks if (t, approach) in best}
            if not vals:
                continue
            row = {"approach": approach, "metric": name}
            row.update({t: vals.get(t) for t in tasks})
            row["MEAN"] = _mean(vals.values())
            rows.append(row)
    return rows


def best_config_rows(best):
    rows = []
    for (task, approach), r in sorted(best.items()):
        c = r.config
        frac = c.get("frozen_fraction") if approach == "FT" else c.get("extract_fraction")
        rows.append({
            "task": task,
            "approach": approach,
            "src": r.source_tag,
            "layers": f"{frac * 100:.0f}%",
            "LR": c.get("learning_rate"),
            "WD": c.get("weight_decay"),
            "Mom": c.get("momentum"),
            "V_ACC": r.v_acc,
        })
    for row in rows:
        for k in ("LR", "WD", "Mom"):
            if row[k] is not None:
                row[k] = f"{row[k]:g}"
    return rows


def _curve_csv(points):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ic", "mean", "min", "max"])
    for p in points:
        w.writerow([p.ic, f"{p.rel_diff_mean:.6f}", f"{p.rel_diff_min:.6f}", f"{p.rel_diff_max:.6f}"])
    return buf.getvalue()


def _timing_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ic", "time_mean_h", "time_min_h", "time_max_h"])
    for ic, mean, lo, hi in rows:
        w.writerow([ic, f"{mean:.6f}", f"{lo:.6f}", f"{hi:.6f}"])
    return buf.getvalue()


def fewshot_points_from(ledger):
    recs = [r for r in ledger.records if r.phase == "fewshot"]
    out = {}
    for task in sorted({r.task for r in recs}):
        ok = defaultdict(dict)
        for r in recs:
            if r.task == task and r.status == Status.COMPLETED.value and r.t_acc is not None:
                ok[(r.ic, r.subset)][r.approach] = r
        paired = [r for pair in ok.values() if len(pair) == 2 for r in pair.values()]
        if paired:
            out[task] = fewshot_curve(paired)
    return out


def timing_rows_from(ledger):
    recs = [r for r in ledger.records if r.phase == "fewshot"]
    out = {}
    for task, approach in sorted({(r.task, r.approach) for r in recs}):
        rows = []
        for ic in sorted({r.ic for r in recs if r.task == task and r.approach == approach}):
            hours = [r.wall_time_hours for r in recs if r.task == task and r.approach == approach and r.ic == ic]
            rows.append((ic, float(np.mean(hours)), float(min(hours)), float(max(hours))))
        out[f"{task}_{approach}"] = rows
    return out


def render_report(ledger, fewshot_points=None):
    if ledger is None or not ledger.records:
        raise ReportError("ledger is empty")
    best = _best_records(ledger)
    points = fewshot_points if fewshot_points is not None else fewshot_points_from(ledger)
    return ReportBundle(
        summary_table=summary_rows(ledger, best),
        per_task_table=per_task_rows(best),
        best_config_table=best_config_rows(best),
        fewshot_csv={task: _curve_csv(p) for task, p in points.items()},
        timing_csv={k: _timing_csv(v) for k, v in timing_rows_from(ledger).items()},
    )
