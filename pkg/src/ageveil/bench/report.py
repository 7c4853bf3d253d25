"""Byte-stable report emission: CSV/JSON tables and the run manifest.

Numbers are serialized with repr so equal inputs give identical bytes;
nothing in any emitted file depends on the clock.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from ..metrics import MetricsReport
from .budget import TradeoffBudget


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (int, str)):
        return str(value)
    return repr(value)


def write_csv(path, header: list, rows: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row width {len(row)} != header {len(header)}")
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8", newline="\n")


def comparison_to_rows(reports: list, budget: TradeoffBudget | None = None):
    """Header and rows for comparison.csv; the black-box model gets its own
    labeled column block after the training-pool columns."""
    if not reports:
        raise ValueError("no comparison rows to emit")
    teacher_names = list(reports[0].per_model_mae.keys())
    header = (["method", "sample_count"]
              + [f"mae_{n}" for n in teacher_names]
              + [f"r2_{n}" for n in teacher_names]
              + ["amae", "blackbox_mae", "blackbox_r2", "ssim", "disease_acc",
                 "iou", "pixel_mse", "disease_kl"])
    if budget is not None:
        header.append("budget_pass")
    header.append("config_checksum")
    rows = []
    for rep in reports:
        if list(rep.per_model_mae.keys()) != teacher_names:
            raise ValueError("reports disagree on the teacher set")
        row = ([rep.method, rep.sample_count]
               + [rep.per_model_mae[n] for n in teacher_names]
               + [rep.per_model_r2[n] for n in teacher_names]
               + [rep.amae, rep.heldout_mae, rep.heldout_r2, rep.ssim_mean,
                  rep.disease_acc, rep.iou_mean, rep.pixel_mse,
                  rep.disease_kl])
        if budget is not None:
            row.append(rep.pixel_mse <= budget.epsilon_pixel
                       and rep.disease_kl <= budget.tau_disease)
        row.append(rep.config_checksum)
        rows.append(row)
    return header, rows


def sweep_to_rows(points: list):
    if not points:
        raise ValueError("no sweep points to emit")
    model_names = list(points[0].per_model_mae.keys())
    header = (["strength", "amae"]
              + [f"mae_{n}" for n in model_names]
              + [f"r2_{n}" for n in model_names]
              + ["ssim", "disease_acc", "iou", "pixel_mse", "disease_kl",
                 "constraint_pass", "violations"])
    rows = []
    for p in points:
        rows.append([p.strength, p.amae]
                    + [p.per_model_mae[n] for n in model_names]
                    + [p.per_model_r2[n] for n in model_names]
                    + [p.ssim_mean, p.disease_acc, p.iou_mean, p.pixel_mse,
                       p.disease_kl, p.constraint_pass,
                       ";".join(p.violations)])
    return header, rows


def ablation_to_rows(rows: list):
    if not rows:
        raise ValueError("no ablation rows to emit")
    header = list(rows[0].keys())
    return header, [[r[k] for k in header] for r in rows]


def load_comparison_json(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        return [MetricsReport(**d) for d in json.load(fh)]


def emit_report(out_dir, comparison=None, sweep_points=None, ablation=None,
                run_meta=None, budget=None) -> list:
    """Write whichever tables are present; returns the emitted paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if comparison is not None:
        header, rows = comparison_to_rows(comparison, budget)
        write_csv(out / "comparison.csv", header, rows)
        _write_json(out / "comparison.json",
                    [asdict(rep) for rep in comparison])
        written += [out / "comparison.csv", out / "comparison.json"]
    if sweep_points is not None:
        header, rows = sweep_to_rows(sweep_points)
        write_csv(out / "sweep.csv", header, rows)
        written.append(out / "sweep.csv")
        from .sweep import plot_sweep
        plot_sweep(sweep_points, out / "sweep.png")
        written.append(out / "sweep.png")
    if ablation is not None:
        header, rows = ablation_to_rows(ablation)
        write_csv(out / "ablation.csv", header, rows)
        written.append(out / "ablation.csv")
    meta = dict(run_meta or {})
    if budget is not None:
        meta["budget"] = {"epsilon_pixel": budget.epsilon_pixel,
                          "tau_disease": budget.tau_disease}
    meta["files"] = sorted(p.name for p in written)
    _write_json(out / "run.json", meta)
    written.append(out / "run.json")
    return [str(p) for p in written]
