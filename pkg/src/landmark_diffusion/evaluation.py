"""
MRE / SDR metrics with per-dataset unit conversion, aggregation over
repeated runs, and plain-text / CSV table rendering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from landmark_diffusion.data import SpacingRule
from landmark_diffusion.heatmaps import LandmarkSet


def radial_errors(
    pred: LandmarkSet, truth: LandmarkSet, spacing: Optional[float] = None
) -> np.ndarray:
    """Per-landmark Euclidean distances, in mm when a spacing (mm/px) is
    given, else in pixels. Coordinates must be in the same (original)
    resolution."""
    if len(pred) != len(truth):
        raise ValueError(
            f"landmark count mismatch: {len(pred)} predicted vs {len(truth)} truth"
        )
    deltas = pred.points - truth.points
    errors = np.sqrt((deltas ** 2).sum(axis=1))
    if spacing is not None:
        errors = errors * spacing
    return errors


def sdr(errors: Sequence[float], thresholds: Sequence[float]) -> Dict[float, float]:
    """Successful detection rate: percentage of errors <= each threshold
    (inclusive), thresholds in the same units as the errors."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("empty error sequence")
    out = {}
    for thr in thresholds:
        if thr <= 0:
            raise ValueError(f"threshold must be positive, got {thr}")
        out[float(thr)] = 100.0 * float((errors <= thr).sum()) / errors.size
    return out


def compute_spacing(rule: SpacingRule, truth: LandmarkSet) -> Optional[float]:
    """mm-per-pixel for one image: a declared constant (fixed_spacing), a
    reference length divided by the ground-truth wrist-pair pixel distance
    (wrist_pair), or None for pixel-unit datasets."""
    if rule.rule == "none":
        return None
    if rule.rule == "fixed_spacing":
        return float(rule.mm_per_px)
    if rule.rule == "wrist_pair":
        i, j = rule.wrist_indices
        dist = float(np.linalg.norm(truth.points[i] - truth.points[j]))
        if dist <= 0.0:
            raise ValueError("coincident wrist landmarks (zero pixel distance)")
        return rule.reference_length_mm / dist
    raise ValueError(f"unknown spacing rule {rule.rule!r}")


@dataclass
class EvaluationReport:
    dataset: str
    label_budget: int
    run_count: int
    errors: List[List[float]]  # per image, per landmark (physical units)
    mre: float
    mre_std: float  # across runs; 0 for a single run
    sdr: Dict[float, float]
    sdr_std: Dict[float, float] = field(default_factory=dict)
    units: str = "px"

    def to_json(self) -> str:
        return json.dumps(
            {
                "dataset": self.dataset,
                "label_budget": self.label_budget,
                "run_count": self.run_count,
                "errors": self.errors,
                "mre": self.mre,
                "mre_std": self.mre_std,
                "sdr": {str(k): v for k, v in self.sdr.items()},
                "sdr_std": {str(k): v for k, v in self.sdr_std.items()},
                "units": self.units,
            },
            indent=2,
        )

    @staticmethod
    def from_json(s: str) -> "EvaluationReport":
        d = json.loads(s)
        return EvaluationReport(
            dataset=d["dataset"],
            label_budget=d["label_budget"],
            run_count=d["run_count"],
            errors=d["errors"],
            mre=d["mre"],
            mre_std=d["mre_std"],
            sdr={float(k): v for k, v in d["sdr"].items()},
            sdr_std={float(k): v for k, v in d["sdr_std"].items()},
            units=d["units"],
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: Path | str) -> "EvaluationReport":
        return EvaluationReport.from_json(Path(path).read_text())


def build_report(
    dataset: str,
    per_image_errors: Sequence[Sequence[float]],
    thresholds: Sequence[float],
    label_budget: int = 0,
    units: str = "px",
) -> EvaluationReport:
    """Single-run report: MRE is the arithmetic mean over all
    (image, landmark) radial errors."""
    flat = np.concatenate([np.asarray(e, dtype=np.float64) for e in per_image_errors])
    return EvaluationReport(
        dataset=dataset,
        label_budget=label_budget,
        run_count=1,
        errors=[list(map(float, e)) for e in per_image_errors],
        mre=float(flat.mean()),
        mre_std=0.0,
        sdr=sdr(flat, thresholds),
        units=units,
    )


def aggregate_runs(reports: Sequence[EvaluationReport]) -> EvaluationReport:
    """Mean and population standard deviation of each metric across runs."""
    if len(reports) == 0:
        raise ValueError("no reports to aggregate")
    ids = {(r.dataset, r.label_budget) for r in reports}
    if len(ids) > 1:
        raise ValueError(f"inconsistent dataset/budget across runs: {sorted(ids)}")
    mres = np.array([r.mre for r in reports])
    thresholds = sorted(reports[0].sdr)
    sdr_mean, sdr_std = {}, {}
    for thr in thresholds:
        vals = np.array([r.sdr[thr] for r in reports])
        sdr_mean[thr] = float(vals.mean())
        sdr_std[thr] = float(vals.std())
    return EvaluationReport(
        dataset=reports[0].dataset,
        label_budget=reports[0].label_budget,
        run_count=len(reports),
        errors=[e for r in reports for e in r.errors],
        mre=float(mres.mean()),
        mre_std=float(mres.std()),
        sdr=sdr_mean,
        sdr_std=sdr_std,
        units=reports[0].units,
    )


def render_table(reports: Sequence[EvaluationReport], delimiter: Optional[str] = None) -> str:
    """Rows = label budgets/runs, columns = MRE and per-threshold SDR.

    With `delimiter` set the output is delimiter-separated; otherwise a
    fixed-width plain-text table."""
    if not reports:
        return ""
    thresholds = sorted(reports[0].sdr)
    units = reports[0].units
    header = ["dataset", "k", "runs", f"MRE ({units})"] + [
        f"SDR {thr:g}{units} (%)" for thr in thresholds
    ]
    rows = []
    for r in reports:
        row = [
            r.dataset,
            str(r.label_budget),
            str(r.run_count),
            f"{r.mre:.2f}±{r.mre_std:.2f}",
        ]
        for thr in thresholds:
            std = r.sdr_std.get(thr, 0.0)
            row.append(f"{r.sdr[thr]:.2f}±{std:.2f}")
        rows.append(row)
    if delimiter is not None:
        return "\n".join(delimiter.join(r) for r in [header] + rows) + "\n"
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = []
    for r in [header] + rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
