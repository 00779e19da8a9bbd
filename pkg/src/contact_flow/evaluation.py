"""Geometry metrics: Chamfer distance, F-score at distance thresholds,
unit-cube normalization, and contact-residual statistics.

Chamfer convention used throughout: mean of un-squared Euclidean
nearest-neighbor distances, averaged over both directions and halved.
Absolute values are therefore comparable across runs of this package but not
against evaluations that use squared or summed variants.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .contact import ContactSet, nearest_occupied
from .voxelcore import BinaryGrid, OccupancyGrid, PointCloud, binarize, extract_surface, index_to_point

METRICS_SCHEMA_VERSION = "v1"
F_SCORE_THRESHOLDS = (0.01, 0.02, 0.05)

METRICS_CSV_COLUMNS = (
    "scenario",
    "method",
    "seed",
    "chamfer",
    "f_0.01",
    "f_0.02",
    "f_0.05",
    "contact_residual_median",
    "final_J",
    "failed",
)


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    f_thresholds: tuple[float, ...] = F_SCORE_THRESHOLDS

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("binarization threshold must lie in (0, 1)")
        if any(t <= 0 for t in self.f_thresholds):
            raise ValueError("F-score thresholds must be positive")


@dataclass(frozen=True)
class MetricsReport:
    chamfer: float
    f_scores: dict[float, float]
    contact_residual_median: float
    scenario: str = ""
    method: str = ""
    seed: int = -1
    final_J: float = math.nan
    failed: bool = False

    def to_row(self) -> dict:
        row = {
            "scenario": self.scenario,
            "method": self.method,
            "seed": self.seed,
            "chamfer": self.chamfer,
            "contact_residual_median": self.contact_residual_median,
            "final_J": self.final_J,
            "failed": int(self.failed),
        }
        for tau in F_SCORE_THRESHOLDS:
            row[f"f_{tau:g}"] = self.f_scores.get(tau, math.nan)
        return row

    def to_json_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        return {
            "schema": METRICS_SCHEMA_VERSION,
            "scenario": self.scenario,
            "method": self.method,
            "seed": self.seed,
            "chamfer": clean(self.chamfer),
            "f_scores": {f"{tau:g}": clean(v) for tau, v in sorted(self.f_scores.items())},
            "contact_residual_median": clean(self.contact_residual_median),
            "final_J": clean(self.final_J),
            "failed": self.failed,
        }


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|), Euclidean, unit-cube units."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance requires non-empty point clouds")
    d_ab, _ = cKDTree(b.points).query(a.points)
    d_ba, _ = cKDTree(a.points).query(b.points)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def f_score(pred: PointCloud, gt: PointCloud, tau: float) -> float:
    """Harmonic mean of precision/recall of point proximity at threshold tau."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("f-score requires non-empty point clouds")
    if tau <= 0:
        raise ValueError("threshold must be positive")
    d_pg, _ = cKDTree(gt.points).query(pred.points)
    d_gp, _ = cKDTree(pred.points).query(gt.points)
    precision = float(np.mean(d_pg <= tau))
    recall = float(np.mean(d_gp <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def unit_cube_transform(points: PointCloud) -> tuple[float, np.ndarray]:
    """Scale and offset mapping the cloud's bounding box to be centered in [0,1]^3
    with its longest axis spanning length 1.  Returns (scale, offset) such that
    p' = p * scale + offset."""
    lo = points.points.min(axis=0)
    hi = points.points.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise ValueError("cannot normalize a cloud with zero extent on all axes")
    scale = 1.0 / extent
    center = (lo + hi) / 2.0
    offset = 0.5 - center * scale
    return scale, offset


def normalize_to_unit_cube(points: PointCloud) -> PointCloud:
    """Isotropic rescale so the longest bounding-box edge has length 1, centered in the cube."""
    scale, offset = unit_cube_transform(points)
    return PointCloud(points.points * scale + offset)


def contact_residuals(output: BinaryGrid, contacts: ContactSet) -> np.ndarray:
    """Distance from each contact point to the nearest occupied voxel center of the output."""
    res = np.empty(len(contacts))
    for i, pc in enumerate(contacts.points):
        ps = nearest_occupied(output, pc)
        res[i] = float(np.linalg.norm(index_to_point(np.asarray(ps), output.resolution) - pc))
    return res


def evaluate_run(
    output: OccupancyGrid,
    gt: BinaryGrid,
    contacts: ContactSet | None,
    cfg: EvalConfig = EvalConfig(),
    scenario: str = "",
    method: str = "",
    seed: int = -1,
    final_J: float = math.nan,
) -> MetricsReport:
    """Surface metrics of a generated occupancy against ground truth.

    Both surface clouds are mapped by the ground-truth cloud's unit-cube
    transform, so prediction scale errors stay visible.  An empty prediction
    yields a failure-flagged report with sentinel metrics.
    """
    pred_binary = binarize(output, cfg.threshold)
    if pred_binary.is_empty():
        return MetricsReport(
            chamfer=math.inf,
            f_scores={tau: 0.0 for tau in cfg.f_thresholds},
            contact_residual_median=math.inf,
            scenario=scenario,
            method=method,
            seed=seed,
            final_J=final_J,
            failed=True,
        )
    pred_surface = extract_surface(pred_binary)
    gt_surface = extract_surface(gt)
    scale, offset = unit_cube_transform(gt_surface)
    pred_n = PointCloud(pred_surface.points * scale + offset)
    gt_n = PointCloud(gt_surface.points * scale + offset)
    scores = {tau: f_score(pred_n, gt_n, tau) for tau in cfg.f_thresholds}
    residual = math.nan
    if contacts is not None:
        residual = float(np.median(contact_residuals(pred_binary, contacts)))
    return MetricsReport(
        chamfer=chamfer(pred_n, gt_n),
        f_scores=scores,
        contact_residual_median=residual,
        scenario=scenario,
        method=method,
        seed=seed,
        final_J=final_J,
        failed=False,
    )


def write_metrics_csv(path, reports) -> None:
    """One row per run; schema documented in the README (version v1)."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_CSV_COLUMNS)
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.to_row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
