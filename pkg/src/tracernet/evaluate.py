"""Error metrics, difference maps, reflux grading and grade transition matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ShapeError

N_GRADES = 5
THETA_E = 0.1
TAU = 0.8
METRIC_ROWS = (
    ("Mean Squared Error", "test_mse"),
    ("Mean Absolute Error", "test_mae"),
    ("Mean Squared Error (unclamped)", "test_mse_raw"),
    ("Train Mean Squared Error", "train_mse"),
    ("Train Mean Absolute Error", "train_mae"),
    ("Best test-loss epoch", "best_epoch"),
)


def eval_metrics(predictions, targets) -> tuple[float, float]:
    """(MSE, MAE) over all samples, planes and pixels jointly."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    d = p - t
    return float(np.mean(d * d)), float(np.mean(np.abs(d)))


def difference_map(pred, target) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    return np.abs(p - t)


@dataclass
class MetricReport:
    label: str
    test_mse: float
    test_mae: float
    train_mse: float = float("nan")
    train_mae: float = float("nan")
    best_epoch: int | None = None
    test_mse_raw: float = float("nan")


@dataclass
class RefluxGrade:
    grade: int
    enhancement_24h: float
    ratio_24h: float
    ventricle_mean_24h: float
    sas_mean_24h: float
    series_enhancement: dict = field(default_factory=dict)
    aqueduct_enhancement: dict = field(default_factory=dict)

    def __int__(self):
        return self.grade


def _masked_mean(image: np.ndarray, mask: np.ndarray) -> float:
    if mask.shape != image.shape:
        raise ShapeError(f"mask shape {mask.shape} != image shape {image.shape}")
    return float(image[mask].mean())


def grade_reflux(
    pair_24h,
    ventricle_mask,
    sas_mask,
    baseline_pair,
    series: Mapping[float, np.ndarray] | None = None,
    aqueduct_mask=None,
    theta_e: float = THETA_E,
    tau: float = TAU,
) -> RefluxGrade:
    """Deterministic ventricular reflux grade from ROI statistics.

    Enhancement is the mean ventricle intensity minus the baseline ventricle
    mean, divided by the baseline pair's maximum (1 for min-max scaled input),
    so the rule is unchanged when all images are rescaled together. The
    ventricle/SAS ratio uses the same time point for both regions.

    Without ``series`` only grades 0, 3 and 4 are reachable. With a series,
    sub-threshold enhancement at 24 h is graded 2 if the lateral ventricles
    enhanced at some earlier time, 1 if only the aqueduct region did.
    """
    vmask = np.asarray(ventricle_mask, dtype=bool)
    smask = np.asarray(sas_mask, dtype=bool)
    if not vmask.any():
        raise ValueError("ventricle mask is empty")
    if not smask.any():
        raise ValueError("SAS mask is empty")
    img24 = np.asarray(pair_24h, dtype=np.float64)
    base = np.asarray(baseline_pair, dtype=np.float64)
    scale = float(np.max(np.abs(base)))
    if scale <= 0:
        raise ValueError("baseline pair is identically zero")
    v0 = _masked_mean(base, vmask)

    v24 = _masked_mean(img24, vmask)
    s24 = _masked_mean(img24, smask)
    e24 = (v24 - v0) / scale
    ratio = v24 / s24 if s24 > 0 else float("inf")

    series_e: dict[float, float] = {}
    aq_e: dict[float, float] = {}
    if series:
        amask = None if aqueduct_mask is None else np.asarray(aqueduct_mask, dtype=bool)
        a0 = _masked_mean(base, amask) if amask is not None and amask.any() else None
        for t, img in sorted(series.items()):
            img = np.asarray(img, dtype=np.float64)
            series_e[t] = (_masked_mean(img, vmask) - v0) / scale
            if a0 is not None:
                aq_e[t] = (_masked_mean(img, amask) - a0) / scale

    if e24 >= theta_e:
        grade = 4 if ratio >= tau else 3
    elif any(e >= theta_e for e in series_e.values()):
        grade = 2
    elif any(e >= theta_e for e in aq_e.values()):
        grade = 1
    else:
        grade = 0
    return RefluxGrade(grade, e24, ratio, v24, s24, series_e, aq_e)


@dataclass
class TransitionMatrix:
    """Row = grade on real images, column = grade on predicted images."""

    matrix: np.ndarray
    counts: np.ndarray  # (5, 5) raw pair counts

    @property
    def row_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def diagonal_mass(self) -> float:
        """Fraction of all pairs whose predicted grade equals the real grade."""
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else float("nan")

    def rows(self) -> list[list]:
        header = ["real_grade", "count"] + [f"pred_{g}" for g in range(N_GRADES)]
        out = [header]
        for g in range(N_GRADES):
            out.append([g, int(self.row_counts[g])] + [float(v) for v in self.matrix[g]])
        return out


def transition_matrix(grades_real: Sequence[int], grades_pred: Sequence[int]) -> TransitionMatrix:
    real = [int(g) for g in grades_real]
    pred = [int(g) for g in grades_pred]
    if len(real) != len(pred):
        raise ValueError(f"grade lists differ in length: {len(real)} vs {len(pred)}")
    counts = np.zeros((N_GRADES, N_GRADES), dtype=np.int64)
    for r, p in zip(real, pred):
        if not (0 <= r < N_GRADES and 0 <= p < N_GRADES):
            raise ValueError(f"grades must lie in 0..4, got ({r}, {p})")
        counts[r, p] += 1
    rows = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    return TransitionMatrix(matrix, counts)


def report_table(reports: Sequence[MetricReport]) -> tuple[str, list[list]]:
    """Metrics as rows and configurations as columns.

    Returns a fixed-width text rendering and the same table as CSV rows.
    """
    header = ["metric"] + [r.label for r in reports]
    rows = [header]
    if not reports:
        return "metric", rows
    for title, attr in METRIC_ROWS:
        rows.append([title] + [getattr(r, attr) if getattr(r, attr) is not None else "" for r in reports])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.2e}"
        return str(v)

    widths = [max(len(fmt(row[i])) for row in rows) for i in range(len(header))]
    lines = ["  ".join(fmt(v).ljust(w) for v, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines), rows
