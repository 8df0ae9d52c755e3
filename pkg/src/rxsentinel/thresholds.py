"""Otsu threshold calibration, confusion-matrix metrics, PR curves, temporal CV.

Classification tie rule, shared by every classifier here: a score exactly at
the threshold is typical; only strictly greater scores are atypical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ClassificationError, ConfigError, DegenerateDistributionError
from .orders import Department, Hospitalization, hospitalization_year

VALIDATION_YEARS = (2015, 2016, 2017)
DEFAULT_TRIM_QUANTILE = 0.90
DEFAULT_BINS = 256
MIN_CALIBRATION_SAMPLES = 20


# ---------------------------------------------------------------------------
# Otsu thresholding


def otsu_threshold(values, bins: int = DEFAULT_BINS) -> float:
    """Bin-edge threshold maximizing between-class variance; ties take the lowest edge.

    Values are histogrammed into `bins` equal-width bins over [min, max]; a
    candidate edge e splits values into {v < e} and {v >= e}. Class statistics
    use the raw values (per-bin sums), so the result agrees exactly with a
    brute-force split at every edge.
    """
    v = np.asarray(list(values), dtype=np.float64)
    if v.size < 2:
        raise DegenerateDistributionError("need at least two values to threshold")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        raise DegenerateDistributionError("all values identical; nothing to separate")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=v, minlength=bins)
    cum_n = np.cumsum(counts)
    cum_s = np.cumsum(sums)
    n = v.size
    total = cum_s[-1]
    best_edge = None
    best_var = -np.inf
    for j in range(bins - 1):  # candidate edge edges[j + 1]
        n0 = cum_n[j]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = cum_s[j] / n0
        mu1 = (total - cum_s[j]) / n1
        var_b = n0 * n1 * (mu0 - mu1) ** 2
        if var_b > best_var:
            best_var = var_b
            best_edge = edges[j + 1]
    if best_edge is None:
        raise DegenerateDistributionError("no non-trivial split exists")
    return float(best_edge)


def nearest_rank_percentile(values, q: float) -> float:
    """Nearest-rank percentile: the ceil(q * n)-th smallest value."""
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    if v.size == 0:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(q * v.size))
    return float(v[rank - 1])


@dataclass
class ThresholdSet:
    thresholds: dict[str, float]
    trim_quantile: float = DEFAULT_TRIM_QUANTILE
    bins: int = DEFAULT_BINS
    sample_counts: dict[str, int] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)  # departments with too few samples
    global_threshold: Optional[float] = None  # pooled fallback
    artifact_digest: Optional[str] = None  # artifact the calibration scores came from


def calibrate_thresholds(scores: Iterable[tuple[str, float]],
                         bins: int = DEFAULT_BINS,
                         trim_quantile: float = DEFAULT_TRIM_QUANTILE,
                         min_samples: int = MIN_CALIBRATION_SAMPLES) -> ThresholdSet:
    """Per-department Otsu thresholds on outlier-trimmed score samples.

    Scores strictly above a department's trim-quantile value (nearest rank)
    are dropped before thresholding, so extreme tails cannot drag the
    threshold upward. Departments under `min_samples` are skipped with a
    warning record; a pooled global threshold is kept as their fallback.
    """
    per_dept: dict[str, list[float]] = {}
    pooled: list[float] = []
    for dept, score in scores:
        key = dept.value if isinstance(dept, Department) else str(dept)
        per_dept.setdefault(key, []).append(float(score))
        pooled.append(float(score))
    ts = ThresholdSet(thresholds={}, trim_quantile=trim_quantile, bins=bins)
    for dept in sorted(per_dept):
        vals = per_dept[dept]
        ts.sample_counts[dept] = len(vals)
        if len(vals) < min_samples:
            ts.skipped.append(dept)
            continue
        cut = nearest_rank_percentile(vals, trim_quantile)
        trimmed = [x for x in vals if x <= cut]
        try:
            ts.thresholds[dept] = otsu_threshold(trimmed, bins=bins)
        except DegenerateDistributionError:
            ts.skipped.append(dept)
    if len(pooled) >= min_samples:
        cut = nearest_rank_percentile(pooled, trim_quantile)
        trimmed = [x for x in pooled if x <= cut]
        try:
            ts.global_threshold = otsu_threshold(trimmed, bins=bins)
        except DegenerateDistributionError:
            ts.global_threshold = None
    return ts


def classify_profile(score: float, dept, thresholds: ThresholdSet) -> str:
    key = dept.value if isinstance(dept, Department) else str(dept)
    if key not in thresholds.thresholds:
        raise ClassificationError(f"no calibrated threshold for department {key!r}")
    return "atypical" if score > thresholds.thresholds[key] else "typical"


# ---------------------------------------------------------------------------
# confusion-matrix metrics


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def add(self, predicted_atypical: bool, truly_atypical: bool, n: int = 1):
        if predicted_atypical and truly_atypical:
            self.tp += n
        elif predicted_atypical:
            self.fp += n
        elif truly_atypical:
            self.fn += n
        else:
            self.tn += n

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def metrics(cm: ConfusionMatrix) -> dict:
    """precision/recall/specificity/NPV/F1; None marks an undefined metric."""
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    specificity = _ratio(cm.tn, cm.tn + cm.fp)
    npv = _ratio(cm.tn, cm.tn + cm.fn)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall,
            "specificity": specificity, "npv": npv, "f1": f1}


# ---------------------------------------------------------------------------
# precision-recall curves


@dataclass
class PrCurve:
    points: list[tuple[float, float]]  # (recall, precision) along descending thresholds
    aupr: float


def pr_curve(scored: Sequence[tuple[float, bool]]) -> PrCurve:
    """Sweep distinct scores descending; AUPR is the average-precision sum.

    Tied scores collapse into a single sweep step. Raises when no positive
    example exists (recall would be undefined everywhere).
    """
    if not scored:
        raise ConfigError("empty score list")
    scores = np.asarray([s for s, _ in scored], dtype=np.float64)
    truth = np.asarray([bool(t) for _, t in scored], dtype=bool)
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise ConfigError("PR curve needs at least one positive example")
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    truth = truth[order]
    # group indices where the score changes
    boundary = np.flatnonzero(np.diff(scores) != 0.0)
    ends = np.concatenate([boundary, [scores.size - 1]])
    cum_tp = np.cumsum(truth)
    points: list[tuple[float, float]] = []
    aupr = 0.0
    prev_recall = 0.0
    for e in ends:
        pp = e + 1
        tp = int(cum_tp[e])
        precision = tp / pp
        recall = tp / n_pos
        points.append((recall, precision))
        aupr += precision * (recall - prev_recall)
        prev_recall = recall
    return PrCurve(points=points, aupr=float(aupr))


def pr_curve_csv_lines(curve: PrCurve) -> list[str]:
    lines = ["recall,precision"]
    for r, p in curve.points:
        lines.append(f"{r:.10g},{p:.10g}")
    return lines


# ---------------------------------------------------------------------------
# temporal cross-validation (hospitalization-year membership, no leakage)


@dataclass
class CvSplit:
    validation_year: int
    training_years: tuple[int, ...]
    train_ids: frozenset[str]
    validation_ids: frozenset[str]


def cv_splits(hosps: list[Hospitalization], train_window_years: int) -> list[CvSplit]:
    """Three temporal folds (validation 2015/2016/2017, preceding-year training).

    A hospitalization belongs wholly to the year it began, so its profiles can
    never straddle the boundary.
    """
    if not (1 <= train_window_years <= 4):
        raise ConfigError(f"train window must be 1..4 years, got {train_window_years}")
    by_year: dict[int, list[str]] = {}
    for h in hosps:
        by_year.setdefault(hospitalization_year(h), []).append(h.id)
    required = set()
    for vy in VALIDATION_YEARS:
        required.add(vy)
        required.update(range(vy - train_window_years, vy))
    missing = sorted(y for y in required if y not in by_year)
    if missing:
        raise ConfigError(f"corpus lacks hospitalizations for years: {missing}")
    splits = []
    for vy in VALIDATION_YEARS:
        train_years = tuple(range(vy - train_window_years, vy))
        train_ids = frozenset(hid for y in train_years for hid in by_year[y])
        val_ids = frozenset(by_year[vy])
        splits.append(CvSplit(validation_year=vy, training_years=train_years,
                              train_ids=train_ids, validation_ids=val_ids))
    return splits


# ---------------------------------------------------------------------------
# department flagged-ratio validity check


@dataclass
class DepartmentRatios:
    per_department: dict[str, float]
    overall: float
    counts: dict[str, int]


def department_ratios(classifications: Iterable[tuple[str, str]]) -> DepartmentRatios:
    """Fraction classified atypical per department, plus the overall fraction."""
    flagged: dict[str, int] = {}
    totals: dict[str, int] = {}
    all_flagged = 0
    all_total = 0
    for dept, label in classifications:
        key = dept.value if isinstance(dept, Department) else str(dept)
        totals[key] = totals.get(key, 0) + 1
        hit = label == "atypical"
        flagged[key] = flagged.get(key, 0) + (1 if hit else 0)
        all_total += 1
        all_flagged += 1 if hit else 0
    per = {d: flagged[d] / totals[d] for d in totals}
    overall = all_flagged / all_total if all_total else 0.0
    return DepartmentRatios(per_department=per, overall=overall, counts=totals)


def validity_ordering(ratios: DepartmentRatios) -> bool:
    """Protocolized departments must flag less than long-tail departments."""
    per = ratios.per_department
    needed = (Department.NICU.value, Department.ONCOLOGY.value,
              Department.OBGYN.value, Department.GENERAL_PED.value)
    if any(d not in per for d in needed):
        raise ConfigError("validity ordering needs nicu, obgyn, oncology, general_ped")
    return (per[Department.NICU.value] < per[Department.ONCOLOGY.value]
            and per[Department.OBGYN.value] < per[Department.GENERAL_PED.value])
