# stats.py
"""
Manual-vs-automatic concordance statistics.

Conventions:
    - Sample (n-1) standard deviation everywhere.
    - Differences are auto - manual.
    - Limits of agreement use the fixed 1.96 multiplier, not a t quantile.
    - The timing-difference CI is z-based; the multiplier lives in Z_95.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import special
from scipy.stats import norm

from service.errors import (
    ConsistencyError,
    DegenerateTestError,
    InsufficientDataError,
    UndefinedCorrelationError,
    ValidationError,
)

logger = logging.getLogger(__name__)

LOA_MULTIPLIER = 1.96
Z_95 = 1.96

# Row order of the concordance tables, with the per-case metric column each row reads.
TABLE_METRICS: List[Tuple[str, str]] = [
    ("LV EDV", "lv_edv"),
    ("LV ESV", "lv_esv"),
    ("RV EDV", "rv_edv"),
    ("RV ESV", "rv_esv"),
    ("LVEF", "lvef"),
    ("RVEF", "rvef"),
    ("LV Mass", "lv_mass"),
]
TABLE_ORDER = [name for name, _ in TABLE_METRICS]

# Interobserver LVEF error reported in the literature (mean, sd; EF points).
INTEROBSERVER_LVEF = (2.7, 6.6)


# --- 1. Data containers ---

@dataclass
class PairedSeries:
    metric_name: str
    pairs: List[Tuple[float, float]]  # (manual, auto) per case
    case_ids: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.pairs = [(float(m), float(a)) for m, a in self.pairs]
        if not all(math.isfinite(m) and math.isfinite(a) for m, a in self.pairs):
            raise ValidationError(f"{self.metric_name}: paired values must be finite")

    @property
    def manual(self) -> np.ndarray:
        return np.array([m for m, _ in self.pairs], dtype=np.float64)

    @property
    def auto(self) -> np.ndarray:
        return np.array([a for _, a in self.pairs], dtype=np.float64)

    @property
    def differences(self) -> np.ndarray:
        return self.auto - self.manual

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class ConcordanceRow:
    """One Table-1 row; cells that could not be computed are None."""

    metric_name: str
    manual_mean: Optional[float]
    manual_sd: Optional[float]
    auto_mean: Optional[float]
    auto_sd: Optional[float]
    p: Optional[float]
    r: Optional[float]
    bias: Optional[float]
    loa_low: Optional[float]
    loa_high: Optional[float]
    n: int = 0

    def to_record(self) -> Dict[str, object]:
        return asdict(self)


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float


@dataclass(frozen=True)
class CrossTrainingRow:
    metric_name: str
    manual_mean: Optional[float]
    manual_sd: Optional[float]
    auto_a_mean: Optional[float]
    auto_a_sd: Optional[float]
    r_a: Optional[float]
    auto_b_mean: Optional[float]
    auto_b_sd: Optional[float]
    r_b: Optional[float]


@dataclass(frozen=True)
class ErrorSummary:
    metric_name: str
    mean_error: float
    sd_error: float
    reference: Tuple[float, float]
    within_reference: bool


@dataclass(frozen=True)
class TimingSummary:
    auto_mean: float
    auto_sd: Optional[float]
    manual_mean: float
    manual_sd: Optional[float]
    mean_difference: float
    ci_low: float
    ci_high: float
    p: Optional[float]
    n: int


# --- 2. Basic statistics ---

def mean_sd(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise InsufficientDataError(f"standard deviation needs n >= 2, got {arr.size}")
    return float(arr.mean()), float(arr.std(ddof=1))


def pearson_r(series: PairedSeries) -> float:
    if len(series) < 2:
        raise InsufficientDataError(f"{series.metric_name}: correlation needs n >= 2")
    x = series.manual - series.manual.mean()
    y = series.auto - series.auto.mean()
    sxx = float(np.dot(x, x))
    syy = float(np.dot(y, y))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError(f"{series.metric_name}: correlation undefined for a constant side")
    r = float(np.dot(x, y)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def bland_altman(series: PairedSeries) -> Tuple[float, float, float]:
    """Bias and 95% limits of agreement of auto - manual."""
    if len(series) < 2:
        raise InsufficientDataError(f"{series.metric_name}: Bland-Altman needs n >= 2")
    bias, sd = mean_sd(series.differences)
    return bias, bias - LOA_MULTIPLIER * sd, bias + LOA_MULTIPLIER * sd


def student_t_cdf(t: float, df: float) -> float:
    """
    Student-t CDF through the regularized incomplete beta function:
    for t >= 0, F(t) = 1 - I_x(df/2, 1/2) / 2 with x = df / (df + t^2).
    ``scipy.special.betainc`` evaluates I_x with a continued fraction whose
    absolute error is well under 1e-10 in double precision.
    """
    if df <= 0:
        raise ValidationError(f"degrees of freedom must be positive, got {df}")
    x = df / (df + t * t)
    tail = 0.5 * float(special.betainc(0.5 * df, 0.5, x))
    return 1.0 - tail if t >= 0 else tail


def t_two_sided_p(t: float, df: float) -> float:
    x = df / (df + t * t)
    return min(1.0, float(special.betainc(0.5 * df, 0.5, x)))


def paired_t_test(series: PairedSeries) -> TTestResult:
    n = len(series)
    if n < 2:
        raise InsufficientDataError(f"{series.metric_name}: paired t-test needs n >= 2")
    mean, sd = mean_sd(series.differences)
    if sd == 0.0:
        raise DegenerateTestError(f"{series.metric_name}: differences have zero variance")
    t = mean * math.sqrt(n) / sd
    return TTestResult(t=t, df=n - 1, p=t_two_sided_p(t, n - 1))


def z_multiplier(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    if level == 0.95:
        return Z_95
    return float(norm.ppf(0.5 + level / 2.0))


def mean_difference_ci(a: Sequence[float], b: Sequence[float], level: float = 0.95) -> Tuple[float, float, float]:
    """Mean of a - b with a z-based confidence interval."""
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    if a_arr.shape != b_arr.shape:
        raise ValidationError(f"paired lists differ in length: {a_arr.size} vs {b_arr.size}")
    mean, sd = mean_sd(a_arr - b_arr)
    half = z_multiplier(level) * sd / math.sqrt(a_arr.size)
    return mean, mean - half, mean + half


# --- 3. Tables ---

def _guard(fn: Callable, series: PairedSeries, cell: str):
    try:
        return fn(series)
    except InsufficientDataError as e:
        logger.warning("%s: %s left empty (%s)", series.metric_name, cell, e)
        return None


def _mean_sd_or_none(values: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
    if values.size == 0:
        return None, None
    if values.size == 1:
        return float(values[0]), None
    return mean_sd(values)


def concordance_row(series: PairedSeries) -> ConcordanceRow:
    manual_mean, manual_sd = _mean_sd_or_none(series.manual)
    auto_mean, auto_sd = _mean_sd_or_none(series.auto)
    test = _guard(paired_t_test, series, "p")
    r = _guard(pearson_r, series, "r")
    ba = _guard(bland_altman, series, "Bland-Altman")
    bias, low, high = ba if ba is not None else (None, None, None)
    return ConcordanceRow(
        metric_name=series.metric_name,
        manual_mean=manual_mean,
        manual_sd=manual_sd,
        auto_mean=auto_mean,
        auto_sd=auto_sd,
        p=test.p if test is not None else None,
        r=r,
        bias=bias,
        loa_low=low,
        loa_high=high,
        n=len(series),
    )


def _table_sort_key(indexed: Tuple[int, PairedSeries]) -> Tuple[int, int]:
    position, series = indexed
    if series.metric_name in TABLE_ORDER:
        return 0, TABLE_ORDER.index(series.metric_name)
    return 1, position


def concordance_table(metric_series: Sequence[PairedSeries]) -> List[ConcordanceRow]:
    """One row per metric, Table-1 order first; unknown metrics follow in input order."""
    ordered = sorted(enumerate(metric_series), key=_table_sort_key)
    return [concordance_row(series) for _, series in ordered]


def cross_training_table(
    manual: Dict[str, Sequence[float]],
    auto_a: Dict[str, Sequence[float]],
    auto_b: Dict[str, Sequence[float]],
) -> List[CrossTrainingRow]:
    """
    Same manual reference against two automatic runs (e.g. models trained on
    different corpora): Manual, AI(A), r(A), AI(B), r(B) per metric.
    """
    rows: List[CrossTrainingRow] = []
    for name in [n for n in TABLE_ORDER if n in manual] + [n for n in manual if n not in TABLE_ORDER]:
        m = np.asarray(manual[name], dtype=np.float64)
        a = np.asarray(auto_a.get(name, []), dtype=np.float64)
        b = np.asarray(auto_b.get(name, []), dtype=np.float64)
        if a.size != m.size or b.size != m.size:
            raise ConsistencyError(f"{name}: manual and automatic series differ in length")
        m_mean, m_sd = _mean_sd_or_none(m)
        a_mean, a_sd = _mean_sd_or_none(a)
        b_mean, b_sd = _mean_sd_or_none(b)
        r_a = _guard(pearson_r, PairedSeries(name, list(zip(m, a))), "r(A)")
        r_b = _guard(pearson_r, PairedSeries(name, list(zip(m, b))), "r(B)")
        rows.append(CrossTrainingRow(name, m_mean, m_sd, a_mean, a_sd, r_a, b_mean, b_sd, r_b))
    return rows


def error_summary(series: PairedSeries, reference: Tuple[float, float] = INTEROBSERVER_LVEF) -> ErrorSummary:
    """Mean ± sd of auto - manual, flagged against an interobserver reference error."""
    mean, sd = mean_sd(series.differences)
    within = abs(mean) <= reference[0] and sd <= reference[1]
    return ErrorSummary(series.metric_name, mean, sd, reference, within)


def timing_comparison(auto_seconds: Sequence[float], manual_seconds: Sequence[float], level: float = 0.95) -> TimingSummary:
    """Manual vs automatic processing time: summaries, difference CI (manual - auto) and paired p-value."""
    auto = np.asarray(auto_seconds, dtype=np.float64)
    manual = np.asarray(manual_seconds, dtype=np.float64)
    diff, low, high = mean_difference_ci(manual, auto, level)
    auto_mean, auto_sd = _mean_sd_or_none(auto)
    manual_mean, manual_sd = _mean_sd_or_none(manual)
    test = _guard(paired_t_test, PairedSeries("time", list(zip(manual, auto))), "p")
    return TimingSummary(
        auto_mean=auto_mean,
        auto_sd=auto_sd,
        manual_mean=manual_mean,
        manual_sd=manual_sd,
        mean_difference=diff,
        ci_low=low,
        ci_high=high,
        p=test.p if test is not None else None,
        n=int(auto.size),
    )


# --- 4. Loaders ---

def read_paired_series_csv(path: Union[str, Path]) -> List[PairedSeries]:
    """Long-format CSV with columns case_id, metric, manual, auto."""
    df = pd.read_csv(path, dtype={"case_id": str, "metric": str})
    missing = [c for c in ("case_id", "metric", "manual", "auto") if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    series: List[PairedSeries] = []
    for metric, group in df.groupby("metric", sort=False):
        series.append(
            PairedSeries(
                metric_name=str(metric),
                pairs=list(zip(group["manual"].astype(float), group["auto"].astype(float))),
                case_ids=list(group["case_id"]),
            )
        )
    return series


def series_from_metrics(truth: pd.DataFrame, pred: pd.DataFrame) -> List[PairedSeries]:
    """
    Join manual (ground-truth) and automatic per-case metrics on case id and
    build one paired series per Table-1 metric. Cases missing a value on
    either side are dropped from that metric only.
    """
    joined = truth.join(pred, how="inner", lsuffix="_manual", rsuffix="_auto")
    if joined.empty:
        raise ConsistencyError("no case ids in common between manual and automatic metrics")
    out: List[PairedSeries] = []
    for name, column in TABLE_METRICS:
        pair = joined[[f"{column}_manual", f"{column}_auto"]].apply(pd.to_numeric, errors="coerce").dropna()
        out.append(
            PairedSeries(
                metric_name=name,
                pairs=list(zip(pair.iloc[:, 0], pair.iloc[:, 1])),
                case_ids=[str(c) for c in pair.index],
            )
        )
    logger.info("Joined %d cases for concordance analysis", len(joined))
    return out


def cross_training_from_metrics(truth: pd.DataFrame, pred_a: pd.DataFrame, pred_b: pd.DataFrame) -> List[CrossTrainingRow]:
    """
    Cross-training table from three per-case metrics tables indexed by case id.
    Each metric uses the cases that carry a value in all three tables.
    """
    series_a = {s.metric_name: s for s in series_from_metrics(truth, pred_a)}
    series_b = {s.metric_name: s for s in series_from_metrics(truth, pred_b)}
    manual: Dict[str, List[float]] = {}
    auto_a: Dict[str, List[float]] = {}
    auto_b: Dict[str, List[float]] = {}
    for name in TABLE_ORDER:
        a = dict(zip(series_a[name].case_ids, series_a[name].pairs))
        b = dict(zip(series_b[name].case_ids, series_b[name].pairs))
        common = [case_id for case_id in a if case_id in b]
        manual[name] = [a[c][0] for c in common]
        auto_a[name] = [a[c][1] for c in common]
        auto_b[name] = [b[c][1] for c in common]
    return cross_training_table(manual, auto_a, auto_b)


def ejection_fraction_errors(metric_series: Sequence[PairedSeries]) -> List[ErrorSummary]:
    """LVEF error against the interobserver reference; empty when the series is missing or too short."""
    for series in metric_series:
        if series.metric_name != "LVEF":
            continue
        try:
            return [error_summary(series)]
        except InsufficientDataError as e:
            logger.warning("LVEF error summary skipped (%s)", e)
    return []
