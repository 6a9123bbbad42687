from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import integrate, special

from service.errors import DegenerateTestError, InsufficientDataError, UndefinedCorrelationError, ValidationError
from service.study_io import table_row_cells
from tools.stats import (
    TABLE_ORDER,
    PairedSeries,
    bland_altman,
    concordance_row,
    concordance_table,
    cross_training_from_metrics,
    cross_training_table,
    ejection_fraction_errors,
    error_summary,
    mean_difference_ci,
    mean_sd,
    paired_t_test,
    pearson_r,
    read_paired_series_csv,
    series_from_metrics,
    student_t_cdf,
    timing_comparison,
)


def _series(manual, auto, name: str = "LVEF") -> PairedSeries:
    return PairedSeries(name, list(zip(map(float, manual), map(float, auto))))


def _with_differences(mean: float, sd: float, n: int, seed: int = 0) -> PairedSeries:
    """Series whose auto - manual differences have exactly the given sample mean and sd."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=n)
    z = (z - z.mean()) / z.std(ddof=1)
    manual = rng.uniform(40.0, 70.0, size=n)
    return _series(manual, manual + mean + sd * z)


def _t_pdf(x: float, df: float) -> float:
    return math.exp(special.gammaln((df + 1) / 2) - special.gammaln(df / 2)) / math.sqrt(df * math.pi) * (1 + x * x / df) ** (-(df + 1) / 2)


# --- mean_sd ---

def test_mean_sd_examples() -> None:
    assert mean_sd([3, 3, 3]) == (3.0, 0.0)
    assert mean_sd([1, 3]) == pytest.approx((2.0, 1.4142), abs=1e-4)
    assert mean_sd([2, 4, 4, 4, 5, 5, 7, 9]) == pytest.approx((5.0, 2.1381), abs=1e-4)
    with pytest.raises(InsufficientDataError):
        mean_sd([1.0])


# --- pearson_r ---

def test_pearson_examples() -> None:
    x = [1.0, 2.0, 3.0, 4.0]
    assert pearson_r(_series(x, [2 * v for v in x])) == pytest.approx(1.0)
    assert pearson_r(_series(x, [-2 * v + 7 for v in x])) == pytest.approx(-1.0)
    assert pearson_r(_series(x, [1, 3, 2, 4])) == pytest.approx(0.8)
    with pytest.raises(UndefinedCorrelationError):
        pearson_r(_series(x, [5, 5, 5, 5]))


def test_pearson_affine_invariance() -> None:
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(3, 12))
        x, y = rng.normal(size=n), rng.normal(size=n)
        a, b = rng.uniform(0.1, 10.0), rng.uniform(-50.0, 50.0)
        r = pearson_r(_series(x, y))
        assert pearson_r(_series(a * x + b, y)) == pytest.approx(r, abs=1e-9)
        assert pearson_r(_series(-x, y)) == pytest.approx(-r, abs=1e-9)
        assert -1.0 <= r <= 1.0


# --- bland_altman ---

def test_bland_altman_examples() -> None:
    assert bland_altman(_series([1, 2, 3], [1, 2, 3])) == (0.0, 0.0, 0.0)
    bias, low, high = bland_altman(_series([0, 0], [1, 3]))
    assert bias == pytest.approx(2.0)
    assert (low, high) == pytest.approx((-0.77, 4.77), abs=0.005)


@pytest.mark.parametrize(
    "mean, sd, expected",
    [(-0.60, 4.77, (-9.94, 8.75)), (-0.89, 4.55, (-9.82, 8.04))],
)
def test_limits_of_agreement_match_published_tables(mean: float, sd: float, expected) -> None:
    bias, low, high = bland_altman(_with_differences(mean, sd, 100))
    assert bias == pytest.approx(mean, abs=1e-9)
    assert low == pytest.approx(expected[0], abs=0.02)
    assert high == pytest.approx(expected[1], abs=0.02)


def test_bland_altman_swap_and_width() -> None:
    rng = np.random.default_rng(12)
    for _ in range(1000):
        n = int(rng.integers(2, 15))
        manual, auto = rng.normal(50, 10, size=n), rng.normal(50, 10, size=n)
        bias, low, high = bland_altman(_series(manual, auto))
        s_bias, s_low, s_high = bland_altman(_series(auto, manual))
        assert s_bias == pytest.approx(-bias, abs=1e-9)
        assert (s_low, s_high) == pytest.approx((-high, -low), abs=1e-9)
        assert high - low == pytest.approx(2 * 1.96 * np.std(auto - manual, ddof=1), abs=1e-9)
        assert low <= bias <= high


# --- t-test ---

def test_paired_t_examples() -> None:
    zero = paired_t_test(_series([0, 0, 0, 0], [1, -1, 1, -1]))
    assert zero.t == 0.0 and zero.p == pytest.approx(1.0)

    result = paired_t_test(_series([0, 0, 0, 0], [2, 0, 2, 0]))
    assert result.t == pytest.approx(1.7321, abs=1e-4)
    assert result.df == 3
    assert result.p == pytest.approx(0.1817, abs=1e-4)

    with pytest.raises(DegenerateTestError):
        paired_t_test(_series([0, 0, 0], [1, 1, 1]))


def test_paired_t_matches_raw_sums_and_is_scale_invariant() -> None:
    rng = np.random.default_rng(13)
    for _ in range(1000):
        n = int(rng.integers(2, 11))
        d = rng.normal(0.5, 2.0, size=n)
        result = paired_t_test(_series(np.zeros(n), d))
        s1, s2 = d.sum(), (d * d).sum()
        sd = math.sqrt((s2 - s1 * s1 / n) / (n - 1))
        assert result.t == pytest.approx((s1 / n) * math.sqrt(n) / sd, rel=1e-10)
        scaled = paired_t_test(_series(np.zeros(n), 3.7 * d))
        assert scaled.p == pytest.approx(result.p, abs=1e-12)
        assert 0.0 <= result.p <= 1.0


def test_t_cdf_matches_numeric_integration() -> None:
    rng = np.random.default_rng(14)
    for _ in range(1000):
        t = rng.uniform(-10.0, 10.0)
        df = int(rng.integers(1, 201))
        oracle = 0.5 + integrate.quad(_t_pdf, 0.0, t, args=(df,), epsabs=1e-13, epsrel=1e-13)[0]
        assert abs(student_t_cdf(t, df) - oracle) <= 1e-8


# --- confidence interval ---

def test_mean_difference_ci() -> None:
    assert mean_difference_ci([1, 2, 3], [1, 2, 3]) == (0.0, 0.0, 0.0)
    with pytest.raises(ValidationError):
        mean_difference_ci([1, 2, 3], [1, 2])


def test_timing_ci_matches_published_interval() -> None:
    series = _with_differences(447.7, 191.9, 89, seed=4)
    mean, low, high = mean_difference_ci(series.auto, series.manual)
    assert mean == pytest.approx(447.7)
    assert (low, high) == pytest.approx((407.8, 487.6), abs=0.05)
    assert (low, high) == pytest.approx((407.6, 487.8), abs=1.0)


def test_wider_level_widens_interval() -> None:
    rng = np.random.default_rng(15)
    a, b = rng.normal(size=20), rng.normal(size=20)
    _, low95, high95 = mean_difference_ci(a, b, 0.95)
    _, low99, high99 = mean_difference_ci(a, b, 0.99)
    assert low99 < low95 and high99 > high95


def test_timing_comparison_reports_manual_minus_auto() -> None:
    summary = timing_comparison([4.0, 5.0, 6.0, 5.0], [420.0, 480.0, 450.0, 470.0])
    assert summary.mean_difference == pytest.approx(450.0 - 0.0)
    assert summary.ci_low < summary.mean_difference < summary.ci_high
    assert summary.p is not None and summary.p < 0.001
    assert summary.n == 4


# --- tables ---

def test_identical_series_leave_r_and_p_empty() -> None:
    row = concordance_row(_series([50, 50, 50], [50, 50, 50]))
    assert (row.bias, row.loa_low, row.loa_high) == (0.0, 0.0, 0.0)
    assert row.r is None and row.p is None
    cells = table_row_cells(row)
    assert cells["r"] == "" and cells["p"] == ""


def test_concordance_table_uses_fixed_order() -> None:
    rng = np.random.default_rng(16)
    series = [_series(rng.normal(size=5), rng.normal(size=5), name) for name in reversed(TABLE_ORDER)]
    table = concordance_table(series)
    assert [row.metric_name for row in table] == TABLE_ORDER


def test_row_renders_published_cell_format() -> None:
    row = concordance_row(_with_differences(-0.60, 4.77, 100))
    assert table_row_cells(row)["Bland-Altman"].startswith("-0.60 (-9.9")
    assert table_row_cells(row)["Bland-Altman"].endswith("to 8.75)")


def test_single_case_leaves_inferential_cells_empty() -> None:
    row = concordance_row(_series([50], [52]))
    assert row.manual_mean == 50.0 and row.manual_sd is None
    assert row.r is None and row.p is None and row.bias is None


def test_cross_training_table() -> None:
    manual = {"LVEF": [50, 55, 60, 65], "LV EDV": [100, 120, 140, 160]}
    auto_a = {"LVEF": [51, 54, 61, 66], "LV EDV": [101, 118, 142, 159]}
    auto_b = {"LVEF": [48, 57, 59, 68], "LV EDV": [104, 117, 139, 165]}
    rows = cross_training_table(manual, auto_a, auto_b)
    assert [r.metric_name for r in rows] == ["LV EDV", "LVEF"]
    assert all(-1.0 <= r.r_a <= 1.0 and -1.0 <= r.r_b <= 1.0 for r in rows)


def test_error_summary_against_interobserver_reference() -> None:
    assert error_summary(_with_differences(-0.60, 4.77, 50)).within_reference
    assert not error_summary(_with_differences(5.0, 8.0, 50)).within_reference


def test_paired_series_csv(tmp_path: Path) -> None:
    path = tmp_path / "pairs.csv"
    path.write_text("case_id,metric,manual,auto\na,LVEF,50,52\nb,LVEF,60,59\na,LV EDV,120,118\nb,LV EDV,140,145\n", encoding="utf-8")
    series = {s.metric_name: s for s in read_paired_series_csv(path)}
    assert series["LVEF"].pairs == [(50.0, 52.0), (60.0, 59.0)]
    assert series["LV EDV"].case_ids == ["a", "b"]


def test_series_from_metrics_joins_on_case_id() -> None:
    columns = ["lv_edv", "lv_esv", "rv_edv", "rv_esv", "lvef", "rvef", "lv_mass"]
    truth = pd.DataFrame([[100, 50, 110, 55, 50, 50, 90], [120, 60, 130, 70, 50, 46, 100]], columns=columns, index=["a", "b"])
    pred = pd.DataFrame([[102, 49, 111, 57, 52, 49, 92]], columns=columns, index=["a"])
    series = series_from_metrics(truth, pred)
    assert [s.metric_name for s in series] == TABLE_ORDER
    assert series[0].pairs == [(100.0, 102.0)]


def test_cross_training_from_metrics_uses_cases_common_to_all_runs() -> None:
    columns = ["lv_edv", "lv_esv", "rv_edv", "rv_esv", "lvef", "rvef", "lv_mass"]
    truth = pd.DataFrame(
        [[100, 50, 110, 55, 50, 50, 90], [120, 48, 130, 70, 60, 46, 100], [90, 54, 95, 50, 40, 47, 80]],
        columns=columns,
        index=["a", "b", "c"],
    )
    pred_a = pd.DataFrame(
        [[102, 49, 111, 57, 52, 49, 92], [118, 50, 128, 68, 58, 47, 99], [91, 53, 96, 52, 41, 45, 82]],
        columns=columns,
        index=["a", "b", "c"],
    )
    pred_b = pd.DataFrame([[104, 51, 113, 56, 51, 48, 95], [125, 46, 131, 71, 63, 44, 104]], columns=columns, index=["a", "b"])
    rows = {row.metric_name: row for row in cross_training_from_metrics(truth, pred_a, pred_b)}
    assert list(rows) == TABLE_ORDER
    lvef = rows["LVEF"]
    assert (lvef.manual_mean, lvef.auto_a_mean, lvef.auto_b_mean) == pytest.approx((55.0, 55.0, 57.0))
    assert lvef.r_a == pytest.approx(1.0)
    assert lvef.r_b == pytest.approx(1.0)


def test_ejection_fraction_errors_pick_the_lvef_series() -> None:
    series = [_series([100, 120, 90], [102, 118, 91], "LV EDV"), _with_differences(1.0, 3.0, 20)]
    (summary,) = ejection_fraction_errors(series)
    assert summary.metric_name == "LVEF"
    assert (summary.mean_error, summary.sd_error) == pytest.approx((1.0, 3.0))
    assert summary.within_reference
    assert ejection_fraction_errors(series[:1]) == []
    assert ejection_fraction_errors([_series([55], [57])]) == []
