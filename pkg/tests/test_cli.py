from __future__ import annotations

import json
import re
from pathlib import Path

import pandas as pd
import pytest

from main import run
from service.study_io import read_report_csv
from tools.stats import TABLE_ORDER


@pytest.fixture(scope="module")
def phantom_root(tmp_path_factory: pytest.TempPathFactory) -> Path:
    root = tmp_path_factory.mktemp("phantoms")
    assert run(["phantom", "--n", "3", "--seed", "11", "--out", str(root)]) == 0
    return root


def test_phantom_command_writes_cases_deterministically(phantom_root: Path, tmp_path: Path) -> None:
    cases = sorted(p.name for p in phantom_root.iterdir())
    assert cases == ["phantom001", "phantom002", "phantom003"]
    assert run(["phantom", "--n", "3", "--seed", "11", "--out", str(tmp_path)]) == 0
    for name in ("phantom001_4d.nii.gz", "phantom001_frame00_gt.nii.gz", "Info.cfg"):
        assert (tmp_path / "phantom001" / name).read_bytes() == (phantom_root / "phantom001" / name).read_bytes()


def test_quantify_masks_then_evaluate(phantom_root: Path, tmp_path: Path) -> None:
    metrics = tmp_path / "manual.csv"
    assert run(["quantify", "--cases", str(phantom_root), "--masks", "--out", str(metrics)]) == 0
    df = pd.read_csv(metrics)
    assert list(df["case_id"]) == ["phantom001", "phantom002", "phantom003"]
    assert (df["lvef"].between(25.0, 75.0)).all()

    table = tmp_path / "table.csv"
    assert run(["evaluate", "--pred", str(metrics), "--truth", str(metrics), "--out", str(table)]) == 0
    rows = read_report_csv(table)
    assert [r["metric_name"] for r in rows] == TABLE_ORDER
    assert all(r["bias"] == 0.0 for r in rows)


def test_json_metrics(phantom_root: Path, tmp_path: Path) -> None:
    out = tmp_path / "manual.json"
    assert run(["quantify", "--cases", str(phantom_root / "phantom002"), "--masks", "--format", "json", "--out", str(out)]) == 0
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert [c["case_id"] for c in payload["cases"]] == ["phantom002"]
    assert payload["units"]


def test_usage_errors_exit_2(tmp_path: Path) -> None:
    assert run([]) == 2
    assert run(["phantom"]) == 2
    assert run(["quantify", "--cases", str(tmp_path), "--out", str(tmp_path / "x.csv")]) == 2
    assert run(["phantom", "--out", str(tmp_path), "--frame-base", "3"]) == 2


def test_pipeline_errors_exit_1(tmp_path: Path) -> None:
    assert run(["quantify", "--cases", str(tmp_path / "missing"), "--masks", "--out", str(tmp_path / "m.csv")]) == 1
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run(["quantify", "--cases", str(empty), "--masks", "--out", str(tmp_path / "m.csv")]) == 1


def test_train_segment_bench_chain(phantom_root: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    model = tmp_path / "model.cdiq"
    argv = ["train", "--cases", str(phantom_root), "--out", str(model), "--epochs", "1", "--depth", "2", "--width", "2", "--train-roi"]
    assert run(argv) == 0
    assert model.read_bytes()[:4] == b"CDIQ"
    assert "final loss" in capsys.readouterr().out

    pred = tmp_path / "pred"
    assert run(["segment", "--model", str(model), "--cases", str(phantom_root), "--out", str(pred), "--locate", "learned"]) == 0
    written = sorted(pred.glob("*/*_pred.nii.gz"))
    assert {p.parent.name for p in written} == {"phantom001", "phantom002", "phantom003"}
    assert (pred / "phantom001" / "phantom001_frame00_pred.nii.gz") in written
    assert f"Wrote {len(written)} predicted frames for 3 cases" in capsys.readouterr().out

    times = tmp_path / "manual_times.csv"
    times.write_text("case_id,seconds\nphantom001,410\nphantom002,455.5\nphantom003,500\n", encoding="utf-8")
    bench = tmp_path / "bench.csv"
    argv = ["bench", "--model", str(model), "--cases", str(phantom_root), "--manual-times", str(times), "--repetitions", "1", "--out", str(bench)]
    assert run(argv) == 0
    out = capsys.readouterr().out
    assert re.search(r"Automatic: \d+\.\d{3} ± \d+\.\d{3} s per study over 3 studies", out)
    assert re.search(r"Manual: 455\.2 ± 45\.0 s; difference \d+\.\d s \(95% CI -?\d+\.\d - \d+\.\d\)", out)
    df = pd.read_csv(bench)
    assert list(df["case_id"]) == ["phantom001", "phantom002", "phantom003"]
    assert (df["seconds"] > 0).all()


def test_evaluate_reads_json_metrics_from_quantify(phantom_root: Path, tmp_path: Path) -> None:
    csv_metrics = tmp_path / "manual.csv"
    json_metrics = tmp_path / "manual.json"
    assert run(["quantify", "--cases", str(phantom_root), "--masks", "--out", str(csv_metrics)]) == 0
    assert run(["quantify", "--cases", str(phantom_root), "--masks", "--format", "json", "--out", str(json_metrics)]) == 0

    table = tmp_path / "table.csv"
    assert run(["evaluate", "--pred", str(json_metrics), "--truth", str(csv_metrics), "--out", str(table)]) == 0
    rows = read_report_csv(table)
    assert [r["metric_name"] for r in rows] == TABLE_ORDER
    assert all(r["bias"] == 0.0 for r in rows)


def test_evaluate_cross_training_and_error_summary(phantom_root: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    manual = tmp_path / "manual.csv"
    assert run(["quantify", "--cases", str(phantom_root), "--masks", "--out", str(manual)]) == 0
    shifted = pd.read_csv(manual)
    shifted["lvef"] += [1.0, 2.0, 4.0]
    auto_b = tmp_path / "auto_b.csv"
    shifted.to_csv(auto_b, index=False)

    table = tmp_path / "table.csv"
    argv = ["evaluate", "--truth", str(manual), "--pred", str(manual), "--pred-b", str(auto_b), "--out", str(table)]
    assert run(argv) == 0
    cross = pd.read_csv(tmp_path / "table_cross_training.csv", dtype=str, keep_default_na=False)
    assert list(cross.columns) == ["Metric", "Manual", "AI (A)", "r (A)", "AI (B)", "r (B)"]
    assert list(cross["Metric"]) == TABLE_ORDER
    lvef = cross.set_index("Metric").loc["LVEF"]
    assert lvef["r (A)"] == "1.00"
    assert lvef["Manual"] == lvef["AI (A)"] != lvef["AI (B)"]

    errors = pd.read_csv(tmp_path / "table_errors.csv", dtype=str)
    assert errors.iloc[0].to_dict() == {
        "Metric": "LVEF",
        "AI - Manual": "0.00 ± 0.00",
        "Interobserver": "2.70 ± 6.60",
        "Within interobserver": "yes",
    }
    assert "LVEF error 0.0 ± 0.0 (within interobserver 2.7 ± 6.6)" in capsys.readouterr().out


def test_evaluate_paired_series(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    series = tmp_path / "paired.csv"
    series.write_text(
        "case_id,metric,manual,auto\n"
        "a,LVEF,55,57\nb,LVEF,60,58\nc,LVEF,48,52\nd,LVEF,65,66\n"
        "a,LV Mass,110,112\nb,LV Mass,95,99\nc,LV Mass,130,127\nd,LV Mass,120,121\n",
        encoding="utf-8",
    )
    out = tmp_path / "table.json"
    assert run(["evaluate", "--series", str(series), "--format", "json", "--out", str(out)]) == 0
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert [row["metric_name"] for row in payload["concordance"]] == ["LVEF", "LV Mass"]
    (summary,) = payload["error_summary"]
    assert summary["metric_name"] == "LVEF"
    assert summary["mean_error"] == pytest.approx(1.25)
    assert summary["within_reference"] is True
    assert payload["cross_training"] == []
    assert "LVEF error 1.2 ± 2.5" in capsys.readouterr().out


def test_evaluate_rejects_mixed_or_incomplete_inputs(phantom_root: Path, tmp_path: Path) -> None:
    manual = tmp_path / "manual.csv"
    assert run(["quantify", "--cases", str(phantom_root), "--masks", "--out", str(manual)]) == 0
    out = str(tmp_path / "t.csv")
    assert run(["evaluate", "--pred", str(manual), "--out", out]) == 1
    assert run(["evaluate", "--series", str(manual), "--truth", str(manual), "--out", out]) == 1
    assert not Path(out).exists()
