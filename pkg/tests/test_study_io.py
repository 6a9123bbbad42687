from __future__ import annotations

import gzip
import json
from pathlib import Path

import numpy as np
import pytest

from service.errors import (
    CaseNotFoundError,
    ConsistencyError,
    InfoCfgParseError,
    NiftiFormatError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
)
from service.quant import ClinicalMetrics
from service.study_io import (
    CineStudy,
    LabelMap,
    VoxelSpacing,
    encode_nifti1,
    format_bland_altman,
    format_mean_sd,
    format_p,
    load_acdc_case,
    parse_nifti1,
    read_info_cfg,
    read_manual_times_csv,
    read_metrics,
    read_metrics_csv,
    read_report_csv,
    write_case,
    write_metrics,
    write_report,
)
from tools.stats import INTEROBSERVER_LVEF, ConcordanceRow, CrossTrainingRow, ErrorSummary

SPACING = VoxelSpacing(1.25, 1.25, 10.0, 30.0)


def _values(datatype: int) -> np.ndarray:
    rng = np.random.default_rng(3)
    if datatype == 2:
        return rng.integers(0, 256, size=(2, 3, 4, 5)).astype(np.uint8)
    if datatype == 4:
        return rng.integers(-32768, 32768, size=(2, 3, 4, 5)).astype(np.int16)
    return rng.normal(0.0, 100.0, size=(2, 3, 4, 5)).astype(np.float32)


@pytest.mark.parametrize("datatype", [2, 4, 16])
@pytest.mark.parametrize("byte_order", ["<", ">"])
@pytest.mark.parametrize("compress", [False, True])
def test_nifti_roundtrip_is_bit_exact(datatype: int, byte_order: str, compress: bool) -> None:
    values = _values(datatype)
    volume = parse_nifti1(encode_nifti1(values, SPACING, datatype=datatype, byte_order=byte_order, compress=compress))
    assert volume.byte_order == byte_order
    assert volume.raw.dtype == values.dtype
    assert volume.raw.tobytes() == values.tobytes()
    assert volume.spacing == SPACING


def test_big_endian_header_is_detected_from_sizeof_hdr() -> None:
    data = encode_nifti1(np.zeros((1, 2, 2), dtype=np.float32), SPACING, byte_order=">")
    assert int(np.frombuffer(data[:4], dtype="<i4")[0]) == 1543503872
    assert parse_nifti1(data).byte_order == ">"


def test_scaling_is_applied_to_values() -> None:
    data = encode_nifti1(np.full((1, 1, 1), 100, dtype=np.int16), SPACING, datatype=4, scl_slope=0.5, scl_inter=1.0)
    assert parse_nifti1(data).values[0, 0, 0] == 51.0


def test_zero_slope_means_unscaled() -> None:
    data = encode_nifti1(np.full((1, 1, 1), 7, dtype=np.int16), SPACING, datatype=4, scl_slope=0.0)
    assert parse_nifti1(data).values[0, 0, 0] == 7.0


def test_bad_magic_is_rejected() -> None:
    data = bytearray(encode_nifti1(np.zeros((1, 2, 2), dtype=np.float32), SPACING))
    data[344:348] = b"abcd"
    with pytest.raises(NiftiFormatError):
        parse_nifti1(bytes(data))


def test_header_data_pair_is_rejected() -> None:
    data = bytearray(encode_nifti1(np.zeros((1, 2, 2), dtype=np.float32), SPACING))
    data[344:348] = b"ni1\x00"
    with pytest.raises(NiftiFormatError, match="pair"):
        parse_nifti1(bytes(data))


def test_unsupported_datatype_is_rejected() -> None:
    data = bytearray(encode_nifti1(np.zeros((1, 2, 2), dtype=np.float32), SPACING))
    data[70:72] = np.array([64], dtype="<i2").tobytes()
    with pytest.raises(UnsupportedDatatypeError) as err:
        parse_nifti1(bytes(data))
    assert err.value.code == 64


def test_truncated_payload_is_rejected() -> None:
    data = encode_nifti1(np.zeros((2, 4, 4), dtype=np.float32), SPACING)
    with pytest.raises(TruncatedPayloadError) as err:
        parse_nifti1(data[:-10])
    assert err.value.expected == len(data)


def test_truncated_gzip_stream_is_rejected() -> None:
    data = encode_nifti1(np.ones((2, 8, 8), dtype=np.float32), SPACING, compress=True)
    with pytest.raises(TruncatedPayloadError):
        parse_nifti1(data[: len(data) // 2])


def test_gzip_output_is_deterministic() -> None:
    values = _values(16)
    assert encode_nifti1(values, SPACING, compress=True) == encode_nifti1(values, SPACING, compress=True)
    assert gzip.decompress(encode_nifti1(values, SPACING, compress=True)) == encode_nifti1(values, SPACING)


def test_voxel_spacing_rejects_non_positive_extent() -> None:
    with pytest.raises(ValueError):
        VoxelSpacing(0.0, 1.0, 1.0)


def test_label_map_rejects_unknown_class() -> None:
    with pytest.raises(ValueError):
        LabelMap(labels=np.full((1, 2, 2), 4), spacing=SPACING)


def test_info_cfg_names_the_bad_line(tmp_path: Path) -> None:
    cfg = tmp_path / "Info.cfg"
    cfg.write_text("ED: 1\nES: twelve\n", encoding="utf-8")
    with pytest.raises(InfoCfgParseError) as err:
        read_info_cfg(cfg)
    assert err.value.line_number == 2

    cfg.write_text("ED: 1\n\nno separator here\n", encoding="utf-8")
    with pytest.raises(InfoCfgParseError) as err:
        read_info_cfg(cfg)
    assert err.value.line_number == 3


def _study(case_id: str = "patient001", n_frames: int = 4) -> CineStudy:
    rng = np.random.default_rng(0)
    return CineStudy(
        intensities=rng.normal(100.0, 5.0, size=(n_frames, 3, 6, 7)),
        spacing=SPACING,
        case_id=case_id,
        height_m=1.80,
        weight_kg=81.0,
        ed_frame=0,
        es_frame=2,
    )


def _labels(frame: int) -> LabelMap:
    labels = np.zeros((3, 6, 7), dtype=np.uint8)
    labels[1, 2:4, 2:5] = 3
    labels[1, 1, 2:5] = 2
    return LabelMap(labels=labels, spacing=VoxelSpacing(SPACING.dx, SPACING.dy, SPACING.dz), frame_index=frame)


def test_case_directory_roundtrip(tmp_path: Path) -> None:
    study = _study()
    write_case(tmp_path, study, {0: _labels(0), 2: _labels(2)})
    loaded, truth = load_acdc_case(tmp_path / "patient001")

    assert loaded.case_id == "patient001"
    assert (loaded.ed_frame, loaded.es_frame) == (0, 2)
    assert loaded.height_m == pytest.approx(1.80)
    assert loaded.weight_kg == pytest.approx(81.0)
    assert loaded.spacing == SPACING
    np.testing.assert_allclose(loaded.intensities, study.intensities.astype(np.float32))
    assert [f for f, _ in truth] == [0, 2]
    np.testing.assert_array_equal(truth[0][1].labels, _labels(0).labels)


def test_one_based_frame_numbers(tmp_path: Path) -> None:
    write_case(tmp_path, _study(), {0: _labels(0)})
    case_dir = tmp_path / "patient001"
    (case_dir / "Info.cfg").write_text("ED: 1\nES: 3\nHeight: 180\nNbFrame: 4\nWeight: 81\n", encoding="utf-8")
    (case_dir / "patient001_frame00_gt.nii.gz").rename(case_dir / "patient001_frame01_gt.nii.gz")
    (case_dir / "patient001_frame00.nii.gz").unlink()

    study, truth = load_acdc_case(case_dir, frame_base=1)
    assert (study.ed_frame, study.es_frame) == (0, 2)
    assert [f for f, _ in truth] == [0]


def test_missing_cine_is_reported(tmp_path: Path) -> None:
    (tmp_path / "patient002").mkdir()
    with pytest.raises(CaseNotFoundError):
        load_acdc_case(tmp_path / "patient002")


def test_ground_truth_dims_must_match_cine(tmp_path: Path) -> None:
    wrong = LabelMap(labels=np.zeros((3, 5, 7), dtype=np.uint8), spacing=SPACING, frame_index=0)
    write_case(tmp_path, _study(), {0: wrong})
    with pytest.raises(ConsistencyError):
        load_acdc_case(tmp_path / "patient001")


def test_report_cell_formatting() -> None:
    assert format_p(0.0004) == "<0.001"
    assert format_p(0.1817) == "0.182"
    assert format_mean_sd(47.3, 13.39) == "47.30 ± 13.39"
    assert format_bland_altman(-0.6, -9.9492, 8.7492) == "-0.60 (-9.95 to 8.75)"


def _row(name: str = "LVEF") -> ConcordanceRow:
    return ConcordanceRow(name, 55.0, 10.0, 54.4, 9.5, 0.21, 0.98, -0.6, -9.95, 8.75, n=30)


def test_empty_report_is_header_only(tmp_path: Path) -> None:
    path = write_report([], [], tmp_path / "table.csv")
    assert path.read_text(encoding="utf-8").strip() == "Metric,Manual,AI,p,r,Bland-Altman"


def test_report_csv_reads_back(tmp_path: Path) -> None:
    path = write_report([], [_row()], tmp_path / "table.csv")
    (row,) = read_report_csv(path)
    assert row["metric_name"] == "LVEF"
    assert (row["manual_mean"], row["manual_sd"]) == (55.0, 10.0)
    assert row["p"] == pytest.approx(0.21)
    assert (row["bias"], row["loa_low"], row["loa_high"]) == (-0.6, -9.95, 8.75)


def test_json_report_carries_units_and_timestamp(tmp_path: Path) -> None:
    path = write_report([], [_row()], tmp_path / "table.json", fmt="json")
    payload = json.loads(path.read_text(encoding="utf-8"))
    assert payload["concordance"][0]["cells"]["r"] == "0.98"
    assert "generated_at" in payload["metadata"]
    assert "mL" in payload["note"]


def test_metrics_csv_roundtrip(tmp_path: Path) -> None:
    metrics = ClinicalMetrics(120.0, 50.0, 130.0, 60.0, 58.33, 53.85, 105.0, 0, 9, case_id="p1")
    path = write_metrics([metrics], tmp_path / "m.csv")
    df = read_metrics_csv(path)
    assert df.loc["p1", "lvef"] == pytest.approx(58.33)
    assert df.loc["p1", "lv_mass"] == pytest.approx(105.0)


def test_manual_times_schema(tmp_path: Path) -> None:
    path = tmp_path / "times.csv"
    path.write_text("case_id,seconds\na,420\nb,480.5\n", encoding="utf-8")
    times = read_manual_times_csv(path)
    assert times["b"] == pytest.approx(480.5)
    path.write_text("case,time\na,1\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_manual_times_csv(path)


def _cross_row() -> CrossTrainingRow:
    return CrossTrainingRow("LVEF", 55.0, 10.0, 54.4, 9.5, 0.981, 56.2, 11.0, None)


def _error_row() -> ErrorSummary:
    return ErrorSummary("LVEF", -0.6, 4.77, INTEROBSERVER_LVEF, True)


def test_report_csv_writes_cross_training_and_errors(tmp_path: Path) -> None:
    write_report([], [_row()], tmp_path / "table.csv", cross_training=[_cross_row()], errors=[_error_row()])
    cross = (tmp_path / "table_cross_training.csv").read_text(encoding="utf-8").splitlines()
    assert cross == ["Metric,Manual,AI (A),r (A),AI (B),r (B)", "LVEF,55.00 ± 10.00,54.40 ± 9.50,0.98,56.20 ± 11.00,"]
    errors = (tmp_path / "table_errors.csv").read_text(encoding="utf-8").splitlines()
    assert errors == ["Metric,AI - Manual,Interobserver,Within interobserver", "LVEF,-0.60 ± 4.77,2.70 ± 6.60,yes"]


def test_report_csv_skips_empty_extras(tmp_path: Path) -> None:
    write_report([], [_row()], tmp_path / "table.csv")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["table.csv"]


def test_json_report_carries_cross_training_and_errors(tmp_path: Path) -> None:
    path = write_report([], [_row()], tmp_path / "table.json", fmt="json", cross_training=[_cross_row()], errors=[_error_row()])
    payload = json.loads(path.read_text(encoding="utf-8"))
    (cross,) = payload["cross_training"]
    assert cross["r_a"] == pytest.approx(0.98)
    assert cross["r_b"] is None
    assert cross["cells"]["r (B)"] == ""
    (summary,) = payload["error_summary"]
    assert summary["reference"] == [2.7, 6.6]
    assert summary["cells"]["Within interobserver"] == "yes"


def test_read_metrics_accepts_json_and_csv(tmp_path: Path) -> None:
    metrics = [
        ClinicalMetrics(120.0, 50.0, 130.0, 60.0, 58.33, 53.85, 105.0, 0, 9, case_id="007"),
        ClinicalMetrics(140.0, 70.0, 150.0, 75.0, 50.0, 50.0, 120.0, 0, 9, case_id="p2"),
    ]
    from_json = read_metrics(write_metrics(metrics, tmp_path / "m.json", "json"))
    from_csv = read_metrics(write_metrics(metrics, tmp_path / "m.csv"))
    assert list(from_json.index) == ["007", "p2"]
    assert from_json.loc["007", "lvef"] == pytest.approx(58.33)
    for column in ("lv_edv", "lvef", "rvef", "lv_mass"):
        assert from_json[column].tolist() == pytest.approx(from_csv[column].tolist())


def test_read_metrics_rejects_other_json(tmp_path: Path) -> None:
    path = write_report([], [_row()], tmp_path / "table.json", fmt="json")
    with pytest.raises(ValueError):
        read_metrics(path)
    (tmp_path / "bad.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(ValueError):
        read_metrics(tmp_path / "bad.json")
    with pytest.raises(CaseNotFoundError):
        read_metrics(tmp_path / "missing.json")
