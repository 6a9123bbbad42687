from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from phantom_simulator import (
    PhantomSpec,
    analytic_metrics,
    analytic_volumes,
    generate_phantom,
    phantom_suite,
    rasterize_frame,
    save_phantom_case,
    suite_spec,
)
from service.errors import ValidationError
from service.quant import compute_metrics, label_volume
from service.study_io import LV_CAVITY, LV_MYOCARDIUM, RV_CAVITY, LabelMap, VoxelSpacing, load_acdc_case


def _voxel_volumes(spec: PhantomSpec, frame: int) -> dict:
    spacing = VoxelSpacing(spec.in_plane_resolution, spec.in_plane_resolution, spec.slice_thickness)
    labels = LabelMap(rasterize_frame(spec, frame), spacing, frame)
    return {
        "lv": label_volume(labels, LV_CAVITY),
        "myo": label_volume(labels, LV_MYOCARDIUM),
        "rv": label_volume(labels, RV_CAVITY),
    }


def _worst_relative_error(spec: PhantomSpec) -> float:
    errors = []
    for frame in (0, spec.es_frame):
        exact = analytic_volumes(spec, frame)
        counted = _voxel_volumes(spec, frame)
        errors += [abs(counted[k] - exact[k]) / exact[k] for k in exact]
    return max(errors)


def test_half_ellipsoid_volumes() -> None:
    spec = PhantomSpec(lv_endo_radii=(30.0, 30.0, 60.0))
    assert analytic_volumes(spec, 0)["lv"] == pytest.approx(113.10, abs=0.005)
    # contraction 0.2 shrinks the semi-axes to (24, 24, 48) at end-systole
    metrics = analytic_metrics(spec)
    assert metrics.lv_esv == pytest.approx(57.91, abs=0.005)
    assert metrics.lvef == pytest.approx(48.8, abs=0.05)
    assert metrics.es_frame == spec.es_frame == 10


def test_myocardial_mass_is_shell_volume_times_density() -> None:
    spec = PhantomSpec()
    a, b, c = spec.lv_endo_radii
    w = spec.wall_thickness
    shell = 2.0 * np.pi * ((a + w) * (b + w) * (c + w) - a * b * c) / 3.0 / 1000.0
    assert analytic_metrics(spec).lv_mass == pytest.approx(shell * 1.05)


def test_same_seed_gives_identical_study() -> None:
    a = generate_phantom(PhantomSpec(frames=6), seed=3)
    b = generate_phantom(PhantomSpec(frames=6), seed=3)
    c = generate_phantom(PhantomSpec(frames=6), seed=4)
    assert a.study.intensities.tobytes() == b.study.intensities.tobytes()
    assert not np.array_equal(a.study.intensities, c.study.intensities)
    np.testing.assert_array_equal(a.labels[0].labels, c.labels[0].labels)


@pytest.mark.parametrize(
    "change",
    [
        {"wall_thickness": 0.0},
        {"contraction_fraction": 1.0},
        {"frames": 1},
        {"slices": 2},
        {"lv_endo_radii": (5.0, 30.0, 60.0)},
        {"center_offset": (60.0, 0.0)},
    ],
)
def test_invalid_specs_are_rejected(change: dict) -> None:
    with pytest.raises(ValidationError):
        generate_phantom(replace(PhantomSpec(), **change), seed=0)


def test_voxel_counts_match_analytic_volumes() -> None:
    rng = np.random.default_rng(21)
    for _ in range(10):
        assert _worst_relative_error(suite_spec(rng)) <= 0.02


def test_suite_metrics_match_analytic_truth() -> None:
    for case in phantom_suite(10, seed=31, base=PhantomSpec(frames=4)):
        truth = case.truth
        m = compute_metrics(case.labels[truth.ed_frame], case.labels[truth.es_frame])
        for name in ("lv_edv", "lv_esv", "rv_edv", "rv_esv", "lv_mass"):
            assert getattr(m, name) == pytest.approx(getattr(truth, name), rel=0.02), f"{case.study.case_id} {name}"
        assert abs(m.lvef - truth.lvef) <= 2.0, case.study.case_id
        assert abs(m.rvef - truth.rvef) <= 2.0, case.study.case_id


def _errors_by_volume(spec: PhantomSpec) -> dict:
    out = {}
    for frame in (0, spec.es_frame):
        exact = analytic_volumes(spec, frame)
        counted = _voxel_volumes(spec, frame)
        for k in exact:
            out[(frame, k)] = abs(counted[k] - exact[k]) / exact[k]
    return out


def test_halving_pixel_size_does_not_increase_suite_error() -> None:
    rng = np.random.default_rng(33)
    coarse_errors, fine_errors = [], []
    for _ in range(10):
        coarse = suite_spec(rng, PhantomSpec(frames=4))
        fine = replace(coarse, in_plane_resolution=0.5)
        c, f = _errors_by_volume(coarse), _errors_by_volume(fine)
        coarse_errors += list(c.values())
        fine_errors += list(f.values())
        # single volumes may wobble by boundary quantization, never beyond the 1 mm bound
        assert max(f.values()) <= 0.02
    assert np.mean(fine_errors) <= np.mean(coarse_errors)
    assert max(fine_errors) <= max(max(coarse_errors), 0.005)


def test_finer_grid_does_not_increase_error() -> None:
    coarse = PhantomSpec(frames=4)
    fine = replace(coarse, in_plane_resolution=0.5)
    assert _worst_relative_error(fine) <= max(_worst_relative_error(coarse), 0.005)


def test_myocardium_encloses_cavity_on_mid_slices() -> None:
    spec = PhantomSpec()
    for frame in (0, spec.es_frame):
        labels = rasterize_frame(spec, frame)
        for k in range(1, spec.slices // 2 + 1):
            cavity = labels[k] == LV_CAVITY
            assert cavity.any()
            rim = ndimage.binary_dilation(cavity) & ~cavity
            assert np.all(labels[k][rim] == LV_MYOCARDIUM), f"frame {frame} slice {k}"


def test_quantified_phantom_matches_truth() -> None:
    case = generate_phantom(PhantomSpec(), seed=9)
    m = compute_metrics(case.labels[case.truth.ed_frame], case.labels[case.truth.es_frame])
    assert m.lvef == pytest.approx(case.truth.lvef, abs=1.0)
    assert m.lv_mass == pytest.approx(case.truth.lv_mass, rel=0.02)


def test_suite_is_deterministic_and_in_range() -> None:
    first = phantom_suite(10, seed=7, base=PhantomSpec(frames=4))
    second = phantom_suite(10, seed=7, base=PhantomSpec(frames=4))
    ids = [c.study.case_id for c in first]
    assert len(set(ids)) == 10 and ids[0] == "phantom001"
    for a, b in zip(first, second):
        assert a.truth == b.truth
        assert 30.0 <= a.truth.lvef <= 70.0
        assert a.truth.bmi is not None


def test_saved_case_follows_acdc_layout(tmp_path: Path) -> None:
    case = generate_phantom(PhantomSpec(frames=4, height_m=1.7, weight_kg=70.0), seed=2, case_id="phantom042")
    case_dir = save_phantom_case(tmp_path, case)
    assert case_dir == tmp_path / "phantom042"
    assert (case_dir / "phantom042_4d.nii.gz").exists()
    assert (case_dir / "phantom042_frame02_gt.nii.gz").exists()

    study, truth = load_acdc_case(case_dir)
    assert (study.ed_frame, study.es_frame) == (0, 2)
    assert [f for f, _ in truth] == [0, 2]
    np.testing.assert_array_equal(truth[1][1].labels, case.labels[2].labels)

    payload = json.loads((case_dir / "truth.json").read_text(encoding="utf-8"))
    assert payload["seed"] == 2
    assert payload["metrics"]["lv_edv"] == pytest.approx(case.truth.lv_edv)
