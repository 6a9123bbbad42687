"""
Synthetic short-axis cine phantoms with analytically known volumes.

Geometry (all lengths in mm, z measured from the basal plane towards the apex):
1. LV cavity: half-ellipsoid with semi-axes (a, b, c), apex down.
2. Myocardium: shell between the cavity and the offset half-ellipsoid (a+w, b+w, c+w).
3. RV cavity: crescent on the septal side, i.e. the part of a disc of radius R
   centred d mm from the LV axis that lies outside the epicardium, limited to an
   angular window of the given extent around the septal direction.
4. Motion: every in-plane and long-axis length scales by
   s(t) = 1 - cf * (1 - cos(2*pi*t/T)) / 2, so frame 0 is ED and frame T//2 is ES.

Each slice stores the cross-section averaged over its slab, so pixel counting
converges to the closed-form volumes as the in-plane resolution is refined.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from service.errors import ValidationError
from service.quant import ClinicalMetrics, body_mass_index, ejection_fraction
from service.settings import DEFAULT_SEED, MYOCARDIAL_DENSITY_G_PER_ML
from service.study_io import (
    BACKGROUND,
    LV_CAVITY,
    LV_MYOCARDIUM,
    RV_CAVITY,
    CineStudy,
    LabelMap,
    VoxelSpacing,
    write_case,
)

logger = logging.getLogger(__name__)

# Gaussian intensity model, per class id
CLASS_MEANS = {BACKGROUND: 40.0, RV_CAVITY: 120.0, LV_MYOCARDIUM: 90.0, LV_CAVITY: 200.0}
SEPTAL_DIRECTION = math.pi  # RV sits towards -x (image left)
CRESCENT_QUADRATURE_STEPS = 4096  # midpoint rule over the angular window
CYCLE_MS = 1000.0

# Uniform ranges used by phantom_suite
SUITE_RANGES = {
    "endo_radius": (20.0, 27.0),
    "long_axis": (50.0, 62.0),
    "wall_thickness": (6.0, 9.0),
    "rv_thickness": (7.0, 12.0),
    "rv_offset": (4.0, 10.0),
    "rv_extent": (1.8, 2.6),
    "lvef": (30.0, 70.0),
    "center_offset": (-10.0, 10.0),
    "height_m": (1.55, 1.95),
    "weight_kg": (55.0, 100.0),
}


@dataclass(frozen=True)
class PhantomSpec:
    lv_endo_radii: Tuple[float, float, float] = (25.0, 25.0, 60.0)
    wall_thickness: float = 8.0
    rv_crescent_params: Tuple[float, float, float] = (32.0, 2.2, 8.0)  # outer radius, angular extent (rad), offset
    contraction_fraction: float = 0.2
    frames: int = 20
    slices: int = 10
    in_plane_resolution: float = 1.0
    slice_thickness: float = 8.0
    noise_sd: float = 10.0
    center_offset: Tuple[float, float] = (0.0, 0.0)  # (row mm, col mm)
    field_of_view: float = 160.0
    rv_taper: float = 0.8
    height_m: Optional[float] = None
    weight_kg: Optional[float] = None

    def validate(self) -> None:
        a, b, c = self.lv_endo_radii
        w = self.wall_thickness
        rv_radius, rv_extent, rv_offset = self.rv_crescent_params
        if not w > 0:
            raise ValidationError(f"wall_thickness must be > 0, got {w}")
        if not min(a, b, c) > w:
            raise ValidationError(f"every LV radius must exceed the wall thickness, got {self.lv_endo_radii} vs {w}")
        if not 0.0 < self.contraction_fraction < 1.0:
            raise ValidationError(f"contraction_fraction must lie in (0, 1), got {self.contraction_fraction}")
        if self.frames < 2:
            raise ValidationError(f"frames must be >= 2, got {self.frames}")
        if self.slices < 3:
            raise ValidationError(f"slices must be >= 3, got {self.slices}")
        if self.in_plane_resolution <= 0 or self.slice_thickness <= 0:
            raise ValidationError("resolutions must be positive")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")
        if self.slices * self.slice_thickness < c + w:
            raise ValidationError(
                f"{self.slices} slices x {self.slice_thickness} mm do not cover the apex at {c + w} mm"
            )
        if not 0.0 <= rv_offset < rv_radius:
            raise ValidationError("RV disc must contain the LV axis: need 0 <= offset < outer radius")
        if not 0.0 < rv_extent <= 2.0 * math.pi:
            raise ValidationError(f"RV angular extent must lie in (0, 2*pi], got {rv_extent}")
        if rv_offset + rv_radius <= max(a, b) + w:
            raise ValidationError("RV disc does not reach beyond the epicardium")
        if not 0.0 < self.rv_taper <= 1.0:
            raise ValidationError("rv_taper must lie in (0, 1]")
        reach = max(max(a, b) + w, rv_offset + rv_radius) + max(abs(o) for o in self.center_offset)
        if reach >= self.field_of_view / 2.0:
            raise ValidationError(f"heart ({reach:.1f} mm from centre) does not fit the {self.field_of_view} mm field of view")

    @property
    def grid_size(self) -> int:
        return int(round(self.field_of_view / self.in_plane_resolution))

    @property
    def es_frame(self) -> int:
        return self.frames // 2


@dataclass
class PhantomCase:
    study: CineStudy
    labels: List[LabelMap]
    truth: ClinicalMetrics
    spec: PhantomSpec
    seed: int
    heart_center: Tuple[float, float]  # LV axis, native (row, col) pixel coordinates
    extras: Dict[str, float] = field(default_factory=dict)


# --- 1. Geometry ---

def phase_scale(spec: PhantomSpec, frame: int) -> float:
    return 1.0 - spec.contraction_fraction * (1.0 - math.cos(2.0 * math.pi * frame / spec.frames)) / 2.0


def _slab_scale_sq(semi_axis: float, z0: float, z1: float) -> float:
    """Mean of (1 - z^2/c^2) over the slab [z0, z1], clipped at the apex."""
    if z0 >= semi_axis:
        return 0.0
    top = min(z1, semi_axis)

    def primitive(z: float) -> float:
        return z - z ** 3 / (3.0 * semi_axis ** 2)

    return (primitive(top) - primitive(z0)) / (z1 - z0)


def _ellipse_polar_radius(semi_x: float, semi_y: float, theta: np.ndarray) -> np.ndarray:
    if semi_x <= 0 or semi_y <= 0:
        return np.zeros_like(theta)
    return semi_x * semi_y / np.sqrt((semi_y * np.cos(theta)) ** 2 + (semi_x * np.sin(theta)) ** 2)


def _disc_far_radius(offset: float, radius: float, alpha: np.ndarray) -> np.ndarray:
    """Distance from the LV axis to the far edge of the RV disc along a ray at angle alpha from its centre."""
    disc = radius ** 2 - (offset * np.sin(alpha)) ** 2
    return np.where(disc >= 0.0, offset * np.cos(alpha) + np.sqrt(np.maximum(disc, 0.0)), 0.0)


@dataclass(frozen=True)
class _SliceGeometry:
    endo: Tuple[float, float]  # (x semi-axis, y semi-axis)
    epi: Tuple[float, float]
    rv_offset: float
    rv_radius: float


def _slice_geometry(spec: PhantomSpec, scale: float, k: int) -> _SliceGeometry:
    a, b, c = (r * scale for r in spec.lv_endo_radii)
    w = spec.wall_thickness
    h = spec.slice_thickness
    z0, z1 = k * h, (k + 1) * h
    q_in = math.sqrt(_slab_scale_sq(c, z0, z1))
    q_out = math.sqrt(_slab_scale_sq(c + w, z0, z1))
    rv_radius, _, rv_offset = spec.rv_crescent_params
    rv_length = spec.rv_taper * (c + w)
    z_mid = 0.5 * (z0 + z1)
    taper = math.sqrt(max(0.0, 1.0 - (z_mid / rv_length) ** 2)) if z_mid < rv_length else 0.0
    return _SliceGeometry(
        endo=(a * q_in, b * q_in),
        epi=((a + w) * q_out, (b + w) * q_out),
        rv_offset=rv_offset * scale * taper,
        rv_radius=rv_radius * scale * taper,
    )


def crescent_area(spec: PhantomSpec, geometry: _SliceGeometry) -> float:
    """RV cross-section in mm^2: integral over the window of (r_out^2 - r_epi^2)_+ / 2."""
    if geometry.rv_radius <= 0:
        return 0.0
    extent = spec.rv_crescent_params[1]
    step = extent / CRESCENT_QUADRATURE_STEPS
    alpha = -extent / 2.0 + (np.arange(CRESCENT_QUADRATURE_STEPS) + 0.5) * step
    r_out = _disc_far_radius(geometry.rv_offset, geometry.rv_radius, alpha)
    r_epi = _ellipse_polar_radius(geometry.epi[0], geometry.epi[1], SEPTAL_DIRECTION + alpha)
    return float(0.5 * np.sum(np.maximum(r_out ** 2 - r_epi ** 2, 0.0)) * step)


# --- 2. Analytic volumes ---

def analytic_volumes(spec: PhantomSpec, frame: int) -> Dict[str, float]:
    """Closed-form LV cavity and myocardium, quadrature RV cavity; mL."""
    s = phase_scale(spec, frame)
    a, b, c = (r * s for r in spec.lv_endo_radii)
    w = spec.wall_thickness
    lv = 2.0 * math.pi * a * b * c / 3.0
    epi = 2.0 * math.pi * (a + w) * (b + w) * (c + w) / 3.0
    rv = sum(crescent_area(spec, _slice_geometry(spec, s, k)) * spec.slice_thickness for k in range(spec.slices))
    return {"lv": lv / 1000.0, "myo": (epi - lv) / 1000.0, "rv": rv / 1000.0}


def analytic_metrics(spec: PhantomSpec, case_id: str = "") -> ClinicalMetrics:
    ed, es = 0, spec.es_frame
    v_ed, v_es = analytic_volumes(spec, ed), analytic_volumes(spec, es)
    lv_mass = v_ed["myo"] * MYOCARDIAL_DENSITY_G_PER_ML
    bmi = body_mass_index(spec.height_m, spec.weight_kg)
    return ClinicalMetrics(
        lv_edv=v_ed["lv"],
        lv_esv=v_es["lv"],
        rv_edv=v_ed["rv"],
        rv_esv=v_es["rv"],
        lvef=ejection_fraction(v_ed["lv"], v_es["lv"]),
        rvef=ejection_fraction(v_ed["rv"], v_es["rv"]),
        lv_mass=lv_mass,
        ed_frame=ed,
        es_frame=es,
        bmi=bmi,
        lv_edv_index=v_ed["lv"] / bmi if bmi else None,
        lv_esv_index=v_es["lv"] / bmi if bmi else None,
        rv_edv_index=v_ed["rv"] / bmi if bmi else None,
        rv_esv_index=v_es["rv"] / bmi if bmi else None,
        lv_mass_index=lv_mass / bmi if bmi else None,
        case_id=case_id,
    )


# --- 3. Rasterization ---

def _plane_coordinates(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    n = spec.grid_size
    centre = (n - 1) / 2.0
    idx = (np.arange(n) - centre) * spec.in_plane_resolution
    y = idx[:, None] - spec.center_offset[0]
    x = idx[None, :] - spec.center_offset[1]
    return np.broadcast_to(x, (n, n)), np.broadcast_to(y, (n, n))


def rasterize_frame(spec: PhantomSpec, frame: int) -> np.ndarray:
    """Label volume [slice][row][col] for one frame."""
    x, y = _plane_coordinates(spec)
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    alpha = np.angle(np.exp(1j * (theta - SEPTAL_DIRECTION)))
    in_window = np.abs(alpha) <= spec.rv_crescent_params[1] / 2.0
    s = phase_scale(spec, frame)

    labels = np.zeros((spec.slices,) + x.shape, dtype=np.uint8)
    for k in range(spec.slices):
        g = _slice_geometry(spec, s, k)
        out = labels[k]
        if g.rv_radius > 0:
            r_epi = _ellipse_polar_radius(g.epi[0], g.epi[1], theta)
            rv = in_window & (rho > r_epi) & (rho < _disc_far_radius(g.rv_offset, g.rv_radius, alpha))
            out[rv] = RV_CAVITY
        if g.epi[0] > 0:
            out[(x / g.epi[0]) ** 2 + (y / g.epi[1]) ** 2 <= 1.0] = LV_MYOCARDIUM
        if g.endo[0] > 0:
            out[(x / g.endo[0]) ** 2 + (y / g.endo[1]) ** 2 <= 1.0] = LV_CAVITY
    return labels


def generate_phantom(spec: PhantomSpec, seed: int, case_id: Optional[str] = None) -> PhantomCase:
    """
    Build a cine study, its per-frame label maps and the analytic ground-truth metrics.

    Intensities are the class means plus Gaussian noise drawn from
    ``numpy.random.default_rng(seed)``, so equal (spec, seed) give identical studies.
    """
    spec.validate()
    case_id = case_id or f"phantom_{seed}"
    res = spec.in_plane_resolution
    spacing = VoxelSpacing(res, res, spec.slice_thickness, CYCLE_MS / spec.frames)
    label_spacing = VoxelSpacing(res, res, spec.slice_thickness, 0.0)

    lut = np.array([CLASS_MEANS[c] for c in sorted(CLASS_MEANS)], dtype=np.float64)
    rng = np.random.default_rng(seed)
    frames = [rasterize_frame(spec, t) for t in range(spec.frames)]
    intensities = np.stack([lut[f] for f in frames])
    if spec.noise_sd > 0:
        intensities = intensities + rng.normal(0.0, spec.noise_sd, size=intensities.shape)

    truth = analytic_metrics(spec, case_id)
    study = CineStudy(
        intensities=intensities,
        spacing=spacing,
        case_id=case_id,
        height_m=spec.height_m,
        weight_kg=spec.weight_kg,
        ed_frame=truth.ed_frame,
        es_frame=truth.es_frame,
        metadata={"Group": "PHANTOM"},
    )
    n = spec.grid_size
    centre = (n - 1) / 2.0
    heart_center = (centre + spec.center_offset[0] / res, centre + spec.center_offset[1] / res)
    labels = [LabelMap(labels=f, spacing=label_spacing, frame_index=t) for t, f in enumerate(frames)]
    return PhantomCase(study=study, labels=labels, truth=truth, spec=spec, seed=seed, heart_center=heart_center)


def suite_spec(rng: np.random.Generator, base: Optional[PhantomSpec] = None) -> PhantomSpec:
    """Draw one phantom from SUITE_RANGES; the LVEF draw fixes the contraction fraction."""
    base = base or PhantomSpec()
    r = SUITE_RANGES
    a = rng.uniform(*r["endo_radius"])
    b = rng.uniform(*r["endo_radius"])
    c = rng.uniform(*r["long_axis"])
    w = rng.uniform(*r["wall_thickness"])
    d = rng.uniform(*r["rv_offset"])
    radius = max(a, b) + w - d + rng.uniform(*r["rv_thickness"])
    extent = rng.uniform(*r["rv_extent"])
    lvef = rng.uniform(*r["lvef"]) / 100.0
    offset = (rng.uniform(*r["center_offset"]), rng.uniform(*r["center_offset"]))
    height = rng.uniform(*r["height_m"])
    weight = rng.uniform(*r["weight_kg"])
    return replace(
        base,
        lv_endo_radii=(a, b, c),
        wall_thickness=w,
        rv_crescent_params=(radius, extent, d),
        contraction_fraction=1.0 - (1.0 - lvef) ** (1.0 / 3.0),
        center_offset=offset,
        height_m=height,
        weight_kg=weight,
    )


def phantom_suite(n: int, seed: int = DEFAULT_SEED, base: Optional[PhantomSpec] = None) -> List[PhantomCase]:
    """``n`` seeded phantoms with geometry, offsets and LVEF drawn from SUITE_RANGES."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    cases: List[PhantomCase] = []
    for i in range(n):
        spec = suite_spec(rng, base)
        case_seed = int(rng.integers(0, 2 ** 31 - 1))
        cases.append(generate_phantom(spec, case_seed, case_id=f"phantom{i + 1:03d}"))
    return cases


# --- 4. Output ---

def save_phantom_case(root: os.PathLike, case: PhantomCase) -> Path:
    """Write the case in ACDC layout (ED/ES ground truth) plus ``truth.json`` with the analytic metrics."""
    ed, es = case.truth.ed_frame, case.truth.es_frame
    case_dir = write_case(
        root,
        case.study,
        {ed: case.labels[ed], es: case.labels[es]},
        extra_info={"Group": "PHANTOM"},
    )
    truth = {
        "seed": case.seed,
        "spec": asdict(case.spec),
        "metrics": case.truth.to_record(),
        "heart_center": list(case.heart_center),
    }
    with open(case_dir / "truth.json", "w", encoding="utf-8") as f:
        json.dump(truth, f, indent=2)
    logger.info("Saved phantom %s to %s", case.study.case_id, case_dir)
    return case_dir


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s %(message)s")
    logger.info("--- Generating phantom suite ---")
    for phantom in phantom_suite(10, DEFAULT_SEED):
        save_phantom_case(Path("data"), phantom)
