"""
Heart localization and the fixed 90 mm x 90 mm crop fed to the segmentation network.

Native pixel (r, c) and RoI pixel (i, j) are related by
    r = center_row + (i - 63.5) * pitch / dy
    c = center_col + (j - 63.5) * pitch / dx
with pitch = 90/128 mm, so the RoI centre falls between output pixels 63 and 64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np
from scipy import ndimage

from service.errors import InsufficientFramesError, ValidationError
from service.settings import ROI_EXTENT_MM, ROI_GRID
from service.study_io import CineStudy, VoxelSpacing

if TYPE_CHECKING:
    from service.segnet import NetworkParams

logger = logging.getLogger(__name__)

DEGENERATE_INPUT = "degenerate-input"
LEARNED_FALLBACK = "learned-fallback"

VARIANCE_SMOOTHING_PX = 2.0
VARIANCE_THRESHOLD = 0.5  # fraction of the peak kept for the centroid


@dataclass(frozen=True)
class RoIBox:
    center_row: float
    center_col: float
    extent_mm: float = ROI_EXTENT_MM
    grid: int = ROI_GRID
    flags: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.extent_mm != ROI_EXTENT_MM or self.grid != ROI_GRID:
            raise ValidationError(f"RoI must be {ROI_EXTENT_MM} mm on a {ROI_GRID}x{ROI_GRID} grid")
        if not (np.isfinite(self.center_row) and np.isfinite(self.center_col)):
            raise ValidationError(f"RoI centre must be finite, got ({self.center_row}, {self.center_col})")

    @property
    def pitch_mm(self) -> float:
        return self.extent_mm / self.grid

    def native_coordinates(self, spacing: VoxelSpacing) -> Tuple[np.ndarray, np.ndarray]:
        """Native (row, col) coordinates of every RoI pixel centre, each shaped (grid, grid)."""
        offsets = np.arange(self.grid) - (self.grid - 1) / 2.0
        rows = self.center_row + offsets * self.pitch_mm / spacing.dy
        cols = self.center_col + offsets * self.pitch_mm / spacing.dx
        return np.meshgrid(rows, cols, indexing="ij")


# --- Localization ---

def _image_center(study: CineStudy) -> Tuple[float, float]:
    _, rows, cols = study.frame_shape
    return (rows - 1) / 2.0, (cols - 1) / 2.0


def _variance_center(study: CineStudy) -> Optional[Tuple[float, float]]:
    """Centre of mass of the strongest temporal variance; None when nothing moves."""
    variance = study.intensities.var(axis=0).sum(axis=0)
    if not np.any(variance > 0):
        return None
    smooth = ndimage.gaussian_filter(variance, VARIANCE_SMOOTHING_PX, mode="nearest")
    smooth = np.clip(smooth - np.median(smooth), 0.0, None)
    peak = smooth.max()
    if peak <= 0:
        return None
    weights = np.where(smooth >= VARIANCE_THRESHOLD * peak, smooth, 0.0)
    row, col = ndimage.center_of_mass(weights)
    return float(row), float(col)


def locate_heart(study: CineStudy, mode: str = "heuristic", params: Optional["NetworkParams"] = None) -> RoIBox:
    """
    One RoI per study, shared by every frame and slice.

    Args:
        study: The cine study.
        mode: ``heuristic`` (temporal-variance centroid) or ``learned`` (stage-1 network).
        params: Trained parameters carrying the RoI network; required for ``learned``.

    Returns:
        The RoI box. ``flags`` records a degenerate input or a learned-mode fallback.
    """
    if mode == "learned":
        if params is None:
            raise ValidationError("learned localization requires network parameters")
        from service.segnet import predict_heart_center

        center = predict_heart_center(params, study)
        if center is not None:
            return RoIBox(center_row=center[0], center_col=center[1])
        logger.warning("case %s: RoI network found no heart, falling back to the variance heuristic", study.case_id)
        box = locate_heart(study, "heuristic")
        return RoIBox(box.center_row, box.center_col, flags=box.flags + (LEARNED_FALLBACK,))

    if mode != "heuristic":
        raise ValidationError(f"unknown localization mode {mode!r}")
    if study.n_frames < 2:
        raise InsufficientFramesError(f"case {study.case_id}: heuristic localization needs >= 2 frames, got 1")
    center = _variance_center(study)
    if center is None:
        logger.warning("case %s: temporally constant study, using the image centre", study.case_id)
        row, col = _image_center(study)
        return RoIBox(row, col, flags=(DEGENERATE_INPUT,))
    logger.debug("case %s: heuristic RoI centre (%.1f, %.1f)", study.case_id, *center)
    return RoIBox(center_row=center[0], center_col=center[1])


# --- Resampling ---

def crop_resample(frame: np.ndarray, spacing: VoxelSpacing, roi: RoIBox) -> np.ndarray:
    """Bilinear 128x128 crop at 90/128 mm per pixel; samples outside the native grid are 0."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValidationError(f"crop_resample expects a 2-D slice, got shape {frame.shape}")
    rows, cols = roi.native_coordinates(spacing)
    return ndimage.map_coordinates(frame, [rows, cols], order=1, mode="constant", cval=0.0)


def _nearest_lookup(source: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    ri = np.floor(rows + 0.5).astype(np.int64)
    ci = np.floor(cols + 0.5).astype(np.int64)
    inside = (ri >= 0) & (ri < source.shape[0]) & (ci >= 0) & (ci < source.shape[1])
    out = np.zeros(rows.shape, dtype=source.dtype)
    out[inside] = source[ri[inside], ci[inside]]
    return out


def crop_labels(labels: np.ndarray, spacing: VoxelSpacing, roi: RoIBox) -> np.ndarray:
    """Nearest-neighbour counterpart of ``crop_resample`` for class ids."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValidationError(f"crop_labels expects a 2-D slice, got shape {labels.shape}")
    rows, cols = roi.native_coordinates(spacing)
    return _nearest_lookup(labels.astype(np.uint8), rows, cols)


def paste_back(predicted: np.ndarray, spacing: VoxelSpacing, roi: RoIBox, native_dims: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour map of a 128x128 label slice onto the native grid; outside the RoI is background."""
    predicted = np.asarray(predicted)
    if predicted.shape != (roi.grid, roi.grid):
        raise ValidationError(f"predicted slice must be {roi.grid}x{roi.grid}, got {predicted.shape}")
    n_rows, n_cols = native_dims
    scale = (roi.grid - 1) / 2.0
    r = (np.arange(n_rows) - roi.center_row) * spacing.dy / roi.pitch_mm + scale
    c = (np.arange(n_cols) - roi.center_col) * spacing.dx / roi.pitch_mm + scale
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return _nearest_lookup(predicted.astype(np.uint8), rr, cc)


def crop_study(study: CineStudy, roi: RoIBox) -> np.ndarray:
    """Every frame and slice cropped: (frames, slices, 128, 128)."""
    out = np.empty((study.n_frames, study.n_slices, roi.grid, roi.grid), dtype=np.float64)
    for t in range(study.n_frames):
        for k in range(study.n_slices):
            out[t, k] = crop_resample(study.intensities[t, k], study.spacing, roi)
    return out
