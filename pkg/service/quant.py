"""
Clinical quantification from label maps.

Volumes come from voxel summation: count x dx*dy*dz. With dz including the
inter-slice gap this equals slice stacking, so no geometric model is fitted.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from service.errors import ConsistencyError, DegenerateStudyError, ValidationError
from service.settings import MYOCARDIAL_DENSITY_G_PER_ML
from service.study_io import (
    CLASS_NAMES,
    LV_CAVITY,
    LV_MYOCARDIUM,
    RV_CAVITY,
    CineStudy,
    LabelMap,
)

logger = logging.getLogger(__name__)

FOREGROUND_CLASSES = (RV_CAVITY, LV_MYOCARDIUM, LV_CAVITY)


@dataclass(frozen=True)
class ClinicalMetrics:
    """Biventricular volumes (mL), EF (%), LV mass (g) and BMI-indexed values for one study."""

    lv_edv: float
    lv_esv: float
    rv_edv: float
    rv_esv: float
    lvef: Optional[float]
    rvef: Optional[float]
    lv_mass: float
    ed_frame: int
    es_frame: int
    bmi: Optional[float] = None
    lv_edv_index: Optional[float] = None
    lv_esv_index: Optional[float] = None
    rv_edv_index: Optional[float] = None
    rv_esv_index: Optional[float] = None
    lv_mass_index: Optional[float] = None
    case_id: str = ""

    def to_record(self) -> Dict[str, object]:
        return asdict(self)


def label_volume(label_map: LabelMap, class_id: int) -> float:
    """Volume in mL of the voxels labelled ``class_id`` (1, 2 or 3)."""
    if class_id not in FOREGROUND_CLASSES:
        raise ValidationError(f"class_id must be one of {FOREGROUND_CLASSES}, got {class_id}")
    count = int(np.count_nonzero(label_map.labels == class_id))
    return count * label_map.spacing.voxel_volume_ml


def class_volumes(label_map: LabelMap) -> Dict[int, float]:
    """Volume in mL of every class including background; they sum to the grid volume."""
    counts = np.bincount(label_map.labels.ravel(), minlength=len(CLASS_NAMES))
    return {c: int(counts[c]) * label_map.spacing.voxel_volume_ml for c in CLASS_NAMES}


def volume_curve(label_maps: Sequence[LabelMap], class_id: int = LV_CAVITY) -> List[float]:
    """Per-frame volume of one class, ordered as given."""
    return [label_volume(m, class_id) for m in label_maps]


def select_ed_es(
    per_frame_lv_volumes: Sequence[float],
    provided: Optional[Tuple[Optional[int], Optional[int]]] = None,
) -> Tuple[int, int]:
    """
    ED/ES frame indices. Provided indices win; otherwise ED = argmax and
    ES = argmin of the LV cavity curve, ties to the lowest index.
    """
    volumes = np.asarray(per_frame_lv_volumes, dtype=np.float64)
    if volumes.size < 2:
        raise ValidationError(f"need at least 2 frames to select ED/ES, got {volumes.size}")
    if provided is not None and provided[0] is not None and provided[1] is not None:
        return int(provided[0]), int(provided[1])
    if not np.any(volumes > 0):
        raise DegenerateStudyError("LV cavity volume is zero in every frame")
    # np.argmax/argmin return the first occurrence
    return int(np.argmax(volumes)), int(np.argmin(volumes))


def ejection_fraction(edv: float, esv: float) -> Optional[float]:
    if edv <= 0:
        return None
    return 100.0 * (edv - esv) / edv


def body_mass_index(height_m: Optional[float], weight_kg: Optional[float]) -> Optional[float]:
    if height_m is None or weight_kg is None:
        return None
    if height_m <= 0 or weight_kg <= 0:
        raise ValidationError(f"height and weight must be positive, got {height_m} m / {weight_kg} kg")
    return weight_kg / height_m ** 2


def compute_metrics(
    ed_map: LabelMap,
    es_map: LabelMap,
    height_m: Optional[float] = None,
    weight_kg: Optional[float] = None,
    case_id: str = "",
) -> ClinicalMetrics:
    """
    EDV/ESV per ventricle, EF, ED myocardial mass at 1.05 g/mL and, when both
    height and weight are known, every volume and the mass divided by BMI.
    """
    if ed_map.spacing != es_map.spacing:
        raise ConsistencyError(f"ED/ES spacing mismatch: {ed_map.spacing} vs {es_map.spacing}")
    if ed_map.shape != es_map.shape:
        raise ConsistencyError(f"ED/ES dims mismatch: {ed_map.shape} vs {es_map.shape}")

    lv_edv = label_volume(ed_map, LV_CAVITY)
    lv_esv = label_volume(es_map, LV_CAVITY)
    rv_edv = label_volume(ed_map, RV_CAVITY)
    rv_esv = label_volume(es_map, RV_CAVITY)
    lv_mass = label_volume(ed_map, LV_MYOCARDIUM) * MYOCARDIAL_DENSITY_G_PER_ML

    bmi = body_mass_index(height_m, weight_kg)
    indexed: Dict[str, Optional[float]] = {}
    for name, value in (("lv_edv", lv_edv), ("lv_esv", lv_esv), ("rv_edv", rv_edv), ("rv_esv", rv_esv), ("lv_mass", lv_mass)):
        indexed[f"{name}_index"] = value / bmi if bmi else None

    return ClinicalMetrics(
        lv_edv=lv_edv,
        lv_esv=lv_esv,
        rv_edv=rv_edv,
        rv_esv=rv_esv,
        lvef=ejection_fraction(lv_edv, lv_esv),
        rvef=ejection_fraction(rv_edv, rv_esv),
        lv_mass=lv_mass,
        ed_frame=ed_map.frame_index,
        es_frame=es_map.frame_index,
        bmi=bmi,
        case_id=case_id,
        **indexed,
    )


def quantify_frames(
    label_maps: Sequence[LabelMap],
    provided: Optional[Tuple[Optional[int], Optional[int]]] = None,
    height_m: Optional[float] = None,
    weight_kg: Optional[float] = None,
    case_id: str = "",
) -> ClinicalMetrics:
    """Pick ED/ES from a full cycle of label maps (one per frame, in frame order) and compute metrics."""
    by_frame = {m.frame_index: m for m in label_maps}
    ordered = [by_frame[k] for k in sorted(by_frame)]
    if provided is not None and provided[0] is not None and provided[1] is not None:
        ed, es = int(provided[0]), int(provided[1])
    else:
        positions = select_ed_es(volume_curve(ordered))
        ed, es = ordered[positions[0]].frame_index, ordered[positions[1]].frame_index
    if ed not in by_frame or es not in by_frame:
        raise ConsistencyError(f"case {case_id}: ED/ES frames ({ed}, {es}) have no label map")
    metrics = compute_metrics(by_frame[ed], by_frame[es], height_m, weight_kg, case_id=case_id)
    logger.info("case %s: ED=%d ES=%d LVEF=%s RVEF=%s", case_id, ed, es, _fmt(metrics.lvef), _fmt(metrics.rvef))
    return metrics


def quantify_study(study: CineStudy, label_maps: Sequence[LabelMap]) -> ClinicalMetrics:
    """Metrics for a study from its label maps, honouring ED/ES given in the study metadata."""
    return quantify_frames(
        label_maps,
        provided=(study.ed_frame, study.es_frame),
        height_m=study.height_m,
        weight_kg=study.weight_kg,
        case_id=study.case_id,
    )


def dice_score(pred: LabelMap, truth: LabelMap, class_id: int) -> float:
    """2|P∩T| / (|P|+|T|); 1.0 when both sets are empty."""
    if pred.shape != truth.shape:
        raise ConsistencyError(f"dice dims mismatch: {pred.shape} vs {truth.shape}")
    p = pred.labels == class_id
    t = truth.labels == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def dice_per_class(pred: LabelMap, truth: LabelMap) -> Dict[str, float]:
    return {CLASS_NAMES[c]: dice_score(pred, truth, c) for c in FOREGROUND_CLASSES}


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.1f}"
