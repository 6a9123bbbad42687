"""
Study I/O: NIfTI-1 codec, ACDC-style case directories and report files.

Array convention: every in-memory volume is a C-ordered numpy array whose axes
are the NIfTI dims reversed, i.e. ``[frame][slice][row][col]`` for a cine and
``[slice][row][col]`` for a label map. Column is the fastest-varying axis, which
is exactly the NIfTI on-disk order, so no transposes are needed either way.
"""

from __future__ import annotations

import gzip
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from service.errors import (
    CaseNotFoundError,
    ConsistencyError,
    InfoCfgParseError,
    NiftiFormatError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    ValidationError,
)

if TYPE_CHECKING:  # pragma: no cover
    from service.quant import ClinicalMetrics
    from tools.stats import ConcordanceRow, CrossTrainingRow, ErrorSummary

logger = logging.getLogger(__name__)

N_CLASSES = 4
BACKGROUND, RV_CAVITY, LV_MYOCARDIUM, LV_CAVITY = 0, 1, 2, 3
CLASS_NAMES = {BACKGROUND: "background", RV_CAVITY: "rv_cavity", LV_MYOCARDIUM: "lv_myocardium", LV_CAVITY: "lv_cavity"}

# --- NIfTI-1 header layout (348 bytes) ---

header_dtd = [
    ("sizeof_hdr", "i4"),      # 0; must be 348
    ("data_type", "S10"),      # 4; unused
    ("db_name", "S18"),        # 14; unused
    ("extents", "i4"),         # 32; unused
    ("session_error", "i2"),   # 36; unused
    ("regular", "S1"),         # 38; unused
    ("dim_info", "u1"),        # 39
    ("dim", "i2", (8,)),       # 40; dim[0] = rank
    ("intent_p1", "f4"),       # 56
    ("intent_p2", "f4"),       # 60
    ("intent_p3", "f4"),       # 64
    ("intent_code", "i2"),     # 68
    ("datatype", "i2"),        # 70
    ("bitpix", "i2"),          # 72
    ("slice_start", "i2"),     # 74
    ("pixdim", "f4", (8,)),    # 76; pixdim[1..3] = dx, dy, dz; pixdim[4] = dt
    ("vox_offset", "f4"),      # 108
    ("scl_slope", "f4"),       # 112
    ("scl_inter", "f4"),       # 116
    ("slice_end", "i2"),       # 120
    ("slice_code", "u1"),      # 122
    ("xyzt_units", "u1"),      # 123
    ("cal_max", "f4"),         # 124
    ("cal_min", "f4"),         # 128
    ("slice_duration", "f4"),  # 132
    ("toffset", "f4"),         # 136
    ("glmax", "i4"),           # 140
    ("glmin", "i4"),           # 144
    ("descrip", "S80"),        # 148
    ("aux_file", "S24"),       # 228
    ("qform_code", "i2"),      # 252
    ("sform_code", "i2"),      # 254
    ("quatern_b", "f4"),       # 256
    ("quatern_c", "f4"),       # 260
    ("quatern_d", "f4"),       # 264
    ("qoffset_x", "f4"),       # 268
    ("qoffset_y", "f4"),       # 272
    ("qoffset_z", "f4"),       # 276
    ("srow_x", "f4", (4,)),    # 280
    ("srow_y", "f4", (4,)),    # 296
    ("srow_z", "f4", (4,)),    # 312
    ("intent_name", "S16"),    # 328
    ("magic", "S4"),           # 344; 'n+1\0' single file, 'ni1\0' header/data pair
]
header_dtype = np.dtype(header_dtd)
HEADER_SIZE = 348
SINGLE_FILE_MAGIC = b"n+1\x00"
PAIR_MAGIC = b"ni1\x00"
DEFAULT_VOX_OFFSET = 352

# datatype code -> numpy type; everything else is rejected
DATATYPES: Dict[int, np.dtype] = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
}
DATATYPE_CODES = {dt: code for code, dt in DATATYPES.items()}

# xyzt_units: low 3 bits space, next 3 bits time
_SPACE_TO_MM = {0: 1.0, 1: 1000.0, 2: 1.0, 3: 0.001}
_TIME_TO_MS = {0: 1.0, 8: 1000.0, 16: 1.0, 24: 0.001}
UNITS_MM_MS = 2 | 16


# --- Domain types ---

@dataclass(frozen=True)
class VoxelSpacing:
    """Physical voxel size: ``dx`` per column, ``dy`` per row, ``dz`` per slice (mm), ``dt`` per frame (ms)."""

    dx: float
    dy: float
    dz: float
    dt: float = 0.0

    def __post_init__(self) -> None:
        for name in ("dx", "dy", "dz", "dt"):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ValidationError(f"voxel spacing {name} must be finite, got {value}")
        if self.dx <= 0 or self.dy <= 0 or self.dz <= 0:
            raise ValidationError(f"voxel spacing must be positive, got {self}")
        if self.dt < 0:
            raise ValidationError(f"frame interval must be >= 0, got {self.dt}")

    @property
    def voxel_volume_ml(self) -> float:
        return self.dx * self.dy * self.dz / 1000.0

    def scaled(self, factor: float) -> "VoxelSpacing":
        return VoxelSpacing(self.dx * factor, self.dy * factor, self.dz * factor, self.dt)


@dataclass
class CineStudy:
    intensities: np.ndarray  # [frame][slice][row][col]
    spacing: VoxelSpacing
    case_id: str
    height_m: Optional[float] = None
    weight_kg: Optional[float] = None
    ed_frame: Optional[int] = None
    es_frame: Optional[int] = None
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.ndim != 4 or min(self.intensities.shape) < 1:
            raise ValidationError(f"cine intensities must be 4-D with every extent >= 1, got {self.intensities.shape}")
        if not np.isfinite(self.intensities).all():
            raise ValidationError(f"case {self.case_id}: intensities contain non-finite values")
        for name in ("ed_frame", "es_frame"):
            idx = getattr(self, name)
            if idx is not None and not 0 <= idx < self.n_frames:
                raise ValidationError(f"case {self.case_id}: {name}={idx} outside [0, {self.n_frames})")

    @property
    def n_frames(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_slices(self) -> int:
        return self.intensities.shape[1]

    @property
    def frame_shape(self) -> Tuple[int, int, int]:
        return tuple(self.intensities.shape[1:])  # type: ignore[return-value]


@dataclass
class LabelMap:
    labels: np.ndarray  # [slice][row][col], values in {0,1,2,3}
    spacing: VoxelSpacing
    frame_index: int = 0

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValidationError(f"label map must be 3-D [slice][row][col], got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
            raise ValidationError(f"label ids must lie in 0..{N_CLASSES - 1}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.array_equal(labels, np.round(labels)):
                raise ValidationError("label map contains non-integer class ids")
        self.labels = labels.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)  # type: ignore[return-value]


@dataclass
class NiftiVolume:
    """Decoded single-file NIfTI-1 image."""

    header: Dict[str, Any]
    raw: np.ndarray  # stored values, dims reversed (C order)
    spacing: VoxelSpacing
    byte_order: str

    @property
    def rank(self) -> int:
        return int(self.header["dim"][0])

    @property
    def datatype(self) -> int:
        return int(self.header["datatype"])

    @property
    def values(self) -> np.ndarray:
        """Stored values with ``scl_slope``/``scl_inter`` applied (slope 0 is treated as 1)."""
        slope = float(self.header["scl_slope"])
        inter = float(self.header["scl_inter"])
        if slope == 0.0 or not np.isfinite(slope):
            slope = 1.0
        if not np.isfinite(inter):
            inter = 0.0
        return self.raw.astype(np.float64) * slope + inter


# --- NIfTI-1 codec ---

def _header_to_dict(hdr: np.ndarray) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for name in header_dtype.names:
        value = hdr[name]
        if isinstance(value, np.ndarray):
            out[name] = value.tolist()
        elif isinstance(value, bytes):
            out[name] = value
        else:
            out[name] = value.item()
    return out


def _resolve_byte_order(buf: bytes) -> str:
    for order in ("<", ">"):
        size = int(np.frombuffer(buf, dtype=np.dtype(order + "i4"), count=1)[0])
        if size == HEADER_SIZE:
            return order
    raise NiftiFormatError("sizeof_hdr is not 348 in either byte order")


def parse_nifti1(data: bytes) -> NiftiVolume:
    """
    Decode a raw or gzip-compressed single-file NIfTI-1 image.

    Raises:
        NiftiFormatError: bad magic, header/data pair, bad dims or spacing.
        UnsupportedDatatypeError: datatype other than uint8 / int16 / float32.
        TruncatedPayloadError: header or voxel payload shorter than declared.
    """
    buf = bytes(data)
    if buf[:2] == b"\x1f\x8b":
        try:
            buf = gzip.decompress(buf)
        except (OSError, EOFError) as e:
            raise TruncatedPayloadError(None, len(buf)) from e
    if len(buf) < HEADER_SIZE:
        raise TruncatedPayloadError(HEADER_SIZE, len(buf))

    magic = buf[344:348]
    if magic == PAIR_MAGIC:
        raise NiftiFormatError("header/data pair NIfTI ('ni1') is not supported; use single-file .nii or .nii.gz")
    if magic != SINGLE_FILE_MAGIC:
        raise NiftiFormatError(f"bad NIfTI-1 magic {magic!r}")

    order = _resolve_byte_order(buf)
    hdr = np.frombuffer(buf, dtype=header_dtype.newbyteorder(order), count=1)[0]
    header = _header_to_dict(hdr)

    code = int(header["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(code)
    dtype = DATATYPES[code]
    if int(header["bitpix"]) != dtype.itemsize * 8:
        raise NiftiFormatError(f"bitpix {header['bitpix']} inconsistent with datatype {code}")

    dim = header["dim"]
    rank = int(dim[0])
    if not 1 <= rank <= 7:
        raise NiftiFormatError(f"dim[0] must be in 1..7, got {rank}")
    shape = tuple(int(d) for d in dim[1 : rank + 1])
    if min(shape) < 1:
        raise NiftiFormatError(f"non-positive extent in dim {shape}")

    offset = int(header["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiFormatError(f"vox_offset {offset} lies inside the header")
    count = int(np.prod(shape))
    needed = offset + count * dtype.itemsize
    if len(buf) < needed:
        raise TruncatedPayloadError(needed, len(buf))

    raw = np.frombuffer(buf, dtype=dtype.newbyteorder(order), count=count, offset=offset)
    raw = raw.astype(dtype).reshape(shape[::-1])

    units = int(header["xyzt_units"])
    to_mm = _SPACE_TO_MM.get(units & 0x07, 1.0)
    to_ms = _TIME_TO_MS.get(units & 0x38, 1.0)
    pixdim = header["pixdim"]
    extents = [abs(float(pixdim[i])) if rank >= i else 1.0 for i in (1, 2, 3)]
    dt = abs(float(pixdim[4])) * to_ms if rank >= 4 else 0.0
    try:
        spacing = VoxelSpacing(extents[0] * to_mm, extents[1] * to_mm, extents[2] * to_mm, dt)
    except ValidationError as e:
        raise NiftiFormatError(f"invalid pixdim {pixdim[1:5]}: {e}") from e

    return NiftiVolume(header=header, raw=raw, spacing=spacing, byte_order=order)


def encode_nifti1(
    values: np.ndarray,
    spacing: VoxelSpacing,
    datatype: int = 16,
    byte_order: str = "<",
    compress: bool = False,
    scl_slope: float = 1.0,
    scl_inter: float = 0.0,
    descrip: str = "",
) -> bytes:
    """
    Encode ``values`` (axes reversed relative to NIfTI dims) as a single-file NIfTI-1 image.

    Integer datatypes round the stored values and reject anything out of range.
    gzip output carries ``mtime=0`` so identical inputs give identical bytes.
    """
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(datatype)
    if byte_order not in ("<", ">"):
        raise ValidationError(f"byte_order must be '<' or '>', got {byte_order!r}")
    arr = np.asarray(values)
    if not 1 <= arr.ndim <= 7:
        raise ValidationError(f"NIfTI-1 supports rank 1..7, got {arr.ndim}")
    dtype = DATATYPES[datatype]
    if np.issubdtype(dtype, np.integer) and arr.dtype != dtype:
        rounded = np.rint(arr.astype(np.float64))
        info = np.iinfo(dtype)
        if rounded.size and (rounded.min() < info.min or rounded.max() > info.max):
            raise ValidationError(f"values outside the {dtype} range")
        arr = rounded
    stored = np.ascontiguousarray(arr.astype(dtype))

    hdr = np.zeros(1, dtype=header_dtype.newbyteorder(byte_order))[0]
    hdr["sizeof_hdr"] = HEADER_SIZE
    dims = [arr.ndim] + list(arr.shape[::-1]) + [1] * (7 - arr.ndim)
    hdr["dim"] = dims
    hdr["datatype"] = datatype
    hdr["bitpix"] = dtype.itemsize * 8
    hdr["pixdim"] = [1.0, spacing.dx, spacing.dy, spacing.dz, spacing.dt, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = DEFAULT_VOX_OFFSET
    hdr["scl_slope"] = scl_slope
    hdr["scl_inter"] = scl_inter
    hdr["xyzt_units"] = UNITS_MM_MS
    hdr["descrip"] = descrip.encode("ascii", "replace")[:80]
    hdr["magic"] = SINGLE_FILE_MAGIC

    payload = (
        hdr.tobytes()
        + b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE)  # empty extension block
        + stored.astype(dtype.newbyteorder(byte_order)).tobytes()
    )
    if compress:
        return gzip.compress(payload, mtime=0)
    return payload


def read_nifti(path: Union[str, Path]) -> NiftiVolume:
    path = Path(path)
    if not path.exists():
        raise CaseNotFoundError(f"NIfTI file not found: {path}")
    with open(path, "rb") as f:
        return parse_nifti1(f.read())


def write_nifti(path: Union[str, Path], values: np.ndarray, spacing: VoxelSpacing, datatype: int = 16) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_nifti1(values, spacing, datatype=datatype, compress=path.name.endswith(".gz"))
    with open(path, "wb") as f:
        f.write(payload)
    return path


def volume_to_study(volume: NiftiVolume, case_id: str, **meta: Any) -> CineStudy:
    """Wrap a 3-D (single frame) or 4-D NIfTI volume as a cine study."""
    values = volume.values
    if values.ndim == 3:
        values = values[np.newaxis]
    if values.ndim != 4:
        raise NiftiFormatError(f"case {case_id}: cine volume must be 3-D or 4-D, got rank {volume.rank}")
    return CineStudy(intensities=values, spacing=volume.spacing, case_id=case_id, **meta)


def volume_to_label_map(volume: NiftiVolume, frame_index: int) -> LabelMap:
    values = volume.values
    if values.ndim == 4 and values.shape[0] == 1:
        values = values[0]
    if values.ndim != 3:
        raise ConsistencyError(f"label volume must be 3-D, got rank {volume.rank}")
    return LabelMap(labels=values, spacing=volume.spacing, frame_index=frame_index)


def write_label_nifti(label_map: LabelMap, path: Union[str, Path]) -> Path:
    """Write one frame of predicted labels as a uint8 NIfTI-1 image."""
    return write_nifti(path, label_map.labels, label_map.spacing, datatype=2)


# --- ACDC case directories ---

_FRAME_FILE = re.compile(r"_frame(\d+)(_gt)?\.nii(\.gz)?$")


_NUMERIC_KEYS = {"ED": int, "ES": int, "NbFrame": int, "Height": float, "Weight": float}


def read_info_cfg(path: Union[str, Path]) -> Dict[str, str]:
    """
    Parse ``Key: value`` lines. Blank lines are skipped; a line without a key
    and value, or a non-numeric value for ED/ES/NbFrame/Height/Weight, raises
    InfoCfgParseError naming the line.
    """
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            key, sep, value = line.partition(":")
            key, value = key.strip(), value.strip()
            if not sep or not key or not value:
                raise InfoCfgParseError(number, raw.rstrip("\n"))
            if key in _NUMERIC_KEYS:
                try:
                    _NUMERIC_KEYS[key](value)
                except ValueError:
                    raise InfoCfgParseError(number, raw.rstrip("\n"), reason=f"{key} is not a number") from None
            values[key] = value
    return values


def _cfg_number(cfg: Mapping[str, str], key: str) -> Optional[Any]:
    return _NUMERIC_KEYS[key](cfg[key]) if key in cfg else None


def _find_nifti(directory: Path, stem: str) -> Optional[Path]:
    for suffix in (".nii.gz", ".nii"):
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


def load_acdc_case(directory: Union[str, Path], frame_base: int = 0) -> Tuple[CineStudy, List[Tuple[int, LabelMap]]]:
    """
    Load ``<case>/<case>_4d.nii[.gz]``, ``Info.cfg`` and any ``<case>_frameNN_gt`` files.

    Args:
        directory: The case directory; its name is the case id.
        frame_base: Number of the first frame in Info.cfg and file names
            (0 for this pipeline's phantoms, 1 for the public ACDC release).

    Returns:
        The cine study and the ground-truth ``(frame_index, LabelMap)`` pairs sorted by frame.
    """
    directory = Path(directory)
    case_id = directory.name
    if not directory.is_dir():
        raise CaseNotFoundError(f"case directory not found: {directory}")
    cine_path = _find_nifti(directory, f"{case_id}_4d")
    if cine_path is None:
        raise CaseNotFoundError(f"case {case_id}: missing cine file {case_id}_4d.nii.gz")

    cfg_path = directory / "Info.cfg"
    cfg = read_info_cfg(cfg_path) if cfg_path.exists() else {}
    if not cfg:
        logger.warning("case %s: no Info.cfg metadata", case_id)

    ed = _cfg_number(cfg, "ED")
    es = _cfg_number(cfg, "ES")
    height_cm = _cfg_number(cfg, "Height")
    weight = _cfg_number(cfg, "Weight")

    study = volume_to_study(
        read_nifti(cine_path),
        case_id,
        height_m=height_cm / 100.0 if height_cm is not None else None,
        weight_kg=weight,
        ed_frame=ed - frame_base if ed is not None else None,
        es_frame=es - frame_base if es is not None else None,
        metadata={k: v for k, v in cfg.items() if k not in ("ED", "ES", "Height", "Weight")},
    )
    nb_frame = _cfg_number(cfg, "NbFrame")
    if nb_frame is not None and nb_frame != study.n_frames:
        logger.warning("case %s: NbFrame=%s but cine has %d frames", case_id, nb_frame, study.n_frames)

    truth: List[Tuple[int, LabelMap]] = []
    for path in sorted(directory.iterdir()):
        match = _FRAME_FILE.search(path.name)
        if not match or not match.group(2) or not path.name.startswith(f"{case_id}_frame"):
            continue
        frame = int(match.group(1)) - frame_base
        if not 0 <= frame < study.n_frames:
            raise ConsistencyError(f"case {case_id}: ground truth {path.name} names frame {frame} outside the cine")
        label_map = volume_to_label_map(read_nifti(path), frame)
        if label_map.shape != study.frame_shape:
            raise ConsistencyError(
                f"case {case_id}: {path.name} dims {label_map.shape} do not match cine dims {study.frame_shape}"
            )
        truth.append((frame, label_map))
    truth.sort(key=lambda item: item[0])
    logger.info("Loaded case %s: %d frames, %d ground-truth frames", case_id, study.n_frames, len(truth))
    return study, truth


def frame_file_name(case_id: str, frame: int, suffix: str = "", frame_base: int = 0) -> str:
    return f"{case_id}_frame{frame + frame_base:02d}{suffix}.nii.gz"


def write_case(
    root: Union[str, Path],
    study: CineStudy,
    ground_truth: Mapping[int, LabelMap],
    extra_info: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write ``study`` and its ground truth as an ACDC-style case directory under ``root``."""
    case_dir = Path(root) / study.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    write_nifti(case_dir / f"{study.case_id}_4d.nii.gz", study.intensities, study.spacing, datatype=16)
    for frame, label_map in sorted(ground_truth.items()):
        frame_spacing = VoxelSpacing(study.spacing.dx, study.spacing.dy, study.spacing.dz, 0.0)
        write_nifti(case_dir / frame_file_name(study.case_id, frame), study.intensities[frame], frame_spacing)
        write_label_nifti(label_map, case_dir / frame_file_name(study.case_id, frame, "_gt"))

    lines = []
    if study.ed_frame is not None:
        lines.append(f"ED: {study.ed_frame}")
    if study.es_frame is not None:
        lines.append(f"ES: {study.es_frame}")
    for key, value in (extra_info or {}).items():
        lines.append(f"{key}: {value}")
    if study.height_m is not None:
        lines.append(f"Height: {study.height_m * 100.0:.1f}")
    lines.append(f"NbFrame: {study.n_frames}")
    if study.weight_kg is not None:
        lines.append(f"Weight: {study.weight_kg:.1f}")
    with open(case_dir / "Info.cfg", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return case_dir


def list_case_dirs(root: Union[str, Path]) -> List[Path]:
    """Case directories directly under ``root`` (or ``root`` itself when it is a case)."""
    root = Path(root)
    if _find_nifti(root, f"{root.name}_4d") is not None:
        return [root]
    cases = [p for p in sorted(root.iterdir()) if p.is_dir() and _find_nifti(p, f"{p.name}_4d") is not None]
    if not cases:
        raise CaseNotFoundError(f"no case directories under {root}")
    return cases


# --- Reports ---

TABLE_COLUMNS = ["Metric", "Manual", "AI", "p", "r", "Bland-Altman"]
CROSS_TRAINING_COLUMNS = ["Metric", "Manual", "AI (A)", "r (A)", "AI (B)", "r (B)"]
ERROR_COLUMNS = ["Metric", "AI - Manual", "Interobserver", "Within interobserver"]
METRIC_COLUMNS = [
    "case_id", "ed_frame", "es_frame",
    "lv_edv", "lv_esv", "lvef", "rv_edv", "rv_esv", "rvef", "lv_mass",
    "bmi", "lv_edv_index", "lv_esv_index", "rv_edv_index", "rv_esv_index", "lv_mass_index",
]
UNITS = {
    "lv_edv": "mL", "lv_esv": "mL", "rv_edv": "mL", "rv_esv": "mL",
    "lvef": "%", "rvef": "%", "lv_mass": "g", "bmi": "kg/m^2",
}
UNITS_NOTE = "Volumes are in mL; the source tables label them [mm]."
P_DISPLAY_FLOOR = 0.001


def format_number(value: Optional[float], decimals: int = 2) -> str:
    if value is None or not np.isfinite(value):
        return ""
    return f"{value:.{decimals}f}"


def format_p(p: Optional[float]) -> str:
    """Render p with three decimals, clamped to ``<0.001`` below that."""
    if p is None or not np.isfinite(p):
        return ""
    if p < P_DISPLAY_FLOOR:
        return "<0.001"
    return f"{p:.3f}"


def format_mean_sd(mean: Optional[float], sd: Optional[float]) -> str:
    if mean is None:
        return ""
    if sd is None:
        return format_number(mean)
    return f"{format_number(mean)} ± {format_number(sd)}"


def format_bland_altman(bias: Optional[float], low: Optional[float], high: Optional[float]) -> str:
    if bias is None or low is None or high is None:
        return ""
    return f"{format_number(bias)} ({format_number(low)} to {format_number(high)})"


def table_row_cells(row: "ConcordanceRow") -> Dict[str, str]:
    return {
        "Metric": row.metric_name,
        "Manual": format_mean_sd(row.manual_mean, row.manual_sd),
        "AI": format_mean_sd(row.auto_mean, row.auto_sd),
        "p": format_p(row.p),
        "r": format_number(row.r),
        "Bland-Altman": format_bland_altman(row.bias, row.loa_low, row.loa_high),
    }


def cross_training_cells(row: "CrossTrainingRow") -> Dict[str, str]:
    return {
        "Metric": row.metric_name,
        "Manual": format_mean_sd(row.manual_mean, row.manual_sd),
        "AI (A)": format_mean_sd(row.auto_a_mean, row.auto_a_sd),
        "r (A)": format_number(row.r_a),
        "AI (B)": format_mean_sd(row.auto_b_mean, row.auto_b_sd),
        "r (B)": format_number(row.r_b),
    }


def error_cells(summary: "ErrorSummary") -> Dict[str, str]:
    return {
        "Metric": summary.metric_name,
        "AI - Manual": format_mean_sd(summary.mean_error, summary.sd_error),
        "Interobserver": format_mean_sd(*summary.reference),
        "Within interobserver": "yes" if summary.within_reference else "no",
    }


def _round(value: Any, decimals: int = 2) -> Any:
    if isinstance(value, (float, np.floating)):
        return round(float(value), decimals) if np.isfinite(value) else None
    return value


def metrics_frame(metrics: Sequence["ClinicalMetrics"]) -> pd.DataFrame:
    records = [{k: _round(v) for k, v in m.to_record().items()} for m in metrics]
    return pd.DataFrame(records, columns=METRIC_COLUMNS)


def write_metrics(metrics: Sequence["ClinicalMetrics"], destination: Union[str, Path], fmt: str = "csv") -> Path:
    """Write per-case clinical metrics (one row per study)."""
    destination = Path(destination)
    _ensure_writable(destination)
    if fmt == "csv":
        df = metrics_frame(metrics)
        _write_text(destination, df.to_csv(index=False, float_format="%.2f", lineterminator="\n"))
    elif fmt == "json":
        payload = {
            "units": UNITS,
            "note": UNITS_NOTE,
            "cases": [{k: _round(v) for k, v in m.to_record().items()} for m in metrics],
            "metadata": {"generated_at": datetime.now(timezone.utc).isoformat()},
        }
        _write_text(destination, json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
    logger.info("Wrote %d case metrics to %s", len(metrics), destination)
    return destination


def write_report(
    metrics: Sequence["ClinicalMetrics"],
    table: Sequence["ConcordanceRow"],
    destination: Union[str, Path],
    fmt: str = "csv",
    cross_training: Sequence["CrossTrainingRow"] = (),
    errors: Sequence["ErrorSummary"] = (),
) -> Path:
    """
    Write a concordance report.

    CSV: ``destination`` holds the table (columns Metric, Manual, AI, p, r,
    Bland-Altman; header only when empty). Non-empty extras go next to it:
    ``<stem>_cases.csv`` (per-case metrics), ``<stem>_cross_training.csv``
    (Manual, AI and r for two automatic runs) and ``<stem>_errors.csv``
    (automatic error against the interobserver reference).
    JSON: a single document with ``concordance``, ``cross_training``,
    ``error_summary``, ``cases``, units and a ``metadata.generated_at``
    timestamp (the only non-deterministic field).
    """
    destination = Path(destination)
    _ensure_writable(destination)
    if fmt == "csv":
        df = pd.DataFrame([table_row_cells(row) for row in table], columns=TABLE_COLUMNS)
        _write_text(destination, df.to_csv(index=False, lineterminator="\n"))
        if metrics:
            write_metrics(metrics, destination.with_name(f"{destination.stem}_cases.csv"), "csv")
        if cross_training:
            df = pd.DataFrame([cross_training_cells(row) for row in cross_training], columns=CROSS_TRAINING_COLUMNS)
            _write_text(destination.with_name(f"{destination.stem}_cross_training.csv"), df.to_csv(index=False, lineterminator="\n"))
        if errors:
            df = pd.DataFrame([error_cells(s) for s in errors], columns=ERROR_COLUMNS)
            _write_text(destination.with_name(f"{destination.stem}_errors.csv"), df.to_csv(index=False, lineterminator="\n"))
    elif fmt == "json":
        payload = {
            "units": UNITS,
            "note": UNITS_NOTE,
            "concordance": [
                {**{k: _round(v, 3 if k == "p" else 2) for k, v in row.to_record().items()}, "cells": table_row_cells(row)}
                for row in table
            ],
            "cross_training": [
                {**{k: _round(v) for k, v in asdict(row).items()}, "cells": cross_training_cells(row)} for row in cross_training
            ],
            "error_summary": [
                {**{k: _round(v) for k, v in asdict(s).items()}, "cells": error_cells(s)} for s in errors
            ],
            "cases": [{k: _round(v) for k, v in m.to_record().items()} for m in metrics],
            "metadata": {"generated_at": datetime.now(timezone.utc).isoformat()},
        }
        _write_text(destination, json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
    logger.info("Wrote concordance report (%d rows) to %s", len(table), destination)
    return destination


_MEAN_SD = re.compile(r"^\s*(-?[\d.]+)\s*±\s*(-?[\d.]+)\s*$")
_BA = re.compile(r"^\s*(-?[\d.]+)\s*\(\s*(-?[\d.]+)\s+to\s+(-?[\d.]+)\s*\)\s*$")


def _parse_float(cell: Any) -> Optional[float]:
    if cell is None or (isinstance(cell, float) and np.isnan(cell)) or str(cell).strip() == "":
        return None
    return float(cell)


def read_report_csv(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Parse a table written by :func:`write_report` back into numbers."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(df.columns) != TABLE_COLUMNS:
        raise ValidationError(f"{path}: unexpected header {list(df.columns)}")
    rows: List[Dict[str, Any]] = []
    for rec in df.to_dict("records"):
        row: Dict[str, Any] = {"metric_name": rec["Metric"]}
        for side, cell in (("manual", rec["Manual"]), ("auto", rec["AI"])):
            m = _MEAN_SD.match(cell)
            row[f"{side}_mean"] = float(m.group(1)) if m else _parse_float(cell)
            row[f"{side}_sd"] = float(m.group(2)) if m else None
        p_cell = rec["p"].strip()
        row["p"] = 0.0 if p_cell.startswith("<") else _parse_float(p_cell)
        row["r"] = _parse_float(rec["r"])
        ba = _BA.match(rec["Bland-Altman"])
        row["bias"], row["loa_low"], row["loa_high"] = (
            (float(ba.group(1)), float(ba.group(2)), float(ba.group(3))) if ba else (None, None, None)
        )
        rows.append(row)
    return rows


def read_metrics_csv(path: Union[str, Path]) -> pd.DataFrame:
    """Read a per-case metrics CSV written by :func:`write_metrics`, indexed by case id."""
    path = Path(path)
    if not path.exists():
        raise CaseNotFoundError(f"metrics file not found: {path}")
    df = pd.read_csv(path, dtype={"case_id": str})
    return _metrics_index(df, path)


def _metrics_index(df: pd.DataFrame, path: Path) -> pd.DataFrame:
    missing = [c for c in ("case_id", "lv_edv", "lv_esv", "rv_edv", "rv_esv", "lvef", "rvef", "lv_mass") if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    return df.set_index("case_id")


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    """Read per-case metrics in either format :func:`write_metrics` produces (by suffix)."""
    path = Path(path)
    if path.suffix.lower() != ".json":
        return read_metrics_csv(path)
    if not path.exists():
        raise CaseNotFoundError(f"metrics file not found: {path}")
    try:
        cases = json.loads(path.read_text(encoding="utf-8"))["cases"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: not a metrics document ({exc})") from exc
    df = _metrics_index(pd.DataFrame.from_records(cases), path)
    df.index = df.index.astype(str)
    return df


def read_manual_times_csv(path: Union[str, Path]) -> pd.Series:
    """Manual quantification times, schema ``case_id, seconds``."""
    df = pd.read_csv(path, dtype={"case_id": str})
    if "case_id" not in df.columns or "seconds" not in df.columns:
        raise ValidationError(f"{path}: expected columns case_id, seconds")
    seconds = pd.to_numeric(df["seconds"], errors="coerce")
    if seconds.isna().any():
        raise ValidationError(f"{path}: non-numeric seconds")
    return pd.Series(seconds.to_numpy(dtype=float), index=df["case_id"], name="seconds")


def _ensure_writable(destination: Path) -> None:
    parent = destination.parent if str(destination.parent) else Path(".")
    parent.mkdir(parents=True, exist_ok=True)
    if not os.access(parent, os.W_OK) or (destination.exists() and not os.access(destination, os.W_OK)):
        raise OSError(f"destination not writable: {destination}")


def _write_text(destination: Path, text: str) -> None:
    with open(destination, "w", encoding="utf-8", newline="") as f:
        f.write(text)
