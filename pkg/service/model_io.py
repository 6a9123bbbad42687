"""
CDIQ parameter files.

Layout (little-endian):
    magic       4 bytes   b"CDIQ"
    version     uint16
    meta_len    uint32
    meta        meta_len bytes of UTF-8 JSON (hyperparams, loss histories)
    count       uint32
    count x [rank uint32][extents rank x uint32][values float64]

Tensors are written in ``param_layout`` order, so names are not stored.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from service.errors import ModelFormatError
from service.segnet import NetworkParams, param_layout

logger = logging.getLogger(__name__)

MAGIC = b"CDIQ"
FORMAT_VERSION = 1
_U2 = np.dtype("<u2")
_U4 = np.dtype("<u4")
_F8 = np.dtype("<f8")


def encode_params(params: NetworkParams) -> bytes:
    layout = param_layout(params.hyperparams)
    missing = [name for name, _ in layout if name not in params.tensors]
    if missing:
        raise ModelFormatError(f"parameters are missing tensors: {missing[:3]}")
    meta = json.dumps(
        {
            "hyperparams": params.hyperparams,
            "loss_history": params.loss_history,
            "roi_loss_history": params.roi_loss_history,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts: List[bytes] = [
        MAGIC,
        np.array([FORMAT_VERSION], dtype=_U2).tobytes(),
        np.array([len(meta)], dtype=_U4).tobytes(),
        meta,
        np.array([len(layout)], dtype=_U4).tobytes(),
    ]
    for name, shape in layout:
        tensor = np.asarray(params.tensors[name], dtype=np.float64)
        if tensor.shape != shape:
            raise ModelFormatError(f"{name}: shape {tensor.shape} does not match the architecture {shape}")
        parts.append(np.array([tensor.ndim, *tensor.shape], dtype=_U4).tobytes())
        parts.append(tensor.astype(_F8).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"file truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def array(self, dtype: np.dtype, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(dtype.itemsize * count, what), dtype=dtype, count=count)


def decode_params(data: bytes) -> NetworkParams:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise ModelFormatError("not a CDIQ parameter file (bad magic)")
    version = int(reader.array(_U2, 1, "version")[0])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported CDIQ format version {version} (expected {FORMAT_VERSION})")
    meta_len = int(reader.array(_U4, 1, "metadata length")[0])
    try:
        meta: Dict[str, Any] = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
        hyperparams = meta["hyperparams"]
    except (ValueError, KeyError) as e:
        raise ModelFormatError(f"unreadable metadata block: {e}") from e

    try:
        layout: List[Tuple[str, Tuple[int, ...]]] = param_layout(hyperparams)
    except (TypeError, ValueError) as e:
        raise ModelFormatError(f"inconsistent hyperparameters: {e}") from e
    count = int(reader.array(_U4, 1, "tensor count")[0])
    if count != len(layout):
        raise ModelFormatError(f"file holds {count} tensors, architecture needs {len(layout)}")
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in layout:
        rank = int(reader.array(_U4, 1, f"{name} rank")[0])
        extents = tuple(int(e) for e in reader.array(_U4, rank, f"{name} extents"))
        if extents != shape:
            raise ModelFormatError(f"{name}: stored shape {extents} does not match the architecture {shape}")
        values = reader.array(_F8, int(np.prod(extents, dtype=np.int64)), f"{name} values")
        if not np.all(np.isfinite(values)):
            raise ModelFormatError(f"{name}: non-finite values")
        tensors[name] = values.astype(np.float64).reshape(extents)
    if reader.pos != len(data):
        raise ModelFormatError(f"{len(data) - reader.pos} trailing bytes after the last tensor")
    return NetworkParams(
        tensors=tensors,
        hyperparams=hyperparams,
        loss_history=list(meta.get("loss_history", [])),
        roi_loss_history=list(meta.get("roi_loss_history", [])),
    )


def save_params(params: NetworkParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_params(params))
    logger.info("Saved %d tensors to %s", len(params.tensors), path)
    return path


def load_params(path: Union[str, Path]) -> NetworkParams:
    params = decode_params(Path(path).read_bytes())
    logger.info("Loaded network parameters from %s", path)
    return params
