"""Float maps (PFM), 8-bit previews and 16-bit label images."""

from __future__ import annotations

import io
import logging
import re
from pathlib import Path

import imageio.v2 as imageio
import numpy as np

from core.ledger import atomic_write_bytes
from core.validator import DataError, require_file

logger = logging.getLogger(__name__)

PREVIEW_GAMMA = 2.2
_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(-?[0-9.eE+-]+)\s", re.ASCII)


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a PFM file as (H, W, C) float64, top row first.

    Either byte order is accepted (negative scale means little-endian).
    """
    pfm_path = require_file(path, "float map")
    payload = pfm_path.read_bytes()
    match = _PFM_HEADER.match(payload)
    if match is None:
        raise DataError(f"{pfm_path}: not a PFM file")
    channels = 3 if match.group(1) == b"PF" else 1
    width, height = int(match.group(2)), int(match.group(3))
    scale = float(match.group(4))
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    count = width * height * channels
    if len(payload) - match.end() < count * dtype.itemsize:
        raise DataError(f"{pfm_path}: truncated PFM payload")
    data = np.frombuffer(payload, dtype=dtype, count=count, offset=match.end())
    image = data.reshape(height, width, channels)[::-1]
    return image.astype(np.float64)


def encode_pfm(image: np.ndarray) -> bytes:
    array = np.asarray(image, dtype=np.float64)
    if array.ndim == 2:
        array = array[:, :, None]
    height, width, channels = array.shape
    if channels not in (1, 3):
        raise DataError(f"PFM supports 1 or 3 channels, got {channels}")
    header = f"{'PF' if channels == 3 else 'Pf'}\n{width} {height}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(array[::-1].astype("<f4")).tobytes()
    return header + body


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """Write a little-endian PFM, rows stored bottom-to-top."""
    atomic_write_bytes(path, encode_pfm(image))


def to_preview(image: np.ndarray, gamma: float = PREVIEW_GAMMA) -> np.ndarray:
    array = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** (1.0 / gamma)
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[:, :, 0]
    return np.round(array * 255.0).astype(np.uint8)


def write_preview(path: str | Path, image: np.ndarray, gamma: float = PREVIEW_GAMMA) -> None:
    """8-bit gamma-encoded PNG beside a float map."""
    buffer = io.BytesIO()
    imageio.imwrite(buffer, to_preview(image, gamma), format="png")
    atomic_write_bytes(path, buffer.getvalue())


def write_map(path: str | Path, image: np.ndarray) -> None:
    """PFM plus a .png preview with the same stem."""
    pfm_path = Path(path)
    write_pfm(pfm_path, image)
    write_preview(pfm_path.with_suffix(".png"), image)


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    """16-bit grayscale PNG label image."""
    array = np.asarray(labels)
    if array.ndim == 3:
        array = array[:, :, 0]
    if array.size and (array.min() < 0 or array.max() > np.iinfo(np.uint16).max):
        raise DataError(f"{path}: label values must fit in 16 bits")
    buffer = io.BytesIO()
    imageio.imwrite(buffer, array.astype(np.uint16), format="png")
    atomic_write_bytes(path, buffer.getvalue())


def read_labels(path: str | Path) -> np.ndarray:
    """Read a label PNG as an (H, W) int64 array."""
    label_path = require_file(path, "label image")
    try:
        array = np.asarray(imageio.imread(label_path))
    except (OSError, ValueError) as exc:
        raise DataError(f"{label_path}: unreadable label image") from exc
    if array.ndim == 3:
        array = array[:, :, 0]
    return array.astype(np.int64)
