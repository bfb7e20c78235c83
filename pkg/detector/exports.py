"""
Score-map and region-map exports: FGADSMAP containers and 8-bit PGM dumps.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from detector.core import ScoreMap
from detector.encoder import FeatureFormatError

logger = logging.getLogger(__name__)

SMAP_MAGIC = b"FGADSMAP"
SMAP_VERSION = 1
SMAP_HEADER = struct.Struct("<8s3I")  # magic, version, h, w


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    tmp.replace(path)


def score_map_bytes(score_map: ScoreMap) -> bytes:
    h, w = score_map.shape
    return SMAP_HEADER.pack(SMAP_MAGIC, SMAP_VERSION, h, w) + score_map.scores.astype("<f4").tobytes()


def save_score_map(score_map: ScoreMap, path: Union[str, Path]) -> None:
    """Raw f32 grid in the FGADSMAP container."""
    _atomic_write(Path(path), score_map_bytes(score_map))


def parse_score_map_bytes(data: bytes) -> ScoreMap:
    """
    Raises:
        FeatureFormatError: Naming the offending header field
    """
    if len(data) < SMAP_HEADER.size:
        raise FeatureFormatError("header", f"truncated: {len(data)} bytes < {SMAP_HEADER.size}")
    magic, version, h, w = SMAP_HEADER.unpack_from(data, 0)
    if magic != SMAP_MAGIC:
        raise FeatureFormatError("magic", f"expected {SMAP_MAGIC!r}, got {magic!r}")
    if version != SMAP_VERSION:
        raise FeatureFormatError("version", f"unsupported version {version}")
    if h == 0 or w == 0:
        raise FeatureFormatError("h" if h == 0 else "w", "empty map")
    expected = SMAP_HEADER.size + 4 * h * w
    if len(data) != expected:
        raise FeatureFormatError("length", f"expected {expected} bytes for {h}x{w}, got {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=SMAP_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1:
        raise FeatureFormatError("payload", "scores must be finite and within [0, 1]")
    return ScoreMap(values.reshape(h, w))


def load_score_map(path: Union[str, Path]) -> ScoreMap:
    with open(path, "rb") as f:
        return parse_score_map_bytes(f.read())


def pgm_bytes(gray: np.ndarray) -> bytes:
    """Binary (P5) 8-bit PGM."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Reads a P5 PGM written by pgm_bytes."""
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FeatureFormatError("magic", "not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w).reshape(h, w)


def write_score_pgm(score_map: ScoreMap, path: Union[str, Path]) -> Dict[str, float]:
    """
    Min-max normalized PGM plus a sidecar JSON (<path>.json) with the bounds.

    Returns:
        The bounds written to the sidecar
    """
    s = score_map.scores
    lo, hi = float(s.min()), float(s.max())
    span = hi - lo
    gray = np.zeros(s.shape) if span == 0 else (s - lo) / span
    path = Path(path)
    _atomic_write(path, pgm_bytes(np.round(gray * 255)))
    bounds = {"min": lo, "max": hi}
    _atomic_write(path.with_name(path.name + ".json"), (json.dumps(bounds, sort_keys=True, indent=2) + "\n").encode())
    return bounds


def write_region_pgm(labels: np.ndarray, num_components: int, path: Union[str, Path]) -> None:
    """Region labels as evenly spaced gray levels (background black)."""
    step = 255 // max(num_components, 1)
    _atomic_write(Path(path), pgm_bytes(np.asarray(labels) * step))
