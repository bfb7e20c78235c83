"""
FGADSMAP containers and PGM dumps.
"""

import json

import numpy as np
import pytest

from detector.core import ScoreMap
from detector.encoder import FeatureFormatError
from detector.exports import (
    SMAP_HEADER,
    load_score_map,
    parse_score_map_bytes,
    read_pgm,
    save_score_map,
    score_map_bytes,
    write_region_pgm,
    write_score_pgm,
)


def _map() -> ScoreMap:
    return ScoreMap(np.linspace(0.0, 1.0, 12).reshape(3, 4))


def test_score_map_file(tmp_path):
    path = tmp_path / "maps" / "q0.fgadsmap"
    save_score_map(_map(), path)
    loaded = load_score_map(path)
    assert loaded.shape == (3, 4)
    np.testing.assert_array_equal(loaded.scores, _map().scores.astype(np.float32).astype(np.float64))
    assert not list(path.parent.glob("*.tmp"))


def test_score_map_errors_name_the_field():
    data = score_map_bytes(_map())

    def field_of(blob) -> str:
        with pytest.raises(FeatureFormatError) as exc_info:
            parse_score_map_bytes(bytes(blob))
        return exc_info.value.field

    assert field_of(data[:5]) == "header"
    assert field_of(b"XXXXXXXX" + data[8:]) == "magic"
    assert field_of(data[:8] + (9).to_bytes(4, "little") + data[12:]) == "version"
    assert field_of(data[:12] + (0).to_bytes(4, "little") + data[16:]) == "h"
    assert field_of(data + b"\x00") == "length"
    out_of_range = bytearray(data)
    out_of_range[SMAP_HEADER.size:SMAP_HEADER.size + 4] = np.array([1.5], dtype="<f4").tobytes()
    assert field_of(out_of_range) == "payload"


def test_score_pgm_with_bounds(tmp_path):
    path = tmp_path / "m.pgm"
    bounds = write_score_pgm(_map(), path)
    assert bounds == {"min": 0.0, "max": 1.0}
    gray = read_pgm(path)
    assert gray.shape == (3, 4)
    assert gray[0, 0] == 0 and gray[-1, -1] == 255
    assert json.loads((tmp_path / "m.pgm.json").read_text(encoding="utf-8")) == bounds


def test_constant_map_is_black(tmp_path):
    write_score_pgm(ScoreMap(np.full((2, 2), 0.3)), tmp_path / "c.pgm")
    assert not np.any(read_pgm(tmp_path / "c.pgm"))


def test_region_pgm(tmp_path):
    labels = np.array([[0, 1], [2, 3]])
    write_region_pgm(labels, 3, tmp_path / "r.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "r.pgm"), [[0, 85], [170, 255]])


def test_read_pgm_rejects_other_formats(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FeatureFormatError):
        read_pgm(path)
