"""Round-trip and malformed-input coverage for the on-disk formats."""

import numpy as np
import pytest

from dietcap.errors import FileFormatError
from dietcap.fileio import (
    dump_json,
    load_json,
    read_pfm,
    read_pgm,
    read_points_xyz,
    read_ppm,
    write_pfm,
    write_pgm,
    write_points_xyz,
    write_ppm,
)


def test_pfm_round_trip_exact(tmp_path):
    rng = np.random.default_rng(3)
    depth = (0.07 + 0.4 * rng.random((9, 13))).astype(np.float32)
    p = tmp_path / "d.pfm"
    write_pfm(p, depth)
    assert np.array_equal(read_pfm(p), depth)


def test_pfm_header_and_row_order(tmp_path):
    depth = np.arange(6, dtype=np.float32).reshape(2, 3)
    p = tmp_path / "d.pfm"
    write_pfm(p, depth)
    raw = p.read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    payload = raw[len(b"Pf\n3 2\n-1.0\n"):]
    # bottom row of the image comes first in the file
    first_row = np.frombuffer(payload[:12], dtype="<f4")
    assert np.array_equal(first_row, depth[1])


def test_pfm_big_endian_scale(tmp_path):
    depth = np.array([[0.25, 0.5]], dtype=np.float32)
    p = tmp_path / "be.pfm"
    with open(p, "wb") as fh:
        fh.write(b"Pf\n2 1\n1.0\n")
        fh.write(depth.astype(">f4").tobytes())
    assert np.array_equal(read_pfm(p), depth)


def test_pfm_write_is_deterministic(tmp_path):
    depth = np.random.default_rng(0).random((4, 4)).astype(np.float32)
    a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
    write_pfm(a, depth)
    write_pfm(b, read_pfm(a))
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("content", [
    b"P5\n2 1\n255\n" + bytes(2),          # wrong magic for a depth map
    b"Pf\n2 1\n0.0\n" + bytes(8),          # zero scale
    b"Pf\n2\n-1.0\n" + bytes(8),           # bad dimension line
    b"Pf\n2 2\n-1.0\n" + bytes(4),         # truncated payload
])
def test_pfm_malformed(tmp_path, content):
    p = tmp_path / "bad.pfm"
    p.write_bytes(content)
    with pytest.raises(FileFormatError):
        read_pfm(p)


def test_pgm_round_trip_bool(tmp_path):
    mask = np.array([[0, 1, 0], [1, 1, 0]], dtype=bool)
    p = tmp_path / "m.pgm"
    write_pgm(p, mask)
    out = read_pgm(p)
    assert out.dtype == np.bool_
    assert np.array_equal(out, mask)


def test_pgm_canonicalizes_nonzero_to_255(tmp_path):
    p = tmp_path / "m.pgm"
    write_pgm(p, np.array([[0, 7], [200, 0]]))
    raw = p.read_bytes()
    assert raw == b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0])


def test_pgm_header_comment_and_split_lines(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P5\n# made by hand\n3\n1 255\n" + bytes([0, 255, 3]))
    assert np.array_equal(read_pgm(p), np.array([[False, True, True]]))


@pytest.mark.parametrize("content", [
    b"P6\n2 1\n255\n" + bytes(6),            # PPM magic on a mask read
    b"P5\n2 1\n65535\n" + bytes(4),          # unsupported maxval
    b"P5\n2 2\n255\n" + bytes(3),            # truncated payload
    b"P5\n2",                                # truncated header
])
def test_pgm_malformed(tmp_path, content):
    p = tmp_path / "bad.pgm"
    p.write_bytes(content)
    with pytest.raises(FileFormatError):
        read_pgm(p)


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    image = rng.integers(0, 256, size=(6, 4, 3), dtype=np.uint8)
    p = tmp_path / "f.ppm"
    write_ppm(p, image)
    assert np.array_equal(read_ppm(p), image)


def test_ppm_clips_out_of_range(tmp_path):
    p = tmp_path / "f.ppm"
    write_ppm(p, np.array([[[-3.0, 128.0, 300.0]]]))
    assert np.array_equal(read_ppm(p), np.array([[[0, 128, 255]]], dtype=np.uint8))


def test_ppm_shape_rejected(tmp_path):
    with pytest.raises(FileFormatError):
        write_ppm(tmp_path / "f.ppm", np.zeros((4, 4)))


def test_xyz_round_trip_exact_binary64(tmp_path):
    rng = np.random.default_rng(11)
    pts = np.column_stack([
        rng.standard_normal(20) * 1e-7,
        rng.standard_normal(20) * 1e4,
        rng.standard_normal(20),
    ])
    p = tmp_path / "cloud.xyz"
    write_points_xyz(p, pts)
    assert np.array_equal(read_points_xyz(p), pts)


def test_xyz_skips_blank_lines(tmp_path):
    p = tmp_path / "cloud.xyz"
    p.write_text("0 0 0\n\n1 2 3\n")
    assert read_points_xyz(p).shape == (2, 3)


@pytest.mark.parametrize("text", ["1 2\n", "a b c\n", ""])
def test_xyz_malformed(tmp_path, text):
    p = tmp_path / "bad.xyz"
    p.write_text(text)
    with pytest.raises(FileFormatError):
        read_points_xyz(p)


def test_xyz_rewrite_byte_identical(tmp_path):
    pts = np.random.default_rng(2).standard_normal((15, 3))
    a, b = tmp_path / "a.xyz", tmp_path / "b.xyz"
    write_points_xyz(a, pts)
    write_points_xyz(b, read_points_xyz(a))
    assert a.read_bytes() == b.read_bytes()


def test_json_canonical_form(tmp_path):
    p = tmp_path / "r.json"
    dump_json(p, {"zeta": 1, "alpha": [1, 2]})
    text = p.read_text()
    assert text == '{\n  "alpha": [\n    1,\n    2\n  ],\n  "zeta": 1\n}\n'
    assert load_json(p) == {"zeta": 1, "alpha": [1, 2]}


def test_json_key_order_independent_bytes(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    dump_json(a, {"x": 1, "y": 2})
    dump_json(b, {"y": 2, "x": 1})
    assert a.read_bytes() == b.read_bytes()


def test_json_invalid_rejected(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(FileFormatError):
        load_json(p)
