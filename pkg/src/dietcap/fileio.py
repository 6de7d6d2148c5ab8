"""On-disk formats: PFM depth maps, PGM masks, PPM images, xyz point lists.

Depth maps are grayscale PFM ("Pf"): rows stored bottom-to-top, a negative
scale marks little-endian, values are meters as float32. Masks are binary
PGM (P5, maxval 255, nonzero = container). RGB frames are PPM (P6). Writers
are byte-deterministic so replay runs can be compared with cmp/sha256.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FileFormatError


def write_pfm(path: str | Path, depth: np.ndarray) -> None:
    d = np.asarray(depth, dtype=np.float32)
    if d.ndim != 2:
        raise FileFormatError(f"depth must be 2-D, got shape {d.shape}")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale: little-endian
        fh.write(np.flipud(d).astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise FileFormatError(f"{path}: expected grayscale PFM magic 'Pf', got {magic!r}")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise FileFormatError(f"{path}: bad PFM dimension line {dims!r}")
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        if scale == 0.0:
            raise FileFormatError(f"{path}: PFM scale must be nonzero")
        raw = fh.read(w * h * 4)
        if len(raw) != w * h * 4:
            raise FileFormatError(f"{path}: truncated PFM payload")
    endian = "<f4" if scale < 0 else ">f4"
    d = np.frombuffer(raw, dtype=endian).reshape(h, w).astype(np.float32)
    return np.flipud(d).copy()


def _read_pnm_header(fh, magic: bytes, path) -> tuple[int, int]:
    got = fh.readline().strip()
    if got != magic:
        raise FileFormatError(f"{path}: expected {magic.decode()}, got {got!r}")
    fields: list[bytes] = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise FileFormatError(f"{path}: truncated header")
        fields.extend(line.split(b"#")[0].split())
    w, h, maxval = (int(x) for x in fields[:3])
    if maxval != 255:
        raise FileFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    return w, h


def write_pgm(path: str | Path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise FileFormatError(f"mask must be 2-D, got shape {m.shape}")
    data = np.where(m != 0, 255, 0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Binary mask: True where the stored byte is nonzero."""
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P5", path)
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise FileFormatError(f"{path}: truncated PGM payload")
    return (np.frombuffer(raw, dtype=np.uint8).reshape(h, w) != 0)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    im = np.asarray(image)
    if im.ndim != 3 or im.shape[2] != 3:
        raise FileFormatError(f"image must be [H, W, 3], got shape {im.shape}")
    data = np.clip(im, 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P6", path)
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise FileFormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def write_points_xyz(path: str | Path, points: np.ndarray) -> None:
    """One 'x y z' line per point, %.17g so the round trip is exact."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise FileFormatError(f"points must be [N, 3], got shape {p.shape}")
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in p:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_points_xyz(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise FileFormatError(f"{path}:{lineno}: expected 3 columns, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as e:
                raise FileFormatError(f"{path}:{lineno}: {e}") from e
    if not rows:
        raise FileFormatError(f"{path}: no points")
    return np.asarray(rows, dtype=np.float64)


def dump_json(path: str | Path, obj) -> None:
    """Canonical JSON: sorted keys, fixed separators, trailing newline."""
    text = json.dumps(obj, sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: invalid JSON ({e})") from e
