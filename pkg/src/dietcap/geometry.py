"""Depth-to-volume geometry: projection, denoising, convex hulls.

The reconstruction chain is deliberately simple: back-project masked depth
pixels through the pinhole model, drop depth outliers with a median/MAD
gate, take the convex hull of what remains, and read off its volume. Bowls
and cups are convex containers, so the hull of the interior surface is the
capacity we are after.

The hull is an incremental quickhull. Points that end up within ``eps`` of
every facet during repartitioning get one exact re-check against the whole
facet list before being discarded, which keeps symmetric inputs (cube
corners, gridded scans) from losing true vertices to coplanarity ties.
All hull math runs in float64 regardless of the model-side precision mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DegenerateCloudError,
    DegenerateGeometryError,
    ReconstructionError,
)

DEPTH_MIN_M = 0.07
DEPTH_MAX_M = 0.50
MIN_COVERAGE = 0.30
MAD_SCALE = 2.5


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: pixel centers sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, raw: dict) -> "Intrinsics":
        try:
            return cls(fx=float(raw["fx"]), fy=float(raw["fy"]), cx=float(raw["cx"]),
                       cy=float(raw["cy"]), width=int(raw["width"]), height=int(raw["height"]))
        except KeyError as e:
            raise DataError(f"intrinsics missing field {e}") from e


def project(depth: np.ndarray, intr: Intrinsics, mask: np.ndarray | None = None,
            depth_min: float = DEPTH_MIN_M, depth_max: float = DEPTH_MAX_M) -> np.ndarray:
    """Masked, range-valid depth pixels to camera-frame points [M, 3] (meters)."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise DataError(f"depth must be 2-D, got shape {d.shape}")
    if d.shape != (intr.height, intr.width):
        raise DataError(f"depth shape {d.shape} != intrinsics {intr.height}x{intr.width}")
    valid = np.isfinite(d) & (d > 0) & (d >= depth_min) & (d <= depth_max)
    if mask is not None:
        m = np.asarray(mask)
        if m.shape != d.shape:
            raise DataError(f"mask shape {m.shape} != depth shape {d.shape}")
        valid &= m.astype(bool)
    v, u = np.nonzero(valid)
    if v.size == 0:
        raise DegenerateCloudError("no valid depth pixels to project")
    z = d[v, u]
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return np.column_stack([x, y, z])


def coverage(depth: np.ndarray, mask: np.ndarray,
             depth_min: float = DEPTH_MIN_M, depth_max: float = DEPTH_MAX_M) -> float:
    """Fraction of mask pixels carrying a range-valid depth reading."""
    d = np.asarray(depth, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if m.shape != d.shape:
        raise DataError(f"mask shape {m.shape} != depth shape {d.shape}")
    total = int(m.sum())
    if total == 0:
        return 0.0
    ok = np.isfinite(d) & (d > 0) & (d >= depth_min) & (d <= depth_max) & m
    return float(ok.sum()) / total


def denoise(points: np.ndarray, mad_scale: float = MAD_SCALE) -> np.ndarray:
    """Keep points whose depth sits within mad_scale MADs of the median depth.

    A zero MAD (perfectly flat or heavily quantized depth) keeps everything;
    the gate is for spray outliers, not legitimate structure.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise DataError(f"points must be [N, 3], got shape {p.shape}")
    if p.shape[0] < 8:
        raise DegenerateCloudError(f"denoise needs at least 8 points, got {p.shape[0]}")
    z = p[:, 2]
    med = np.median(z)
    mad = np.median(np.abs(z - med))
    if mad == 0.0:
        return p.copy()
    kept = p[np.abs(z - med) <= mad_scale * mad]
    if kept.shape[0] < 4:
        raise DegenerateCloudError(
            f"only {kept.shape[0]} points survive denoising (need 4)"
        )
    return kept


class _Facet:
    __slots__ = ("verts", "normal", "offset", "outside", "dists")

    def __init__(self, verts: tuple[int, int, int], normal: np.ndarray, offset: float) -> None:
        self.verts = verts
        self.normal = normal
        self.offset = offset
        self.outside: np.ndarray = np.empty(0, dtype=np.int64)
        self.dists: np.ndarray = np.empty(0, dtype=np.float64)


@dataclass(frozen=True)
class Hull:
    """Convex hull: deduplicated vertex array, outward-oriented triangles."""

    vertices: np.ndarray
    faces: np.ndarray
    volume: float

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]


def _plane(pts: np.ndarray, a: int, b: int, c: int, interior: np.ndarray):
    n = np.cross(pts[b] - pts[a], pts[c] - pts[a])
    norm = np.linalg.norm(n)
    if norm == 0.0:
        return None
    n = n / norm
    off = float(n @ pts[a])
    if n @ interior - off > 0:  # flip so the interior reference sits below
        return (c, b, a), -n, -off
    return (a, b, c), n, off


def convex_hull(points: np.ndarray) -> Hull:
    """Quickhull over 3-D points; raises on inputs with no 3-D extent."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"points must be [N, 3], got shape {pts.shape}")
    m = pts.shape[0]
    if m < 4:
        raise DegenerateGeometryError(f"need at least 4 points, got {m}")

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    diam = float(np.linalg.norm(hi - lo))
    if diam == 0.0:
        raise DegenerateGeometryError("all points identical")
    deg_tol = 1e-10 * diam
    eps = 1e-12 * diam

    # Initial simplex: extreme pair along the widest axis, then the farthest
    # point from their line, then the farthest from that plane.
    axis = int(np.argmax(hi - lo))
    i0 = int(np.argmin(pts[:, axis]))
    i1 = int(np.argmax(pts[:, axis]))
    d01 = pts[i1] - pts[i0]
    line_d = np.linalg.norm(np.cross(pts - pts[i0], d01), axis=1) / np.linalg.norm(d01)
    i2 = int(np.argmax(line_d))
    if line_d[i2] <= deg_tol:
        raise DegenerateGeometryError("points are collinear")
    n0 = np.cross(d01, pts[i2] - pts[i0])
    n0 /= np.linalg.norm(n0)
    plane_d = np.abs((pts - pts[i0]) @ n0)
    i3 = int(np.argmax(plane_d))
    if plane_d[i3] <= deg_tol:
        raise DegenerateGeometryError("points are coplanar")

    interior = pts[[i0, i1, i2, i3]].mean(axis=0)
    facets: dict[int, _Facet] = {}
    edge_map: dict[tuple[int, int], list[int]] = {}
    next_id = 0

    def add_facet(a: int, b: int, c: int) -> int | None:
        nonlocal next_id
        oriented = _plane(pts, a, b, c, interior)
        if oriented is None:
            return None
        verts, n, off = oriented
        fid = next_id
        next_id += 1
        facets[fid] = _Facet(verts, n, off)
        for u, v in ((verts[0], verts[1]), (verts[1], verts[2]), (verts[2], verts[0])):
            edge_map.setdefault((min(u, v), max(u, v)), []).append(fid)
        return fid

    def drop_facet(fid: int) -> None:
        f = facets.pop(fid)
        for u, v in ((f.verts[0], f.verts[1]), (f.verts[1], f.verts[2]), (f.verts[2], f.verts[0])):
            key = (min(u, v), max(u, v))
            edge_map[key].remove(fid)
            if not edge_map[key]:
                del edge_map[key]

    for tri in ((i0, i1, i2), (i0, i1, i3), (i0, i2, i3), (i1, i2, i3)):
        add_facet(*tri)

    def assign(candidates: np.ndarray,
               fids: Sequence[int]) -> tuple[np.ndarray, list[int]]:
        """Put each candidate in the outside set of the facet it's farthest
        above; returns the ones not above any of the given facets plus the
        facet ids that received points."""
        if candidates.size == 0 or not fids:
            return candidates, []
        normals = np.stack([facets[f].normal for f in fids])
        offsets = np.array([facets[f].offset for f in fids])
        d = pts[candidates] @ normals.T - offsets  # [K, nf]
        best = np.argmax(d, axis=1)
        bestd = d[np.arange(d.shape[0]), best]
        out_idx = np.flatnonzero(bestd > eps)
        touched = []
        for j in np.unique(best[out_idx]):
            sel = out_idx[best[out_idx] == j]
            f = facets[fids[int(j)]]
            f.outside = np.concatenate([f.outside, candidates[sel]])
            f.dists = np.concatenate([f.dists, bestd[sel]])
            touched.append(fids[int(j)])
        keep = np.ones(candidates.shape[0], dtype=bool)
        keep[out_idx] = False
        return candidates[keep], touched

    initial = np.setdiff1d(np.arange(m, dtype=np.int64), np.array([i0, i1, i2, i3]))
    _, pending = assign(initial, list(facets))
    while pending:
        fid = pending.pop()
        f = facets.get(fid)
        if f is None or f.outside.size == 0:
            continue
        apex = int(f.outside[np.argmax(f.dists)])
        p = pts[apex]

        # Visible set: breadth-first flood from f over facet adjacency.
        visible = {fid}
        queue = [fid]
        while queue:
            g = queue.pop()
            for verts in ((facets[g].verts[0], facets[g].verts[1]),
                          (facets[g].verts[1], facets[g].verts[2]),
                          (facets[g].verts[2], facets[g].verts[0])):
                key = (min(verts), max(verts))
                for nb in edge_map.get(key, ()):
                    if nb not in visible and facets[nb].normal @ p - facets[nb].offset > eps:
                        visible.add(nb)
                        queue.append(nb)

        horizon: list[tuple[int, int]] = []
        candidates = [facets[g].outside for g in visible]
        for g in visible:
            verts = facets[g].verts
            for u, v in ((verts[0], verts[1]), (verts[1], verts[2]), (verts[2], verts[0])):
                key = (min(u, v), max(u, v))
                others = [x for x in edge_map[key] if x not in visible]
                if others:
                    horizon.append((u, v))
        for g in visible:
            drop_facet(g)

        new_ids = []
        for u, v in horizon:
            nf = add_facet(u, v, apex)
            if nf is not None:
                new_ids.append(nf)

        pool = np.concatenate(candidates) if candidates else np.empty(0, dtype=np.int64)
        pool = pool[pool != apex]
        leftovers, touched = assign(pool, new_ids)
        # Exact re-check against every live facet before discarding: guards
        # coplanarity ties on symmetric inputs (see module docstring).
        if leftovers.size:
            fresh = set(new_ids)
            _, touched2 = assign(leftovers, [g for g in facets if g not in fresh])
            touched.extend(touched2)
        # stale or emptied entries are skipped at pop time, so duplicates
        # in pending are harmless
        pending.extend(touched)

    # Deduplicate vertices in first-seen order; volume by the divergence
    # theorem over outward-oriented triangles, centered for conditioning.
    order: dict[int, int] = {}
    tris = []
    for f in facets.values():
        tri = []
        for vid in f.verts:
            if vid not in order:
                order[vid] = len(order)
            tri.append(order[vid])
        tris.append(tri)
    vert_ids = np.array(list(order), dtype=np.int64)
    vertices = pts[vert_ids]
    faces = np.array(tris, dtype=np.int64)
    centered = vertices - vertices.mean(axis=0)
    a = centered[faces[:, 0]]
    b = centered[faces[:, 1]]
    c = centered[faces[:, 2]]
    volume = float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)
    return Hull(vertices=vertices, faces=faces, volume=abs(volume))


def hull_volume(points: np.ndarray) -> float:
    return convex_hull(points).volume


def contains(hull: Hull, points: np.ndarray, tol: float = 1e-9) -> bool:
    """True if every point is inside or within tol of the hull surface."""
    pts = np.asarray(points, dtype=np.float64)
    a = hull.vertices[hull.faces[:, 0]]
    n = np.cross(hull.vertices[hull.faces[:, 1]] - a, hull.vertices[hull.faces[:, 2]] - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    offs = np.einsum("ij,ij->i", n, a)
    center = hull.vertices.mean(axis=0)
    sign = np.sign(n @ center - offs)
    n[sign > 0] *= -1.0
    offs = np.einsum("ij,ij->i", n, hull.vertices[hull.faces[:, 0]])
    d = pts @ n.T - offs
    return bool((d <= tol).all())


@dataclass
class FrameOutcome:
    """Per-frame reconstruction record for one container."""

    frame_index: int
    ok: bool
    volume_m3: float | None = None
    n_points: int = 0
    skip_reason: str | None = None


@dataclass
class ContainerEstimate:
    volume_m3: float
    frames: list[FrameOutcome] = field(default_factory=list)

    @property
    def volume_cm3(self) -> float:
        return self.volume_m3 * 1e6


def reconstruct_container(depths: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                          intr: Intrinsics) -> ContainerEstimate:
    """Median-aggregate hull volume across a container's empty frames.

    Frames are skipped (with a recorded reason) on low mask coverage or
    degenerate geometry; the median runs over what survives. No surviving
    frame at all is an error: the container cannot be measured.
    """
    if len(depths) != len(masks):
        raise DataError(f"{len(depths)} depth maps vs {len(masks)} masks")
    if not depths:
        raise DataError("no frames given")
    outcomes: list[FrameOutcome] = []
    volumes: list[float] = []
    for i, (depth, mask) in enumerate(zip(depths, masks)):
        cov = coverage(depth, mask)
        if cov < MIN_COVERAGE:
            outcomes.append(FrameOutcome(i, False, skip_reason=f"coverage {cov:.2f} < {MIN_COVERAGE}"))
            continue
        try:
            cloud = denoise(project(depth, intr, mask))
            hull = convex_hull(cloud)
        except (DegenerateCloudError, DegenerateGeometryError) as e:
            outcomes.append(FrameOutcome(i, False, skip_reason=str(e)))
            continue
        outcomes.append(FrameOutcome(i, True, volume_m3=hull.volume, n_points=cloud.shape[0]))
        volumes.append(hull.volume)
    if not volumes:
        raise ReconstructionError(
            "no frame produced a usable reconstruction: "
            + "; ".join(f"frame {o.frame_index}: {o.skip_reason}" for o in outcomes)
        )
    return ContainerEstimate(volume_m3=float(np.median(volumes)), frames=outcomes)


def food_volume(container_volume: float, fractions: Iterable, n_frames: int = 5) -> float:
    """Average the first pre-eating portion fractions against the container.

    fractions: the quantified fill fractions, one per usable pre-eating
    frame, at most n_frames of them; fewer simply pad with zeros, matching
    the fixed-window average the estimator defines.
    """
    if n_frames <= 0:
        raise ConfigError(f"n_frames must be positive, got {n_frames}")
    fr = [float(f) for f in fractions]
    if len(fr) > n_frames:
        raise DataError(f"got {len(fr)} fractions for an {n_frames}-frame window")
    if any(f < 0 for f in fr):
        raise DataError("portion fractions must be nonnegative")
    return container_volume * sum(fr) / n_frames
