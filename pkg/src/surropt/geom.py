"""n-dimensional Delaunay triangulation for region-based adaptive sampling.

Incremental Bowyer-Watson construction bootstrapped from a large enclosing
simplex. Strict circumsphere membership is decided with a float fast path
plus an exact rational determinant fallback for near-ties, so cospherical
inputs (grid corners) resolve deterministically without jitter.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import SearchSpace
from .errors import DegeneracyError, ParameterError, ShapeError

MAX_DIM = 6
_SUPER_SCALE = 1e3
_TIE_REL = 1e-9


def simplex_measure(vertices) -> float:
    """m-volume of an (m+1)-vertex simplex: |det of edge matrix| / m!."""
    v = np.asarray(vertices, dtype=float)
    m = v.shape[1]
    if v.shape[0] != m + 1:
        raise ShapeError(f"need {m + 1} vertices for an {m}-simplex, got {v.shape[0]}")
    return float(abs(np.linalg.det(v[1:] - v[0])) / math.factorial(m))


def centroid(vertices) -> np.ndarray:
    """Arithmetic mean of the simplex vertices."""
    v = np.asarray(vertices, dtype=float)
    return v.mean(axis=0)


@dataclass(frozen=True)
class Triangulation:
    """Point set plus simplices with cached volumes and centroids."""

    points: np.ndarray
    simplices: tuple[tuple[int, ...], ...]
    volumes: np.ndarray
    centroids: np.ndarray

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def find_point(self, x, tol: float = 0.0) -> int:
        """Index of the triangulation point equal to ``x`` (within ``tol``)."""
        x = np.asarray(x, dtype=float)
        d = np.max(np.abs(self.points - x), axis=1)
        idx = int(np.argmin(d))
        if d[idx] > tol:
            raise ParameterError("point is not a triangulation vertex")
        return idx

    def incident_simplices(self, point_index: int) -> list[int]:
        return [i for i, s in enumerate(self.simplices) if point_index in s]


def dump_simplices(tri: Triangulation, path) -> None:
    """Debug CSV: one simplex per row as point indices."""
    path = Path(path)
    with open(path, "w") as fh:
        for s in tri.simplices:
            fh.write(",".join(str(i) for i in s) + "\n")


# ---------------------------------------------------------------------------
# exact predicates


def _exact_det(rows) -> Fraction:
    n = len(rows)
    rows = [list(r) for r in rows]
    det = Fraction(1)
    for col in range(n):
        piv = next((r for r in range(col, n) if rows[r][col] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != col:
            rows[col], rows[piv] = rows[piv], rows[col]
            det = -det
        det *= rows[col][col]
        inv = rows[col][col]
        for r in range(col + 1, n):
            f = rows[r][col] / inv
            if f:
                for c in range(col, n):
                    rows[r][c] -= f * rows[col][c]
    return det


def _sign(x) -> int:
    return (x > 0) - (x < 0)


def _orient_sign_exact(verts) -> int:
    base = [Fraction(float(c)) for c in verts[-1]]
    rows = [
        [Fraction(float(c)) - b for c, b in zip(v, base)] for v in verts[:-1]
    ]
    return _sign(_exact_det(rows))


def _insphere_det_sign_exact(verts, p) -> int:
    pf = [Fraction(float(c)) for c in p]
    rows = []
    for v in verts:
        rel = [Fraction(float(c)) - q for c, q in zip(v, pf)]
        rows.append(rel + [sum(r * r for r in rel)])
    return _sign(_exact_det(rows))


@lru_cache(maxsize=None)
def _insphere_parity(m: int) -> int:
    """Sign convention of the in-sphere determinant, calibrated per dimension.

    Uses a generic simplex inscribed in the unit sphere with the center as a
    known interior point.
    """
    rng = np.random.default_rng(2024 + m)
    while True:
        verts = rng.normal(size=(m + 1, m))
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
        orient = _orient_sign_exact(verts)
        if orient == 0:
            continue
        det = _insphere_det_sign_exact(verts, np.zeros(m))
        if det != 0:
            return det * orient


def _insphere_exact(verts, p) -> bool:
    """True when p lies strictly inside the circumsphere of the simplex."""
    m = len(p)
    orient = _orient_sign_exact(verts)
    if orient == 0:
        # degenerate simplex: treat its circumsphere as empty
        return False
    det = _insphere_det_sign_exact(verts, p)
    return det * orient * _insphere_parity(m) > 0


# ---------------------------------------------------------------------------
# Bowyer-Watson


def _circumsphere(verts):
    """Circumcenter and squared radius via the linear bisector system."""
    v = np.asarray(verts, dtype=float)
    A = 2.0 * (v[1:] - v[0])
    b = np.sum(v[1:] ** 2, axis=1) - np.sum(v[0] ** 2)
    try:
        c = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        c, *_ = np.linalg.lstsq(A, b, rcond=None)
    r2 = float(np.sum((v[0] - c) ** 2))
    return c, r2


class _Mesh:
    """Growable simplex store with cached circumspheres."""

    def __init__(self, verts: np.ndarray):
        self.verts = verts
        self.simplices: list[tuple[int, ...]] = []
        cap = 64
        self.centers = np.zeros((cap, verts.shape[1]))
        self.r2 = np.zeros(cap)
        self.alive = np.zeros(cap, dtype=bool)

    def add(self, simplex: tuple[int, ...]):
        i = len(self.simplices)
        if i == self.r2.shape[0]:
            self.centers = np.vstack([self.centers, np.zeros_like(self.centers)])
            self.r2 = np.concatenate([self.r2, np.zeros_like(self.r2)])
            self.alive = np.concatenate([self.alive, np.zeros_like(self.alive)])
        c, r2 = _circumsphere(self.verts[list(simplex)])
        self.simplices.append(simplex)
        self.centers[i] = c
        self.r2[i] = r2
        self.alive[i] = True

    def bad_simplices(self, p: np.ndarray) -> list[int]:
        n = len(self.simplices)
        live = self.alive[:n]
        d2 = np.sum((self.centers[:n] - p) ** 2, axis=1)
        val = d2 - self.r2[:n]
        tol = _TIE_REL * (d2 + self.r2[:n] + 1.0)
        inside = live & (val < -tol)
        ties = live & ~inside & (val <= tol)
        bad = list(np.nonzero(inside)[0])
        for i in np.nonzero(ties)[0]:
            if _insphere_exact(self.verts[list(self.simplices[i])], p):
                bad.append(int(i))
        return sorted(bad)


def _dedup(points: np.ndarray, scale: float):
    keep: list[int] = []
    dropped = 0
    for i in range(points.shape[0]):
        dup = any(
            np.max(np.abs(points[i] - points[j])) <= 1e-12 * scale for j in keep
        )
        if dup:
            dropped += 1
        else:
            keep.append(i)
    if dropped:
        warnings.warn(f"dropped {dropped} duplicate points before triangulation",
                      stacklevel=3)
    return points[keep]


def _triangulate_1d(points: np.ndarray) -> Triangulation:
    order = np.argsort(points[:, 0], kind="stable")
    simplices = tuple(
        tuple(sorted((int(order[i]), int(order[i + 1]))))
        for i in range(len(order) - 1)
    )
    volumes = np.array(
        [abs(points[s[1], 0] - points[s[0], 0]) for s in simplices]
    )
    centroids = np.array(
        [[0.5 * (points[s[0], 0] + points[s[1], 0])] for s in simplices]
    )
    return Triangulation(points, simplices, volumes, centroids)


def triangulate(
    points,
    space: SearchSpace | None = None,
    include_vertices: bool = False,
) -> Triangulation:
    """Delaunay-triangulate a point set, optionally adding the box corners.

    With ``include_vertices`` the 2^m corners of ``space`` join the point set
    so the triangulated hull covers the whole search box. Affinely degenerate
    inputs raise; duplicates are dropped with a warning. Cospherical ties may
    resolve to either valid triangulation, deterministically in input order.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = pts.shape[1]
    if not 1 <= m <= MAX_DIM:
        raise ParameterError(f"dimension {m} outside the supported range 1..{MAX_DIM}")
    if include_vertices:
        if space is None:
            raise ParameterError("include_vertices requires a search space")
        pts = np.vstack([pts, space.corners()])
    diam = float(np.max(np.ptp(pts, axis=0))) if pts.shape[0] > 1 else 0.0
    scale = max(diam, 1e-12)
    pts = _dedup(pts, scale)
    q = pts.shape[0]
    if q < m + 1:
        raise ParameterError(f"need at least {m + 1} distinct points, got {q}")
    if np.linalg.matrix_rank(pts - pts[0], tol=1e-10 * scale) < m:
        raise DegeneracyError("points are affinely degenerate; cannot triangulate")
    if m == 1:
        return _triangulate_1d(pts)

    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    R = _SUPER_SCALE * scale
    super_verts = np.vstack(
        [center - R * np.ones(m)]
        + [center + (m + 2) * R * np.eye(m)[j] for j in range(m)]
    )
    verts = np.vstack([pts, super_verts])
    mesh = _Mesh(verts)
    mesh.add(tuple(range(q, q + m + 1)))

    for i in range(q):
        p = pts[i]
        bad = mesh.bad_simplices(p)
        if not bad:
            raise DegeneracyError(
                f"insertion of point {i} found no containing circumsphere"
            )
        facets: dict[tuple[int, ...], int] = {}
        for si in bad:
            s = mesh.simplices[si]
            for drop in s:
                facet = tuple(v for v in s if v != drop)
                facets[facet] = facets.get(facet, 0) + 1
            mesh.alive[si] = False
        for facet, count in facets.items():
            if count == 1:
                mesh.add(tuple(sorted(facet + (i,))))

    simplices = []
    for si, s in enumerate(mesh.simplices):
        if mesh.alive[si] and all(v < q for v in s):
            simplices.append(tuple(sorted(s)))
    simplices.sort()
    if not simplices:
        raise DegeneracyError("triangulation produced no interior simplices")
    volumes = np.array([simplex_measure(pts[list(s)]) for s in simplices])
    centroids = np.array([centroid(pts[list(s)]) for s in simplices])
    return Triangulation(pts, tuple(simplices), volumes, centroids)
