"""Mesh substrate: icosphere, mirror-symmetric parameterization, cotangent
Laplacian and convex-hull based mean-shape initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull as _QHull
from scipy.spatial import QhullError

from .errors import CapacityError, GeometryError, ShapeError, SymmetryError

MAX_LEVEL = 7
COT_CLAMP = 1e6


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int, counter-clockwise seen from outside

    @property
    def n_verts(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(np.asarray(vertices, dtype=np.float64), self.faces)


@dataclass(frozen=True)
class SymmetryMap:
    pairs: np.ndarray  # (P, 2) int, smaller index first
    on_plane: np.ndarray  # (Q,) int
    n_verts: int

    @property
    def free_count(self) -> int:
        return len(self.pairs) + len(self.on_plane)

    @property
    def free_index(self) -> np.ndarray:
        """Full-mesh vertex index carried by each free slot (pairs first)."""
        return np.concatenate([self.pairs[:, 0], self.on_plane])

    def mirror_permutation(self) -> np.ndarray:
        perm = np.arange(self.n_verts)
        perm[self.pairs[:, 0]] = self.pairs[:, 1]
        perm[self.pairs[:, 1]] = self.pairs[:, 0]
        return perm


@dataclass(frozen=True)
class ConvexHull3:
    points: np.ndarray  # (H, 3) hull vertices
    faces: np.ndarray  # (G, 3) indices into points, outward orientation

    def planes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit outward normals and offsets so that n.p <= d inside."""
        a, b, c = (self.points[self.faces[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return n, np.einsum("ij,ij->i", n, a)

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        """Max over face planes of n.p - d; <= 0 inside."""
        n, d = self.planes()
        return (np.atleast_2d(pts) @ n.T - d).max(axis=1)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


# ---------------------------------------------------------------- icosphere

def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, f


def _subdivide(verts: list, faces: np.ndarray) -> np.ndarray:
    cache: dict[tuple[int, int], int] = {}

    def midpoint(i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        idx = cache.get(key)
        if idx is None:
            m = verts[i] + verts[j]
            verts.append(m / np.linalg.norm(m))
            idx = cache[key] = len(verts) - 1
        return idx

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(out, dtype=np.int64)


def icosphere(level: int = 3) -> Mesh:
    """Unit icosphere; the vertex set is invariant under x -> -x."""
    if level < 0:
        raise ValueError("level must be non-negative")
    if level > MAX_LEVEL:
        raise CapacityError(f"icosphere level {level} exceeds {MAX_LEVEL}")
    v, f = _icosahedron()
    verts = list(v)
    for _ in range(level):
        f = _subdivide(verts, f)
    return Mesh(np.array(verts), f)


def edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges, sorted (E, 2)."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# ---------------------------------------------------------------- symmetry

def build_symmetry(mesh: Mesh, tol: float = 1e-8) -> SymmetryMap:
    v = mesh.vertices
    on = np.flatnonzero(np.abs(v[:, 0]) <= tol)
    rest = np.flatnonzero(np.abs(v[:, 0]) > tol)
    mirrored = v[rest] * np.array([-1.0, 1.0, 1.0])
    # brute force is fine at icosphere sizes; O(n^2) memory bounded by level 7
    partner = np.empty(len(rest), dtype=np.int64)
    for k, m in enumerate(mirrored):
        d = np.abs(v[rest] - m).max(axis=1)
        hit = np.flatnonzero(d <= tol)
        if len(hit) != 1:
            raise SymmetryError(f"vertex {rest[k]} has {len(hit)} mirror partners within tol={tol}")
        partner[k] = rest[hit[0]]
    pairs = {(min(i, j), max(i, j)) for i, j in zip(rest, partner)}
    for i, j in zip(rest, partner):
        if partner[np.searchsorted(rest, j)] != i:
            raise SymmetryError(f"mirror matching of vertex {i} is not mutual")
    pairs = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    return SymmetryMap(pairs, on.astype(np.int64), mesh.n_verts)


def expand_symmetric(smap: SymmetryMap, free: np.ndarray) -> np.ndarray:
    """Free (P+Q, 3) values -> full (V, 3) mirror-symmetric vertex array."""
    free = np.asarray(free, dtype=np.float64)
    if free.shape != (smap.free_count, 3):
        raise ShapeError(f"expected free params of shape {(smap.free_count, 3)}, got {free.shape}")
    npairs = len(smap.pairs)
    out = np.empty((smap.n_verts, 3))
    out[smap.pairs[:, 0]] = free[:npairs]
    out[smap.pairs[:, 1]] = free[:npairs] * np.array([-1.0, 1.0, 1.0])
    on = free[npairs:].copy()
    on[:, 0] = 0.0
    out[smap.on_plane] = on
    return out


def reduce_symmetric(smap: SymmetryMap, grad: np.ndarray) -> np.ndarray:
    """Adjoint of expand_symmetric: full (V, 3) gradient -> free gradient."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (smap.n_verts, 3):
        raise ShapeError(f"expected gradient of shape {(smap.n_verts, 3)}, got {grad.shape}")
    g_pairs = grad[smap.pairs[:, 0]] + grad[smap.pairs[:, 1]] * np.array([-1.0, 1.0, 1.0])
    g_on = grad[smap.on_plane].copy()
    g_on[:, 0] = 0.0
    return np.concatenate([g_pairs, g_on])


def symmetrize(smap: SymmetryMap, full: np.ndarray) -> np.ndarray:
    """Project a full vertex array to free params by pair averaging."""
    full = np.asarray(full, dtype=np.float64)
    refl = np.array([-1.0, 1.0, 1.0])
    pairs = 0.5 * (full[smap.pairs[:, 0]] + full[smap.pairs[:, 1]] * refl)
    on = full[smap.on_plane].copy()
    on[:, 0] = 0.0
    return np.concatenate([pairs, on])


# ---------------------------------------------------------------- laplacian

def cotangent_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """Cotangent-weight Laplacian with w_ij = (cot a + cot b) / 2 off the
    diagonal and -sum_j w_ij on it, so (L V)_i is the mean-curvature normal
    up to the vertex area factor."""
    v, f = mesh.vertices, mesh.faces
    area = face_areas(v, f)
    bad = np.flatnonzero(area <= 1e-12)
    if len(bad):
        raise GeometryError(f"degenerate face {bad[0]} (area {area[bad[0]]:.3g})")
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = f[:, (k + 1) % 3], f[:, (k + 2) % 3], f[:, k]
        u, w = v[i] - v[o], v[j] - v[o]
        cot = np.einsum("ij,ij->i", u, w) / np.linalg.norm(np.cross(u, w), axis=1)
        cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        rows += [i, j]
        cols += [j, i]
        vals += [0.5 * cot, 0.5 * cot]
    n = mesh.n_verts
    W = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    W.sum_duplicates()
    L = W - sp.diags(np.asarray(W.sum(axis=1)).ravel())
    L = sp.csr_matrix(L)
    L.sort_indices()
    return L


def laplacian_apply(L: sp.spmatrix, V: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != L.shape[1]:
        raise ShapeError(f"Laplacian of size {L.shape} cannot act on array of shape {V.shape}")
    return np.asarray(L @ V)


# ---------------------------------------------------------------- hull

def convex_hull(points: np.ndarray) -> ConvexHull3:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise GeometryError("convex hull needs at least 4 points in 3D")
    scale = float(np.ptp(pts, axis=0).max())
    if scale <= 0:
        raise GeometryError("degenerate point set: all points coincide")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[2] <= 1e-10 * scale * np.sqrt(len(pts)):
        raise GeometryError("degenerate point set: points are coplanar")
    try:
        qh = _QHull(pts)
    except QhullError as exc:
        raise GeometryError(f"convex hull failed: {exc}") from exc
    used = np.unique(qh.simplices)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    faces = remap[qh.simplices]
    hv = pts[used]
    # orient outward relative to the interior centroid
    inner = hv.mean(axis=0)
    a, b, c = (hv[faces[:, k]] for k in range(3))
    n = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", n, a - inner) < 0
    faces[flip] = faces[flip][:, ::-1]
    return ConvexHull3(hv, faces)


def init_mean_shape(hull: ConvexHull3, sphere: Mesh, smap: SymmetryMap) -> np.ndarray:
    """Ray-project sphere vertex directions from the hull centroid onto the
    hull surface; returns free params of the symmetrized result."""
    c = hull.centroid
    n, d = hull.planes()
    slack = d - n @ c
    if np.any(slack <= 0):
        raise GeometryError("hull centroid is not strictly inside the hull")
    dirs = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
    nd = dirs @ n.T  # (V, G)
    with np.errstate(divide="ignore"):
        t = np.where(nd > 1e-15, slack[None, :] / nd, np.inf)
    tmin = t.min(axis=1)
    if not np.all(np.isfinite(tmin)):
        raise GeometryError("a ray from the hull centroid missed the hull")
    full = c[None, :] + tmin[:, None] * dirs
    return symmetrize(smap, full)
