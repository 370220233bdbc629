"""UV atlas, bilinear sampling / texture flow, and exact Euclidean distance
transform."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, GeometryError, NumericError
from .geom import Mesh, SymmetryMap

UV_SHAPE = (64, 128)  # (rows v, cols u)


@dataclass(frozen=True)
class UVAtlas:
    uv: np.ndarray  # (F, 3, 2) per-corner (u, v) in [0, 1]


def sphere_uv(sphere: Mesh, smap: SymmetryMap | None = None) -> UVAtlas:
    """Equirectangular UVs folded across x = 0, so mirrored faces share a UV
    triangle. Computed once from the unit sphere."""
    v = sphere.vertices
    if np.abs(np.linalg.norm(v, axis=1) - 1.0).max() > 1e-6:
        raise GeometryError("sphere_uv expects unit-sphere vertices")
    xf = np.abs(v[:, 0])
    u = np.arctan2(v[:, 1], -xf) / (2 * np.pi) + 0.5
    vv = np.arccos(np.clip(v[:, 2], -1.0, 1.0)) / np.pi
    pole = np.hypot(v[:, 0], v[:, 1]) < 1e-9
    # seam vertices (y == 0, x != 0) take u = 1 regardless of the sign of -0.0
    u = np.where((np.abs(v[:, 1]) < 1e-12) & ~pole, 1.0, u)

    f = sphere.faces
    cu = u[f].copy()  # (F, 3)
    cv = vv[f]
    # seam faces: lift the low corners by one (corner-order independent, so
    # mirrored faces stay identical)
    seam = (cu.max(axis=1) - cu.min(axis=1)) > 0.5
    cu[seam] = np.where(cu[seam] < 0.5, cu[seam] + 1.0, cu[seam])
    fpole = pole[f]
    for k in range(3):
        rows = fpole[:, k]
        if rows.any():
            others = [j for j in range(3) if j != k]
            cu[rows, k] = cu[rows][:, others].mean(axis=1)
    cu = np.clip(cu, 0.0, 1.0)
    return UVAtlas(np.stack([cu, cv], axis=-1))


# ---------------------------------------------------------------- bilinear


def _to_pixel(coords: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Clamped pixel coordinates and in-range masks (align -1/+1 to the
    first/last pixel centers)."""
    x = (coords[..., 0] + 1.0) * 0.5 * (w - 1)
    y = (coords[..., 1] + 1.0) * 0.5 * (h - 1)
    inx = (x >= 0) & (x <= w - 1)
    iny = (y >= 0) & (y <= h - 1)
    return np.clip(x, 0, w - 1), np.clip(y, 0, h - 1), inx, iny


def bilinear_weights(shape: tuple[int, int], coords: np.ndarray):
    """Corner flat indices (..., 4), weights (..., 4) and their derivatives
    w.r.t. the normalized x and y coordinates."""
    h, w = shape
    coords = np.asarray(coords, dtype=np.float64)
    if np.isnan(coords).any():
        raise NumericError("NaN sampling coordinates")
    x, y, inx, iny = _to_pixel(coords, h, w)
    x0 = np.minimum(np.floor(x), w - 2).astype(np.int64) if w > 1 else np.zeros(x.shape, np.int64)
    y0 = np.minimum(np.floor(y), h - 2).astype(np.int64) if h > 1 else np.zeros(y.shape, np.int64)
    a = x - x0
    b = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
    wts = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=-1)
    sx = 0.5 * (w - 1) * inx
    sy = 0.5 * (h - 1) * iny
    dwx = np.stack([-(1 - b), (1 - b), -b, b], axis=-1) * sx[..., None]
    dwy = np.stack([-(1 - a), -a, (1 - a), a], axis=-1) * sy[..., None]
    return idx, wts, dwx, dwy


def bilinear_sample(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample img (H, W) or (H, W, C) at normalized coords (..., 2) in [-1, 1];
    out-of-range coordinates are clamped."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    idx, wts, _, _ = bilinear_weights((h, w), coords)
    flat = img.reshape(h * w, -1)
    out = np.einsum("...k,...kc->...c", wts, flat[idx])
    return out[..., 0] if img.ndim == 2 else out


def bilinear_coord_grad(img: np.ndarray, coords: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. coords of sum(upstream * bilinear_sample(img, coords))."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    idx, _, dwx, dwy = bilinear_weights((h, w), coords)
    flat = img.reshape(h * w, -1)
    vals = flat[idx]  # (..., 4, C)
    up = np.asarray(upstream, dtype=np.float64).reshape(*coords.shape[:-1], -1)
    gx = np.einsum("...k,...kc,...c->...", dwx, vals, up)
    gy = np.einsum("...k,...kc,...c->...", dwy, vals, up)
    return np.stack([gx, gy], axis=-1)


def bilinear_img_grad(shape: tuple[int, int], coords: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. img of sum(upstream * bilinear_sample(img, coords))."""
    h, w = shape
    idx, wts, _, _ = bilinear_weights((h, w), coords)
    up = np.asarray(upstream, dtype=np.float64).reshape(*coords.shape[:-1], -1)
    c = up.shape[-1]
    out = np.zeros((h * w, c))
    contrib = wts[..., None] * up[..., None, :]
    np.add.at(out, idx.reshape(-1), contrib.reshape(-1, c))
    return out.reshape(h, w, c) if c > 1 else out.reshape(h, w)


# ---------------------------------------------------------------- flow


def squash(raw: np.ndarray) -> np.ndarray:
    return np.tanh(raw)


def unsquash(flow: np.ndarray) -> np.ndarray:
    return np.arctanh(np.clip(flow, -1 + 1e-9, 1 - 1e-9))


def apply_flow(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """UV texture image sampled from `image` at texture-flow coordinates."""
    return bilinear_sample(image, flow)


def flow_grid(bbox: tuple[float, float, float, float], shape: tuple[int, int] = UV_SHAPE) -> np.ndarray:
    """Regular grid of sampling coordinates over (x0, y0, x1, y1)."""
    x0, y0, x1, y1 = bbox
    ys = np.linspace(y0, y1, shape[0])
    xs = np.linspace(x0, x1, shape[1])
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def mask_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Foreground bounding box in the bilinear sampling coordinate frame."""
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        raise DataError("mask has no foreground")

    def cx(i):
        return 2.0 * i / (w - 1) - 1.0

    def cy(j):
        return 2.0 * j / (h - 1) - 1.0

    return cx(cols[0]), cy(rows[0]), cx(cols[-1]), cy(rows[-1])


# ---------------------------------------------------------------- distance transform


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Lower envelope of parabolas (Felzenszwalb-Huttenlocher) on one row."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    # skip leading infinite samples
    finite = np.flatnonzero(np.isfinite(f))
    if len(finite) == 0:
        d[:] = np.inf
        return d
    v[0] = finite[0]
    z[0], z[1] = -np.inf, np.inf
    for q in finite[1:]:
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def squared_distance_transform(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("distance transform of an empty foreground")
    f = np.where(mask, 0.0, np.inf)
    g = np.empty_like(f)
    for c in range(f.shape[1]):
        g[:, c] = _edt_1d(f[:, c])
    out = np.empty_like(f)
    for r in range(f.shape[0]):
        out[r] = _edt_1d(g[r])
    return out


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance (pixels) to the nearest foreground pixel."""
    return np.sqrt(squared_distance_transform(mask))
