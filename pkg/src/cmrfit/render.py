"""Soft silhouette rasterizer with analytic gradients, and a z-buffered hard
rasterizer used for textured rendering.

Pixel (row j, col i) has its center at ((i+0.5)/W*2-1, (j+0.5)/H*2-1) in
normalized image coordinates, y pointing down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, project_vjp, quat_to_matrix
from .errors import NumericError
from .texture import bilinear_img_grad, bilinear_sample


@dataclass(frozen=True)
class RasterConfig:
    width: int = 64
    height: int = 64
    sigma: float = 1e-4
    min_area: float = 1e-12
    # faces contribute nothing once sign(d) d^2 / sigma < -zcut (exp(-40) ~ 4e-18)
    zcut: float = 40.0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("raster size must be at least 8x8")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def with_sigma(self, sigma: float) -> "RasterConfig":
        return RasterConfig(self.width, self.height, sigma, self.min_area, self.zcut)


@dataclass(frozen=True)
class FragmentBuffer:
    face: np.ndarray  # (H, W) int, -1 where empty
    bary: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), +inf where empty

    @property
    def covered(self) -> np.ndarray:
        return self.face >= 0


def cam_vector(cam) -> np.ndarray:
    return cam.to_vector() if isinstance(cam, Camera) else np.asarray(cam, dtype=np.float64)


def pixel_centers(cfg: RasterConfig) -> np.ndarray:
    """(H, W, 2) normalized pixel-center coordinates."""
    xs = (np.arange(cfg.width) + 0.5) / cfg.width * 2 - 1
    ys = (np.arange(cfg.height) + 0.5) / cfg.height * 2 - 1
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def to_pixels(xy: np.ndarray, cfg: RasterConfig) -> np.ndarray:
    """Normalized coordinates -> continuous pixel coordinates (x, y)."""
    return (np.asarray(xy) + 1.0) * 0.5 * np.array([cfg.width, cfg.height])


def _project_verts(V: np.ndarray, cvec: np.ndarray):
    R = quat_to_matrix(cvec[3:7])
    rot = V @ R.T
    return cvec[0] * rot[:, :2] + cvec[1:3], rot[:, 2]


def _face_pixel_pairs(tri: np.ndarray, cfg: RasterConfig, margin: float):
    """All (face, pixel) pairs whose pixel center lies in the face bbox grown
    by margin. tri: (F, 3, 2) projected corners."""
    W, H = cfg.width, cfg.height
    lo = tri.min(axis=1) - margin
    hi = tri.max(axis=1) + margin
    i0 = np.ceil((lo[:, 0] + 1) * W / 2 - 0.5).astype(np.int64).clip(0, W)
    i1 = np.floor((hi[:, 0] + 1) * W / 2 - 0.5).astype(np.int64).clip(-1, W - 1)
    j0 = np.ceil((lo[:, 1] + 1) * H / 2 - 0.5).astype(np.int64).clip(0, H)
    j1 = np.floor((hi[:, 1] + 1) * H / 2 - 0.5).astype(np.int64).clip(-1, H - 1)
    nx = np.maximum(i1 - i0 + 1, 0)
    ny = np.maximum(j1 - j0 + 1, 0)
    cnt = nx * ny
    total = int(cnt.sum())
    face = np.repeat(np.arange(len(tri)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    k = np.arange(total) - start
    nxf = nx[face]
    ix = i0[face] + k % np.maximum(nxf, 1)
    iy = j0[face] + k // np.maximum(nxf, 1)
    return face, iy * W + ix, ix, iy


def _signed_distance_arrays(a, b, c, p):
    """Vectorized signed distance (positive inside) plus data for gradients:
    index of the closest edge, its parameter t and the closest point."""
    ends = [(a, b), (b, c), (c, a)]
    d2s, ts, cps = [], [], []
    for s0, s1 in ends:
        e = s1 - s0
        ee = np.einsum("ij,ij->i", e, e)
        t = np.clip(np.einsum("ij,ij->i", p - s0, e) / np.where(ee > 0, ee, 1.0), 0.0, 1.0)
        cp = s0 + t[:, None] * e
        d2s.append(np.einsum("ij,ij->i", p - cp, p - cp))
        ts.append(t)
        cps.append(cp)
    d2s = np.stack(d2s, axis=1)
    k = np.argmin(d2s, axis=1)
    rows = np.arange(len(p))
    d2 = d2s[rows, k]
    t = np.stack(ts, axis=1)[rows, k]
    cp = np.stack(cps, axis=1)[rows, k]

    def cross(u, v):
        return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

    e0 = cross(b - a, p - a)
    e1 = cross(c - b, p - b)
    e2 = cross(a - c, p - c)
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    sign = np.where(inside, 1.0, -1.0)
    return sign, d2, k, t, cp


def signed_distance_2d(tri, p) -> float | np.ndarray:
    """Signed distance from p to the triangle boundary, positive inside."""
    tri = np.asarray(tri, dtype=np.float64)
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    n = len(p)
    a, b, c = (np.broadcast_to(tri[k], (n, 2)) for k in range(3))
    sign, d2, *_ = _signed_distance_arrays(a, b, c, p)
    out = sign * np.sqrt(d2)
    return float(out[0]) if n == 1 else out


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class _SilCache:
    V: np.ndarray
    cvec: np.ndarray
    npix: int
    face: np.ndarray
    pix: np.ndarray
    sign: np.ndarray
    k: np.ndarray
    t: np.ndarray
    diff: np.ndarray  # p - closest point
    dzdz: np.ndarray  # exp(S_pixel) * sigmoid(z) per pair
    sigma: float
    F: np.ndarray


def soft_silhouette(V, F, cam, cfg: RasterConfig, return_cache: bool = False):
    """Coverage 1 - prod_j (1 - logistic(sign(d_j) d_j^2 / sigma)) per pixel."""
    V = np.asarray(V, dtype=np.float64)
    F = np.asarray(F, dtype=np.int64).reshape(-1, 3)
    if not np.all(np.isfinite(V)):
        raise NumericError("non-finite vertices passed to soft_silhouette")
    cvec = cam_vector(cam)
    npix = cfg.width * cfg.height
    if len(F) == 0:
        img = np.zeros((cfg.height, cfg.width))
        if return_cache:
            empty = np.zeros(0, dtype=np.int64)
            return img, _SilCache(V, cvec, npix, empty, empty, np.zeros(0), empty, np.zeros(0),
                                  np.zeros((0, 2)), np.zeros(0), cfg.sigma, F)
        return img
    xy, _ = _project_verts(V, cvec)
    tri = xy[F]
    area = 0.5 * np.abs((tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
                        - (tri[:, 1, 1] - tri[:, 0, 1]) * (tri[:, 2, 0] - tri[:, 0, 0]))
    keep = np.flatnonzero(area >= cfg.min_area)
    margin = np.sqrt(cfg.zcut * cfg.sigma)
    lf, pix, ix, iy = _face_pixel_pairs(tri[keep], cfg, margin)
    face = keep[lf]
    p = np.stack([(ix + 0.5) / cfg.width * 2 - 1, (iy + 0.5) / cfg.height * 2 - 1], axis=1)
    a, b, c = tri[face, 0], tri[face, 1], tri[face, 2]
    sign, d2, k, t, cp = _signed_distance_arrays(a, b, c, p)
    z = sign * d2 / cfg.sigma
    # accumulate log(1 - sigma(z)) = -softplus(z) in face order per pixel
    img_log = -np.bincount(pix, weights=_softplus(z), minlength=npix)
    cover = 1.0 - np.exp(img_log)
    img = cover.reshape(cfg.height, cfg.width)
    if not return_cache:
        return img
    dcdz = np.exp(img_log[pix]) * _sigmoid(z)
    return img, _SilCache(V, cvec, npix, face, pix, sign, k, t, p - cp, dcdz, cfg.sigma, F)


def soft_silhouette_backward(cache: _SilCache, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pull an image-space gradient back to vertices (V, 3) and the raw camera
    vector (7,)."""
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    gxy = np.zeros((len(cache.V), 2))
    if len(cache.face):
        gz = g[cache.pix] * cache.dzdz
        # z = sign * |p - cp|^2 / sigma; cp = s0 + t (s1 - s0)
        coef = (gz * cache.sign * (-2.0 / cache.sigma))[:, None] * cache.diff
        ends = np.array([[0, 1], [1, 2], [2, 0]])
        v0 = cache.F[cache.face, ends[cache.k, 0]]
        v1 = cache.F[cache.face, ends[cache.k, 1]]
        n = len(cache.V)
        for col in range(2):
            gxy[:, col] = (np.bincount(v0, weights=coef[:, col] * (1.0 - cache.t), minlength=n)
                           + np.bincount(v1, weights=coef[:, col] * cache.t, minlength=n))
    gV, gcam = project_vjp(cache.cvec, cache.V, gxy)
    return gV, gcam


def rasterize_hard(V, F, cam, cfg: RasterConfig) -> FragmentBuffer:
    """Z-buffered coverage of pixel centers with a top-left tie rule; the
    closest (smallest rotated z) fragment wins."""
    V = np.asarray(V, dtype=np.float64)
    F = np.asarray(F, dtype=np.int64).reshape(-1, 3)
    H, W = cfg.height, cfg.width
    face_img = -np.ones(H * W, dtype=np.int64)
    bary_img = np.zeros((H * W, 3))
    depth_img = np.full(H * W, np.inf)
    if len(F) == 0:
        return FragmentBuffer(face_img.reshape(H, W), bary_img.reshape(H, W, 3), depth_img.reshape(H, W))
    xy, depth = _project_verts(V, cam_vector(cam))
    tri = xy[F]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    keep = np.flatnonzero(np.abs(area2) >= 2 * cfg.min_area)
    lf, pix, ix, iy = _face_pixel_pairs(tri[keep], cfg, 0.0)
    face = keep[lf]
    p = np.stack([(ix + 0.5) / W * 2 - 1, (iy + 0.5) / H * 2 - 1], axis=1)
    # reorder corners so every triangle has positive doubled area
    order = np.where((area2[face] > 0)[:, None], [0, 1, 2], [0, 2, 1])
    idx = F[face[:, None], order]
    t0, t1, t2 = xy[idx[:, 0]], xy[idx[:, 1]], xy[idx[:, 2]]
    A = np.abs(area2[face])

    def edge(s0, s1):
        val = (s1[:, 0] - s0[:, 0]) * (p[:, 1] - s0[:, 1]) - (s1[:, 1] - s0[:, 1]) * (p[:, 0] - s0[:, 0])
        dx, dy = s1[:, 0] - s0[:, 0], s1[:, 1] - s0[:, 1]
        topleft = ((dy == 0) & (dx > 0)) | (dy < 0)
        return val, (val > 0) | ((val == 0) & topleft)

    e0, in0 = edge(t1, t2)
    e1, in1 = edge(t2, t0)
    e2, in2 = edge(t0, t1)
    inside = in0 & in1 & in2
    bc = np.stack([e0, e1, e2], axis=1)[inside] / A[inside, None]
    idx = idx[inside]
    pix = pix[inside]
    face = face[inside]
    if len(face) == 0:
        return FragmentBuffer(face_img.reshape(H, W), bary_img.reshape(H, W, 3), depth_img.reshape(H, W))
    z = np.einsum("ij,ij->i", bc, depth[idx])
    # nearest wins; ties keep the lower face index (stable sort)
    sel = np.lexsort((face, z))
    pix_s = pix[sel]
    order_pix = np.argsort(pix_s, kind="stable")
    ps = pix_s[order_pix]
    first_sorted = np.r_[True, ps[1:] != ps[:-1]]
    win = sel[order_pix[first_sorted]]
    # scatter barycentrics back to the original corner order
    bary_full = np.zeros((len(win), 3))
    corner_order = np.where((area2[face[win]] > 0)[:, None], [0, 1, 2], [0, 2, 1])
    np.put_along_axis(bary_full, corner_order, bc[win], axis=1)
    face_img[pix[win]] = face[win]
    bary_img[pix[win]] = bary_full
    depth_img[pix[win]] = z[win]
    return FragmentBuffer(face_img.reshape(H, W), bary_img.reshape(H, W, 3), depth_img.reshape(H, W))


def texture_coords(buf: FragmentBuffer, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of covered pixels and their texture sampling coordinates
    in [-1, 1]."""
    cov = np.flatnonzero(buf.face.ravel() >= 0)
    f = buf.face.ravel()[cov]
    bc = buf.bary.reshape(-1, 3)[cov]
    uvp = np.einsum("nk,nkc->nc", bc, np.asarray(uv)[f])
    return cov, 2.0 * np.clip(uvp, 0.0, 1.0) - 1.0


def render_textured(buf: FragmentBuffer, uv, tex: np.ndarray) -> np.ndarray:
    """RGB rendering; linear in tex, uncovered pixels black."""
    uv = np.asarray(uv)
    tex = np.asarray(tex, dtype=np.float64)
    H, W = buf.face.shape
    out = np.zeros((H * W, tex.shape[2]))
    cov, coords = texture_coords(buf, uv)
    if len(cov):
        out[cov] = bilinear_sample(tex, coords)
    return out.reshape(H, W, -1)


def render_textured_tex_grad(buf: FragmentBuffer, uv, tex_shape: tuple[int, int], upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the texture of sum(upstream * render_textured(...))."""
    H, W = buf.face.shape
    cov, coords = texture_coords(buf, uv)
    up = np.asarray(upstream, dtype=np.float64).reshape(H * W, -1)[cov]
    if len(cov) == 0:
        return np.zeros((*tex_shape, up.shape[1]))
    g = bilinear_img_grad(tex_shape, coords, up)
    return g if g.ndim == 3 else g[..., None]
