"""Central finite-difference checks of every loss term and the soft
rasterizer on random configurations. Each check returns the worst tolerance
ratio max |analytic - fd| / (rtol |fd| + atol) over all configurations and
checked coordinates; a check passes when the ratio is <= 1."""

import numpy as np

from cmrfit.camera import Camera
from cmrfit.fit import build_fixed
from cmrfit.geom import build_symmetry, cotangent_laplacian, icosphere
from cmrfit.objective import (InstanceAnnotation, ObjectiveConfig, loss_cam, loss_def, loss_dt, loss_mask,
                              loss_reproj, loss_smooth, loss_texture, loss_vert2kp, texture_plan,
                              total_objective)
from cmrfit.render import RasterConfig, soft_silhouette, soft_silhouette_backward
from cmrfit.texture import distance_transform, sphere_uv

from helpers import random_quat

RASTER_RTOL = 1e-3
ANALYTIC_RTOL = 1e-5
ATOL = 1e-6


def violation(analytic, fd, rtol, atol=ATOL):
    analytic, fd = np.ravel(analytic), np.ravel(fd)
    return float(np.max(np.abs(analytic - fd) / (rtol * np.abs(fd) + atol)))


def central(f, x, idx, h):
    """Central differences of scalar f at the flat coordinates idx of x."""
    out = np.empty(len(idx))
    flat = x.reshape(-1)
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def random_camera(rng, scale=(0.5, 0.8)):
    return Camera(rng.uniform(*scale), rng.uniform(-0.1, 0.1, 2), random_quat(rng))


def blob_mask(rng, size):
    yy, xx = np.mgrid[:size, :size]
    c = rng.uniform(0.3, 0.7, 2) * size
    r = rng.uniform(0.2, 0.35) * size
    return (xx - c[0]) ** 2 + (yy - c[1]) ** 2 < r**2


def annotation(rng, size=16, K=4, cam=None, mask=None):
    mask = blob_mask(rng, size) if mask is None else mask
    return InstanceAnnotation(
        image=rng.uniform(0, 1, (size, size, 3)), mask=mask, keypoints=rng.uniform(-0.8, 0.8, (K, 2)),
        visible=np.r_[True, rng.random(K - 1) < 0.7], sfm_cam=cam if cam is not None else random_camera(rng),
        dfield=distance_transform(mask))


def small_mesh(rng, jitter=0.15):
    m = icosphere(0)
    return m.vertices * rng.uniform(0.6, 1.0, 3) + rng.normal(scale=jitter, size=m.vertices.shape), m.faces


def check_soft_silhouette(n=100, seed=0, h=1e-4, h_cam=1e-6):
    """Gradient of a random weighting of the soft coverage w.r.t. vertices
    and the raw camera vector. The interior signed distance has kinks on each
    triangle's medial axis; a camera step moves every pixel relative to every
    axis at once, so the camera block uses a smaller step."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        V, F = small_mesh(rng)
        cfg = RasterConfig(16, 16, sigma=rng.choice([1e-2, 3e-3]))
        cam = random_camera(rng)
        wimg = rng.uniform(0, 1, (16, 16)) / 256
        _, cache = soft_silhouette(V, F, cam, cfg, return_cache=True)
        gV, gc = soft_silhouette_backward(cache, wimg)
        vi = rng.choice(V.size, 8, replace=False)
        worst = max(worst, violation(gV.ravel()[vi], central(
            lambda X: float(np.sum(wimg * soft_silhouette(X, F, cam, cfg))), V.copy(), vi, h), RASTER_RTOL))
        cvec = cam.to_vector()
        worst = max(worst, violation(gc, central(
            lambda c: float(np.sum(wimg * soft_silhouette(V, F, c, cfg))), cvec.copy(), range(7), h_cam), RASTER_RTOL))
    return worst


def check_mask(n=100, seed=1, h=1e-5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        V, F = small_mesh(rng)
        ann = annotation(rng)
        cfg = RasterConfig(16, 16, sigma=rng.choice([1e-2, 3e-3]))
        _, gV = loss_mask(V, F, ann, cfg)
        vi = rng.choice(V.size, 8, replace=False)
        fd = central(lambda X: loss_mask(X, F, ann, cfg)[0], V.copy(), vi, h)
        worst = max(worst, violation(gV.ravel()[vi], fd, RASTER_RTOL))
    return worst


def check_reproj(n=100, seed=2, h=1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        V = rng.normal(size=(10, 3))
        logits = rng.normal(size=(4, 10))
        ann = annotation(rng)
        _, gV, gl = loss_reproj(V, logits, ann)
        worst = max(worst, violation(gV, central(lambda X: loss_reproj(X, logits, ann)[0], V.copy(),
                                                  range(V.size), h), ANALYTIC_RTOL))
        worst = max(worst, violation(gl, central(lambda L: loss_reproj(V, L, ann)[0], logits.copy(),
                                                  range(logits.size), h), ANALYTIC_RTOL))
    return worst


def check_cam(n=100, seed=3, h=1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        target = random_camera(rng)
        vec = random_camera(rng).to_vector() * np.r_[1, 1, 1, np.full(4, rng.uniform(0.5, 2))]
        _, g = loss_cam(vec, target)
        worst = max(worst, violation(g, central(lambda v: loss_cam(v, target)[0], vec.copy(), range(7), h),
                                     ANALYTIC_RTOL))
    return worst


_LEVEL1 = {}


def _level1():
    if not _LEVEL1:
        m = icosphere(1)
        _LEVEL1.update(mesh=m, smap=build_symmetry(m), L=cotangent_laplacian(m))
    return _LEVEL1


def check_smooth(n=100, seed=4, h=1e-5):
    rng = np.random.default_rng(seed)
    lv = _level1()
    worst = 0.0
    for _ in range(n):
        V = lv["mesh"].vertices + rng.normal(scale=0.1, size=lv["mesh"].vertices.shape)
        _, g = loss_smooth(V, lv["L"])
        vi = rng.choice(V.size, 20, replace=False)
        worst = max(worst, violation(g.ravel()[vi], central(lambda X: loss_smooth(X, lv["L"])[0], V.copy(), vi, h),
                                     ANALYTIC_RTOL))
    return worst


def check_def(n=100, seed=5, h=1e-5):
    rng = np.random.default_rng(seed)
    smap = _level1()["smap"]
    worst = 0.0
    for _ in range(n):
        d = rng.normal(scale=0.1, size=(smap.free_count, 3))
        _, g = loss_def(d, smap)
        vi = rng.choice(d.size, 20, replace=False)
        worst = max(worst, violation(g.ravel()[vi], central(lambda X: loss_def(X, smap)[0], d.copy(), vi, h),
                                     ANALYTIC_RTOL))
    return worst


def check_vert2kp(n=100, seed=6, h=1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        logits = rng.normal(scale=2.0, size=(3, 20))
        _, g = loss_vert2kp(logits)
        worst = max(worst, violation(g, central(lambda L: loss_vert2kp(L)[0], logits.copy(), range(logits.size), h),
                                     ANALYTIC_RTOL))
    return worst


def _off_cell_boundary(flow_raw, shape, idx, h, margin=20):
    """Flat flow indices whose sample stays inside one bilinear cell under a
    +-margin*h perturbation of the raw value."""
    f = np.tanh(flow_raw).reshape(-1, 2)
    hw = np.array([shape[1], shape[0]])
    keep = []
    for i in idx:
        p, c = divmod(i, 2)
        x = (f[p, c] + 1) * 0.5 * (hw[c] - 1)
        dx = margin * h * 0.5 * (hw[c] - 1)
        if np.floor(x - dx) == np.floor(x + dx) and 0 < x - dx and x + dx < hw[c] - 1:
            keep.append(i)
    return keep


def check_texture(n=100, seed=7, h=1e-7):
    rng = np.random.default_rng(seed)
    uv_shape = (6, 8)
    sphere = icosphere(1)
    uv = sphere_uv(sphere, build_symmetry(sphere)).uv
    worst = 0.0
    for _ in range(n):
        ann = annotation(rng)
        plan = texture_plan(sphere.vertices, sphere.faces, random_camera(rng), uv, RasterConfig(16, 16), uv_shape)
        flow_raw = rng.normal(scale=0.8, size=(*uv_shape, 2))
        _, g = loss_texture(flow_raw, ann, plan)
        idx = _off_cell_boundary(flow_raw, ann.shape, rng.choice(flow_raw.size, 24, replace=False), h)
        fd = central(lambda f: loss_texture(f, ann, plan)[0], flow_raw.copy(), idx, h)
        worst = max(worst, violation(g.ravel()[idx], fd, 1e-4))
    return worst


def check_dt(n=100, seed=8, h=1e-7):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        ann = annotation(rng)
        flow_raw = rng.normal(scale=0.8, size=(6, 8, 2))
        _, g = loss_dt(flow_raw, ann.dfield)
        idx = _off_cell_boundary(flow_raw, ann.shape, range(flow_raw.size), h)
        fd = central(lambda f: loss_dt(f, ann.dfield)[0], flow_raw.copy(), idx, h)
        worst = max(worst, violation(g.ravel()[idx], fd, 1e-4))
    return worst


_FIXED = {}


def check_total(n=100, seed=9, h=1e-5):
    """Full weighted objective on a level-1 model, every parameter block."""
    rng = np.random.default_rng(seed)
    if not _FIXED:
        _FIXED["fixed"], _FIXED["sphere"] = build_fixed(1, (6, 8))
    fixed, sphere = _FIXED["fixed"], _FIXED["sphere"]
    P = fixed.smap.free_count
    worst = 0.0
    for _ in range(n):
        cfg = ObjectiveConfig(**{k: rng.uniform(0.1, 1.0) for k in
                                 ("w_reproj", "w_mask", "w_cam", "w_smooth", "w_def", "w_vert2kp")},
                              raster=RasterConfig(16, 16, sigma=1e-2))
        ann = annotation(rng)
        params = {
            "mean": sphere[fixed.smap.free_index] * 0.8 + rng.normal(scale=0.05, size=(P, 3)),
            "delta": rng.normal(scale=0.05, size=(P, 3)),
            "kp_logits": rng.normal(size=(4, len(sphere))),
            "cam": random_camera(rng).to_vector(),
        }
        rep = total_objective(params, ann, fixed, cfg)
        for block, arr in params.items():
            idx = rng.choice(arr.size, min(6, arr.size), replace=False)

            def f(x, block=block):
                return total_objective({**params, block: x}, ann, fixed, cfg).total
            fd = central(f, arr.copy(), idx, h)
            worst = max(worst, violation(rep.grads[block].ravel()[idx], fd, RASTER_RTOL))
    return worst


CHECKS = {
    "soft_silhouette": check_soft_silhouette,
    "mask": check_mask,
    "reproj": check_reproj,
    "cam": check_cam,
    "smooth": check_smooth,
    "def": check_def,
    "vert2kp": check_vert2kp,
    "texture": check_texture,
    "dt": check_dt,
    "total": check_total,
}
