"""Shared fixtures-by-function for the unit and acceptance suites."""

import numpy as np

from cmrfit.camera import Camera, KeypointObservations, align_similarity, project, rotation_angle
from cmrfit.geom import Mesh


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def sfm_scene(n_cams=8, n_kp=15, noise=0.0, seed=0):
    """Random rigid keypoint scene seen by weak-perspective cameras.
    noise is a standard deviation relative to the RMS distance of each view's
    keypoints from their centroid."""
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n_kp, 3)) * [1.0, 0.7, 0.5]
    B -= B.mean(axis=0)
    cams = [Camera(rng.uniform(0.3, 0.6), rng.uniform(-0.1, 0.1, 2), random_quat(rng)) for _ in range(n_cams)]
    obs = []
    for c in cams:
        x = project(c, B)
        if noise:
            rms = np.sqrt(np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1)))
            x = x + rng.normal(scale=noise * rms, size=x.shape)
        obs.append(KeypointObservations(x, np.ones(n_kp, bool)))
    return B, cams, obs


def sfm_errors(result, B_true, cams_true):
    """(3D RMSE relative to scene scale, max rotation error in degrees)
    after a similarity alignment of the recovered structure to the truth."""
    scale, Q, t = align_similarity(result.B, B_true)
    aligned = scale * result.B @ Q.T + t
    extent = np.sqrt(np.mean(np.sum((B_true - B_true.mean(axis=0)) ** 2, axis=1)))
    rmse = np.sqrt(np.mean(np.sum((aligned - B_true) ** 2, axis=1))) / extent
    errs = []
    for c, ct in zip(result.cameras, cams_true):
        rows = c.R[:2] @ Q.T
        R = np.vstack([rows, np.cross(rows[0], rows[1])])
        errs.append(np.degrees(rotation_angle(R, ct.R)))
    return rmse, max(errs)


def fd_grad(f, x, h):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def grad_violation(a, b, rtol, atol=1e-6):
    """Largest ratio |a - b| / (rtol |b| + atol); the check passes when it
    is at most 1."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / (rtol * np.abs(b) + atol)))


def scalar_bilinear(img, x, y):
    """Per-point reference: clamp, locate the cell, blend four corners."""
    h, w = img.shape[:2]
    px = min(max((x + 1) / 2 * (w - 1), 0.0), w - 1.0)
    py = min(max((y + 1) / 2 * (h - 1), 0.0), h - 1.0)
    x0 = min(int(np.floor(px)), w - 2)
    y0 = min(int(np.floor(py)), h - 2)
    a, b = px - x0, py - y0
    return ((1 - a) * (1 - b) * img[y0, x0] + a * (1 - b) * img[y0, x0 + 1]
            + (1 - a) * b * img[y0 + 1, x0] + a * b * img[y0 + 1, x0 + 1])


def brute_edt(mask):
    fg = np.argwhere(mask)
    h, w = mask.shape
    out = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            out[r, c] = np.sqrt(np.min((fg[:, 0] - r) ** 2 + (fg[:, 1] - c) ** 2))
    return out


def flat_patch(n=6, seed=0):
    """Jittered planar grid triangulated into a square patch."""
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    P = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
    inner = (P[:, 0] > 0) & (P[:, 0] < n - 1) & (P[:, 1] > 0) & (P[:, 1] < n - 1)
    P[inner, :2] += rng.uniform(-0.2, 0.2, size=(inner.sum(), 2))
    F = []
    for r in range(n - 1):
        for c in range(n - 1):
            a, b, d, e = r * n + c, r * n + c + 1, (r + 1) * n + c, (r + 1) * n + c + 1
            F += [(a, b, e), (a, e, d)]
    return Mesh(P, np.array(F)), np.flatnonzero(inner)
