import numpy as np
import pytest

from cmrfit.camera import Camera
from cmrfit.errors import NumericError
from cmrfit.geom import icosphere
from cmrfit.render import (RasterConfig, pixel_centers, rasterize_hard, render_textured, render_textured_tex_grad,
                           signed_distance_2d, soft_silhouette)

from gradcheck import check_soft_silhouette, small_mesh
from helpers import random_quat

TRI = [(0, 0), (1, 0), (0, 1)]


def seg_dist(p, a, b):
    p, a, b = map(np.asarray, (p, a, b))
    t = np.clip((p - a) @ (b - a) / ((b - a) @ (b - a)), 0, 1)
    return np.linalg.norm(p - a - t * (b - a))


def bary_inside(tri, p):
    a, b, c = map(np.asarray, tri)
    T = np.column_stack([b - a, c - a])
    l1, l2 = np.linalg.solve(T, np.asarray(p) - a)
    return l1 >= 0 and l2 >= 0 and l1 + l2 <= 1


def test_signed_distance_examples():
    assert signed_distance_2d(TRI, (0.25, 0.25)) == pytest.approx(0.25, abs=1e-15)
    assert signed_distance_2d(TRI, (-0.25, 0.5)) == pytest.approx(-0.25, abs=1e-15)


def test_signed_distance_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        tri = rng.normal(size=(3, 2))
        p = rng.normal(size=2)
        d = signed_distance_2d(tri, p)
        ref = min(seg_dist(p, tri[i], tri[(i + 1) % 3]) for i in range(3))
        assert abs(abs(d) - ref) < 1e-12
        assert (d > 0) == bary_inside(tri, p)


def test_soft_silhouette_full_cover_and_empty():
    V = np.array([[-5.0, -5, 0], [5, -5, 0], [0, 5, 0]])
    F = np.array([[0, 1, 2]])
    cfg = RasterConfig(16, 16, sigma=1e-5)
    img = soft_silhouette(V, F, Camera(1.0), cfg)
    assert img.min() > 0.99
    assert np.all(soft_silhouette(V, np.zeros((0, 3), int), Camera(1.0), cfg) == 0)


def test_soft_silhouette_range_and_nonfinite():
    rng = np.random.default_rng(1)
    V, F = small_mesh(rng)
    img = soft_silhouette(V, F, Camera(0.7, [0, 0], random_quat(rng)), RasterConfig(16, 16, sigma=1e-2))
    assert img.min() >= 0 and img.max() <= 1
    V[0, 0] = np.nan
    with pytest.raises(NumericError):
        soft_silhouette(V, F, Camera(1.0), RasterConfig(16, 16))


def test_soft_silhouette_gradients():
    assert check_soft_silhouette(n=30) <= 1.0


def test_hard_single_triangle():
    V = np.array([[-0.93, -0.91, 0.0], [0.87, -0.9, 0.0], [-0.9, 0.89, 0.0]])
    buf = rasterize_hard(V, [[0, 1, 2]], Camera(1.0), RasterConfig(8, 8))
    cov = buf.covered
    assert cov[0, 0] and not cov[7, 7]
    np.testing.assert_allclose(buf.bary[cov].sum(axis=1), 1.0, atol=1e-12)
    assert np.all(buf.bary[cov] >= -1e-12)
    # coverage agrees with the inside test at every pixel center
    centers = pixel_centers(RasterConfig(8, 8))
    tri = V[:, :2]
    expect = np.array([[bary_inside(tri, centers[j, i]) for i in range(8)] for j in range(8)])
    assert np.array_equal(cov, expect)


def test_hard_depth_order():
    base = np.array([[-1.5, -1.5], [1.5, -1.5], [0.0, 1.5]])
    V = np.vstack([np.c_[base, np.full(3, 0.5)], np.c_[base * 0.8, np.full(3, -0.5)]])
    F = np.array([[0, 1, 2], [3, 4, 5]])
    buf = rasterize_hard(V, F, Camera(1.0), RasterConfig(16, 16))
    both = rasterize_hard(V[3:], [[0, 1, 2]], Camera(1.0), RasterConfig(16, 16)).covered
    assert np.all(buf.face[both] == 1)
    np.testing.assert_allclose(buf.depth[both], -0.5)
    # reversing face order changes nothing
    buf2 = rasterize_hard(V, F[::-1], Camera(1.0), RasterConfig(16, 16))
    assert np.array_equal(np.where(buf2.face >= 0, 1 - buf2.face, -1), buf.face)


def test_soft_hard_agreement():
    rng = np.random.default_rng(2)
    sphere = icosphere(2)
    for _ in range(5):
        V = sphere.vertices * rng.uniform(0.5, 1.0, 3)
        cam = Camera(0.7, rng.uniform(-0.1, 0.1, 2), random_quat(rng))
        cfg = RasterConfig(32, 32, sigma=1e-7)
        soft = soft_silhouette(V, sphere.faces, cam, cfg) > 0.5
        hard = rasterize_hard(V, sphere.faces, cam, cfg).covered
        assert np.mean(soft != hard) < 0.01


def test_soft_to_hard_monotone():
    rng = np.random.default_rng(3)
    sphere = icosphere(2)
    V = sphere.vertices * [0.6, 1.0, 0.7]
    cam = Camera(0.7, [0.03, -0.02], random_quat(rng))
    hard = rasterize_hard(V, sphere.faces, cam, RasterConfig(32, 32)).covered
    errs = [np.mean(np.abs(soft_silhouette(V, sphere.faces, cam, RasterConfig(32, 32, sigma=s)) - hard))
            for s in (1e-3, 1e-4, 1e-5, 1e-6)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_translation_shifts_silhouette():
    sphere = icosphere(2)
    V = sphere.vertices * [0.4, 0.4, 0.4]
    cfg = RasterConfig(32, 32, sigma=1e-4)
    a = soft_silhouette(V, sphere.faces, Camera(1.0), cfg)
    delta = 0.25
    b = soft_silhouette(V, sphere.faces, Camera(1.0, [delta, 0.0]), cfg)
    # cross-correlation peak along x
    shifts = range(-8, 9)
    score = [np.sum(a * np.roll(b, -k, axis=1)) for k in shifts]
    assert abs(list(shifts)[int(np.argmax(score))] - delta / 2 * cfg.width) <= 1


def _textured_scene(seed):
    rng = np.random.default_rng(seed)
    sphere = icosphere(1)
    uv = rng.uniform(0, 1, (len(sphere.faces), 3, 2))
    buf = rasterize_hard(sphere.vertices * 0.8, sphere.faces, Camera(0.9, [0, 0], random_quat(rng)),
                         RasterConfig(16, 16))
    return rng, buf, uv


def test_render_textured_constant_and_linear():
    rng, buf, uv = _textured_scene(4)
    out = render_textured(buf, uv, np.ones((6, 8, 3)) * [0.2, 0.5, 0.7])
    np.testing.assert_allclose(out[buf.covered], np.tile([0.2, 0.5, 0.7], (buf.covered.sum(), 1)), atol=1e-15)
    assert np.all(out[~buf.covered] == 0)
    t1, t2 = rng.uniform(size=(2, 6, 8, 3))
    a, b = 0.3, -1.7
    np.testing.assert_allclose(render_textured(buf, uv, a * t1 + b * t2),
                               a * render_textured(buf, uv, t1) + b * render_textured(buf, uv, t2), atol=1e-14)


def test_render_textured_tex_grad():
    rng, buf, uv = _textured_scene(5)
    up = rng.normal(size=(16, 16, 3))
    tex = rng.uniform(size=(6, 8, 3))
    g = render_textured_tex_grad(buf, uv, (6, 8), up)
    h = 1e-6
    for idx in [tuple(rng.integers(0, s) for s in tex.shape) for _ in range(30)]:
        tp, tm = tex.copy(), tex.copy()
        tp[idx] += h
        tm[idx] -= h
        fd = (np.sum(up * render_textured(buf, uv, tp)) - np.sum(up * render_textured(buf, uv, tm))) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-6 * abs(fd) + 1e-9


def test_hard_offscreen_covers_nothing():
    sphere = icosphere(1)
    buf = rasterize_hard(sphere.vertices * 0.5, sphere.faces, Camera(1.0, [5.0, 5.0]), RasterConfig(8, 8))
    assert not buf.covered.any() and np.all(np.isinf(buf.depth))
