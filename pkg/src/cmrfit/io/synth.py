"""Procedural category generator used to exercise the learning pipeline.

The ground-truth category is a bird-like symmetric blob on the icosphere:
an ellipsoidal body with a head bump, deformed per instance along three
smooth symmetric modes. Cameras look mostly from the side with bounded
elevation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..camera import Camera, matrix_to_quat, project
from ..geom import build_symmetry, icosphere
from ..render import RasterConfig, rasterize_hard, render_textured
from ..texture import UV_SHAPE, sphere_uv
from .dataset import Dataset, make_annotation, normalized_to_pixels, save_dataset
from .images import to_uint8

DEFAULT_PALETTE = ((0.80, 0.35, 0.20), (0.25, 0.55, 0.80), (0.35, 0.70, 0.30),
                   (0.85, 0.75, 0.25), (0.60, 0.35, 0.70))

# target directions on the unit sphere; pairs are (left, right) with left at x < 0
KEYPOINTS_ON_PLANE = {
    "back": (0.0, -0.1, 1.0),
    "beak": (0.0, 1.0, 0.2),
    "belly": (0.0, 0.1, -1.0),
    "breast": (0.0, 0.6, -0.8),
    "crown": (0.0, 0.55, 0.85),
    "forehead": (0.0, 0.85, 0.55),
    "nape": (0.0, 0.25, 0.95),
    "tail": (0.0, -1.0, 0.1),
    "throat": (0.0, 0.85, -0.5),
}
KEYPOINTS_PAIRED = {
    "wing": (0.95, -0.2, 0.3),
    "leg": (0.5, 0.1, -0.85),
    "eye": (0.45, 0.8, 0.5),
}


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_instances: int = 40
    image_size: int = 64
    amplitude: float = 0.25
    palette: tuple = DEFAULT_PALETTE
    texture_variation: float = 0.25
    elevation_deg: float = 25.0
    azimuth_deg: float = 60.0
    scale_range: tuple = (0.5, 0.62)
    translation: float = 0.08
    # keypoints facing away beyond this normal component, or behind the
    # z-buffer by more than the occlusion tolerance, are unannotated
    facing_tol: float = 0.3
    occlusion_tol: float = 0.15


def base_shape(unit: np.ndarray) -> np.ndarray:
    """Category mean shape on unit-sphere directions (mirror-symmetric)."""
    x, y, z = unit.T
    body = np.stack([0.55 * x, 1.0 * y, 0.6 * z], axis=1)
    head = np.exp(-((y - 0.8) ** 2 + (z - 0.4) ** 2 + x**2) / 0.15)
    return body + 0.35 * head[:, None] * np.stack([0.2 * x, 0.3 * np.ones_like(y), 0.8 * np.ones_like(z)], axis=1)


def deformation_basis(shape: np.ndarray, anchors=None) -> np.ndarray:
    """Three symmetric smooth modes (3, V, 3): a vertical bend along the
    body axis (dominant), a front-to-back taper of the width, and a
    vertical shear that grows toward the ends.

    Each profile has its best symmetric affine fit over the `anchors`
    vertices removed, so on those vertices no camera change can mimic it.
    """
    x, y, z = shape.T
    idx = np.arange(len(shape)) if anchors is None else np.asarray(anchors)
    one = np.ones_like(x)

    def mode(axis, profile, affine):
        design = np.stack(affine, axis=1)
        coef, *_ = np.linalg.lstsq(design[idx], profile[idx], rcond=None)
        m = np.zeros_like(shape)
        m[:, axis] = profile - design @ coef
        return m

    return np.stack([
        mode(2, y**2, [one, y, z]),
        mode(0, x * y, [x]),
        mode(2, y**3, [one, y, z]),
    ])


MODE_STD = np.array([1.0, 0.3, 0.3])


def _keypoint_vertices(unit: np.ndarray, smap) -> tuple[list, list, list]:
    names, idx, pairs = [], [], []
    on = smap.on_plane
    for name, d in KEYPOINTS_ON_PLANE.items():
        d = np.asarray(d) / np.linalg.norm(d)
        names.append(name)
        idx.append(int(on[np.argmax(unit[on] @ d)]))
    perm = smap.mirror_permutation()
    for name, d in KEYPOINTS_PAIRED.items():
        d = np.asarray(d) / np.linalg.norm(d)
        right = int(np.argmax(unit @ d))
        left = int(perm[right])
        pairs.append((len(names), len(names) + 1))
        names += [f"left_{name}", f"right_{name}"]
        idx += [left, right]
    return names, idx, pairs


def vertex_normals(V: np.ndarray, F: np.ndarray) -> np.ndarray:
    fn = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    n = np.zeros_like(V)
    for k in range(3):
        n += np.stack([np.bincount(F[:, k], fn[:, c], len(V)) for c in range(3)], axis=1)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _side_rotation() -> np.ndarray:
    # object y (front) -> image x, object z (up) -> image -y, right side toward the viewer
    return np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _texture(rng, base_color, variation, uv_shape=UV_SHAPE) -> np.ndarray:
    h, w = uv_shape
    v, u = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, size=3)
    field = np.stack([
        np.sin(np.pi * v + phase[0]),
        np.cos(2 * np.pi * u + phase[1]) * np.sin(np.pi * v),
        np.sin(2 * np.pi * v + phase[2]),
    ], axis=-1)
    mix = rng.normal(size=(3, 3)) * 0.5
    return np.clip(np.asarray(base_color) + variation * field @ mix, 0.05, 0.95)


def synth_generate(spec: SynthSpec, out_dir=None) -> tuple[Dataset, dict]:
    """Render a synthetic annotated collection. Returns the dataset and the
    ground-truth sidecar; both are written under out_dir when given."""
    rng = np.random.default_rng(spec.seed)
    sphere = icosphere(3)
    smap = build_symmetry(sphere)
    unit = sphere.vertices
    uv = sphere_uv(sphere, smap).uv
    mean = base_shape(unit)
    names, kp_idx, pairs = _keypoint_vertices(unit, smap)
    basis = deformation_basis(mean, kp_idx)
    cfg = RasterConfig(spec.image_size, spec.image_size)
    H = W = spec.image_size

    anns, gt_inst = [], []
    yy, xx = np.mgrid[:H, :W] / max(H - 1, 1)
    for i in range(spec.n_instances):
        coeff = rng.normal(size=3) * MODE_STD * spec.amplitude
        V = mean + np.einsum("m,mvc->vc", coeff, basis)
        az = np.radians(rng.uniform(-spec.azimuth_deg, spec.azimuth_deg)) + (np.pi if rng.random() < 0.5 else 0.0)
        el = np.radians(rng.uniform(-spec.elevation_deg, spec.elevation_deg))
        R = _rot_x(el) @ _side_rotation() @ _rot_z(az)
        s = rng.uniform(*spec.scale_range)
        t = rng.uniform(-spec.translation, spec.translation, size=2)
        cam = Camera(s, t, matrix_to_quat(R))
        color = spec.palette[i % len(spec.palette)]
        tex = _texture(rng, color, spec.texture_variation)
        buf = rasterize_hard(V, sphere.faces, cam, cfg)
        fg = render_textured(buf, uv, tex)
        bg_color = rng.uniform(0.3, 0.7, size=3)
        bg = np.clip(bg_color * (0.8 + 0.2 * (xx[..., None] + yy[..., None]) / 2)
                     + rng.normal(scale=0.03, size=(H, W, 3)), 0, 1)
        image = np.where(buf.covered[..., None], fg, bg)
        kp3 = V[kp_idx]
        kp2 = project(cam, kp3)
        depth = kp3 @ cam.R[2]
        px = normalized_to_pixels(kp2, (H, W))
        ij = np.clip(np.floor(px).astype(int), 0, [W - 1, H - 1])
        zbuf = buf.depth[ij[:, 1], ij[:, 0]]
        facing = vertex_normals(V, sphere.faces)[kp_idx] @ cam.R[2] < spec.facing_tol
        vis = facing & (~np.isfinite(zbuf) | (depth <= zbuf + spec.occlusion_tol))
        ann = make_annotation(to_uint8(image), np.where(buf.covered, 255, 0).astype(np.uint8), px, vis, f"{i:04d}")
        anns.append(ann)
        gt_inst.append({"camera": cam.to_dict(), "coefficients": coeff.tolist(),
                        "keypoints3d": kp3.tolist(), "texture_color": list(color)})

    ds = Dataset(names, pairs, (H, W), anns)
    gt = {
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
        "keypoint_vertices": kp_idx,
        "mean_shape": mean.tolist(),
        "basis": basis.tolist(),
        "mode_std": MODE_STD.tolist(),
        "instances": gt_inst,
    }
    if out_dir is not None:
        out = Path(out_dir)
        save_dataset(ds, out)
        (out / "ground_truth.json").write_text(json.dumps(gt))
        ds.root = out
    return ds, gt
