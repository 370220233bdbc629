"""Loss terms for shape/camera (reprojection, mask, camera, smoothness,
deformation, keypoint entropy) and texture (masked L1, distance transform),
each with analytic gradients."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .camera import Camera, camera_distance_grad, project_vec, project_vjp
from .errors import NumericError
from .geom import SymmetryMap, expand_symmetric, reduce_symmetric
from .render import (FragmentBuffer, RasterConfig, rasterize_hard, soft_silhouette,
                     soft_silhouette_backward, texture_coords)
from .texture import bilinear_coord_grad, bilinear_sample, bilinear_weights

ENTROPY_EPS = 1e-12
NORM_EPS = 1e-8

SHAPE_TERMS = ("reproj", "mask", "cam", "smooth", "def", "vert2kp")
TEXTURE_TERMS = ("texture", "dt")


@dataclass(frozen=True)
class InstanceAnnotation:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    keypoints: np.ndarray  # (K, 2) normalized
    visible: np.ndarray  # (K,) bool
    sfm_cam: Camera
    dfield: np.ndarray  # (H, W) distance to foreground, pixels
    name: str = ""
    keypoints_px: np.ndarray | None = None  # as annotated, kept for bit-exact re-saving

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class ObjectiveConfig:
    w_reproj: float = 1.0
    w_mask: float = 1.0
    w_cam: float = 1.0
    w_smooth: float = 0.1
    w_def: float = 0.1
    w_vert2kp: float = 0.01
    w_texture: float = 1.0
    w_dt: float = 0.5
    raster: RasterConfig = field(default_factory=RasterConfig)

    def __post_init__(self):
        for name in ("w_reproj", "w_mask", "w_cam", "w_smooth", "w_def", "w_vert2kp", "w_texture", "w_dt"):
            w = getattr(self, name)
            if not (np.isfinite(w) and w >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {w}")

    def weight(self, term: str) -> float:
        return getattr(self, "w_" + term)


@dataclass
class LossReport:
    terms: dict
    total: float
    grads: dict

    def to_record(self, step: int) -> dict:
        return {"step": step, "total": self.total, **{k: float(v) for k, v in self.terms.items()}}


# ---------------------------------------------------------------- helpers


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(A: np.ndarray, gA: np.ndarray) -> np.ndarray:
    return A * (gA - np.sum(gA * A, axis=1, keepdims=True))


# ---------------------------------------------------------------- shape terms


def loss_reproj(V: np.ndarray, logits: np.ndarray, ann: InstanceAnnotation):
    """Mean smoothed distance between visible keypoints and the projected
    keypoints A V under the SfM camera. Returns (value, dV, dlogits)."""
    vis = ann.visible
    nvis = int(vis.sum())
    if nvis == 0:
        warnings.warn(f"instance {ann.name!r} has no visible keypoints; reprojection skipped")
        return 0.0, np.zeros_like(V), np.zeros_like(logits)
    A = softmax(logits)
    P = A @ V
    cvec = ann.sfm_cam.to_vector()
    r = project_vec(cvec, P) - ann.keypoints
    n = np.sqrt(np.sum(r**2, axis=1) + NORM_EPS)
    val = float(np.sum(n[vis]) / nvis)
    gproj = np.where(vis[:, None], r / n[:, None], 0.0) / nvis
    gP, _ = project_vjp(cvec, P, gproj)
    gA = gP @ V.T
    gV = A.T @ gP
    return val, gV, softmax_backward(A, gA)


def loss_mask(V: np.ndarray, F: np.ndarray, ann: InstanceAnnotation, cfg: RasterConfig):
    """Mean squared difference between the mask and the soft silhouette under
    the SfM camera. Returns (value, dV)."""
    img, cache = soft_silhouette(V, F, ann.sfm_cam, cfg, return_cache=True)
    diff = img - ann.mask
    val = float(np.mean(diff**2))
    gV, _ = soft_silhouette_backward(cache, 2.0 * diff / diff.size)
    return val, gV


def loss_cam(cam_vec: np.ndarray, sfm: Camera):
    return camera_distance_grad(np.asarray(cam_vec, dtype=np.float64), sfm)


def loss_smooth(V: np.ndarray, L: sp.spmatrix):
    LV = L @ V
    n = V.shape[0]
    return float(np.sum(LV**2) / n), 2.0 * (L.T @ LV) / n


def loss_def(delta_free: np.ndarray, smap: SymmetryMap):
    D = expand_symmetric(smap, delta_free)
    n = D.shape[0]
    return float(np.sum(D**2) / n), reduce_symmetric(smap, 2.0 * D / n)


def loss_vert2kp(logits: np.ndarray):
    """Average keypoint-assignment entropy. Returns (value, dlogits)."""
    A = softmax(logits)
    K = A.shape[0]
    logA = np.log(A + ENTROPY_EPS)
    val = float(-np.sum(A * logA) / K)
    gA = -(logA + A / (A + ENTROPY_EPS)) / K
    return val, softmax_backward(A, gA)


# ---------------------------------------------------------------- texture terms


@dataclass(frozen=True)
class TexturePlan:
    """Fixed sampling of the UV image by the hard rasterization of a frozen
    shape: rendered[cov] = W @ tex.reshape(-1, C)."""
    cov: np.ndarray
    W: sp.csr_matrix
    uv_shape: tuple

    @classmethod
    def build(cls, buf: FragmentBuffer, uv: np.ndarray, uv_shape: tuple) -> "TexturePlan":
        cov, coords = texture_coords(buf, uv)
        idx, wts, _, _ = bilinear_weights(uv_shape, coords)
        rows = np.repeat(np.arange(len(cov)), 4)
        W = sp.csr_matrix((wts.ravel(), (rows, idx.ravel())), shape=(len(cov), uv_shape[0] * uv_shape[1]))
        return cls(cov, W, tuple(uv_shape))

    def render(self, tex: np.ndarray, hw: tuple) -> np.ndarray:
        c = tex.shape[-1]
        out = np.zeros((hw[0] * hw[1], c))
        out[self.cov] = self.W @ tex.reshape(-1, c)
        return out.reshape(*hw, c)


def texture_plan(V, F, cam: Camera, uv: np.ndarray, cfg: RasterConfig, uv_shape: tuple) -> TexturePlan:
    return TexturePlan.build(rasterize_hard(V, F, cam, cfg), uv, uv_shape)


def loss_texture(flow_raw: np.ndarray, ann: InstanceAnnotation, plan: TexturePlan):
    """Masked L1 between the foreground image and the textured rendering of
    the frozen shape. Gradients reach the raw flow only.
    Returns (value, dflow_raw)."""
    mask = ann.mask.astype(np.float64)
    nfg = float(mask.sum())
    if nfg == 0:
        warnings.warn(f"instance {ann.name!r} has an empty foreground; texture loss skipped")
        return 0.0, np.zeros_like(flow_raw)
    flow = np.tanh(flow_raw)
    tex = bilinear_sample(ann.image, flow)
    rendered = plan.render(tex, ann.shape)
    diff = mask[..., None] * (ann.image - rendered)
    c = ann.image.shape[2]
    val = float(np.abs(diff).sum() / (nfg * c))
    g_render = -mask[..., None] * np.sign(diff) / (nfg * c)
    g_tex = (plan.W.T @ g_render.reshape(-1, c)[plan.cov]).reshape(*plan.uv_shape, c)
    g_flow = bilinear_coord_grad(ann.image, flow, g_tex)
    return val, g_flow * (1.0 - flow**2)


def loss_dt(flow_raw: np.ndarray, dfield: np.ndarray):
    """Mean distance-to-foreground sampled at the flow targets.
    Returns (value, dflow_raw)."""
    flow = np.tanh(flow_raw)
    vals = bilinear_sample(dfield, flow)
    n = vals.size
    g = bilinear_coord_grad(dfield, flow, np.full(vals.shape, 1.0 / n))
    return float(vals.mean()), g * (1.0 - flow**2)


# ---------------------------------------------------------------- totals


@dataclass(frozen=True)
class FixedParts:
    """Topology and operators shared by every instance."""
    faces: np.ndarray
    smap: SymmetryMap
    laplacian: sp.csr_matrix
    uv: np.ndarray
    uv_shape: tuple = (64, 128)


def instance_vertices(fixed: FixedParts, mean_free: np.ndarray, delta_free: np.ndarray) -> np.ndarray:
    return expand_symmetric(fixed.smap, mean_free + delta_free)


def total_objective(params: dict, ann: InstanceAnnotation, fixed: FixedParts, cfg: ObjectiveConfig) -> LossReport:
    """Weighted shape/camera objective for one instance.

    params: mean (P,3), delta (P,3), kp_logits (K,V), cam (7,) raw vector.
    Gradients are returned for all four blocks; the camera block only sees
    the camera regression term.
    """
    V = instance_vertices(fixed, params["mean"], params["delta"])
    gV = np.zeros_like(V)
    g_logits = np.zeros_like(params["kp_logits"])
    g_delta_extra = np.zeros_like(params["delta"])
    terms = {}

    if cfg.w_reproj:
        terms["reproj"], gv, gl = loss_reproj(V, params["kp_logits"], ann)
        gV += cfg.w_reproj * gv
        g_logits += cfg.w_reproj * gl
    else:
        terms["reproj"] = 0.0
    if cfg.w_mask:
        terms["mask"], gv = loss_mask(V, fixed.faces, ann, cfg.raster)
        gV += cfg.w_mask * gv
    else:
        terms["mask"] = 0.0
    terms["cam"], g_cam = loss_cam(params["cam"], ann.sfm_cam)
    g_cam = cfg.w_cam * g_cam
    terms["smooth"], gv = loss_smooth(V, fixed.laplacian)
    gV += cfg.w_smooth * gv
    terms["def"], gd = loss_def(params["delta"], fixed.smap)
    g_delta_extra += cfg.w_def * gd
    terms["vert2kp"], gl = loss_vert2kp(params["kp_logits"])
    g_logits += cfg.w_vert2kp * gl

    for k, v in terms.items():
        if not np.isfinite(v):
            raise NumericError(f"loss term {k} is not finite")
    total = float(sum(cfg.weight(k) * terms[k] for k in SHAPE_TERMS))
    g_free = reduce_symmetric(fixed.smap, gV)
    grads = {
        "mean": g_free,
        "delta": g_free + g_delta_extra,
        "kp_logits": g_logits,
        "cam": g_cam,
    }
    return LossReport(terms, total, grads)


def texture_objective(flow_raw: np.ndarray, ann: InstanceAnnotation, plan: TexturePlan,
                      cfg: ObjectiveConfig) -> LossReport:
    terms = {}
    g = np.zeros_like(flow_raw)
    terms["texture"], gt = loss_texture(flow_raw, ann, plan)
    g += cfg.w_texture * gt
    terms["dt"], gd = loss_dt(flow_raw, ann.dfield)
    g += cfg.w_dt * gd
    for k, v in terms.items():
        if not np.isfinite(v):
            raise NumericError(f"loss term {k} is not finite")
    total = float(sum(cfg.weight(k) * terms[k] for k in TEXTURE_TERMS))
    return LossReport(terms, total, {"flow": g})
