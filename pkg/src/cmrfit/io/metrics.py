"""Mask IoU, IoU-threshold curves, keypoint PCK and assignment entropy."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..camera import Camera, project
from ..render import RasterConfig, rasterize_hard

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    a, b = np.asarray(pred, bool), np.asarray(gt, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_curve(ious, thresholds=IOU_THRESHOLDS) -> list:
    """Fraction of instances whose IoU is at least each threshold."""
    ious = np.asarray(ious, dtype=np.float64)
    return [float(np.mean(ious >= t)) if len(ious) else 0.0 for t in thresholds]


def pck(pred_px: np.ndarray, gt_px: np.ndarray, visible: np.ndarray, alpha: float, size: tuple) -> tuple[int, int]:
    """(correct, total) visible keypoints within alpha * max(H, W) pixels."""
    vis = np.asarray(visible, bool)
    err = np.linalg.norm(np.asarray(pred_px) - np.asarray(gt_px), axis=-1)
    return int(np.count_nonzero(err[vis] < alpha * max(size))), int(vis.sum())


def assignment_entropy(A: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return -np.sum(A * np.log(A + eps), axis=1)


@dataclass
class MetricsReport:
    names: list
    iou_sfm: list
    iou_pred: list
    thresholds: list
    curve_sfm: list
    curve_pred: list
    pck: dict  # alpha -> fraction of visible keypoints
    entropy: float

    @property
    def mean_iou_sfm(self) -> float:
        return float(np.mean(self.iou_sfm)) if self.iou_sfm else 0.0

    @property
    def mean_iou_pred(self) -> float:
        return float(np.mean(self.iou_pred)) if self.iou_pred else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pck"] = {str(k): v for k, v in self.pck.items()}
        d["mean_iou_sfm"] = self.mean_iou_sfm
        d["mean_iou_pred"] = self.mean_iou_pred
        return d


def _to_px(xy: np.ndarray, size: tuple) -> np.ndarray:
    h, w = size
    return (xy + 1.0) * np.array([w / 2.0, h / 2.0])


def eval_metrics(model, dataset, raster: RasterConfig | None = None, pck_alphas=(0.1,),
                 instances: list | None = None) -> MetricsReport:
    """Evaluate a trained collection on its dataset.

    `instances` optionally overrides per-instance predictions with dicts
    holding "vertices" and "cam" (e.g. single-image fits); the SfM camera
    then comes from the annotation.
    """
    anns = dataset.annotations
    H, W = dataset.image_size
    cfg = raster or RasterConfig(W, H)
    F = model.fixed.faces
    A = model.assignment()
    iou_s, iou_p = [], []
    hits = {a: [0, 0] for a in pck_alphas}
    for i, ann in enumerate(anns):
        if instances is None:
            V, cam = model.vertices(i), model.camera(i)
        else:
            V, cam = instances[i]["vertices"], instances[i]["cam"]
        if not isinstance(cam, Camera):
            cam = Camera.from_vector(cam)
        iou_p.append(mask_iou(rasterize_hard(V, F, cam, cfg).covered, ann.mask))
        if ann.sfm_cam is not None:
            iou_s.append(mask_iou(rasterize_hard(V, F, ann.sfm_cam, cfg).covered, ann.mask))
        pred = _to_px(project(cam, A @ V), (H, W))
        gt = _to_px(ann.keypoints, (H, W))
        for a in pck_alphas:
            c, n = pck(pred, gt, ann.visible, a, (H, W))
            hits[a][0] += c
            hits[a][1] += n
    return MetricsReport(
        names=[a.name for a in anns],
        iou_sfm=[float(v) for v in iou_s],
        iou_pred=[float(v) for v in iou_p],
        thresholds=[float(t) for t in IOU_THRESHOLDS],
        curve_sfm=iou_curve(iou_s),
        curve_pred=iou_curve(iou_p),
        pck={a: (c / n if n else 0.0) for a, (c, n) in hits.items()},
        entropy=float(np.mean(assignment_entropy(A))),
    )
