"""Dataset manifest (JSON) loading and saving.

Manifest schema (version 1)::

    {
      "schema_version": 1,
      "image_size": [H, W],
      "keypoints": {"names": [...], "pairs": [[left_name, right_name], ...]},
      "instances": [
        {"id": "0000", "image": "images/0000.ppm", "mask": "masks/0000.pgm",
         "keypoints": [[x, y, visible], ...]}
      ]
    }

Keypoint coordinates are in pixels with pixel i spanning [i, i+1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..camera import KeypointObservations, SfMResult
from ..errors import DataError
from ..objective import InstanceAnnotation
from ..texture import distance_transform
from .images import read_pnm, write_pnm

SCHEMA_VERSION = 1


@dataclass
class Dataset:
    keypoint_names: list
    lr_pairs: list  # (left_index, right_index)
    image_size: tuple  # (H, W)
    annotations: list  # InstanceAnnotation, sfm_cam may be None before SfM
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.annotations)

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_names)

    def observations(self) -> list:
        return [KeypointObservations(a.keypoints, a.visible) for a in self.annotations]

    def with_cameras(self, sfm: SfMResult) -> "Dataset":
        if len(sfm.cameras) != len(self.annotations):
            raise DataError("SfM camera count does not match the dataset")
        anns = [replace(a, sfm_cam=c) for a, c in zip(self.annotations, sfm.cameras)]
        return replace(self, annotations=anns)

    def subset(self, rows) -> "Dataset":
        return replace(self, annotations=[self.annotations[i] for i in rows])


def pixels_to_normalized(xy, size) -> np.ndarray:
    h, w = size
    return np.asarray(xy, dtype=np.float64) * np.array([2.0 / w, 2.0 / h]) - 1.0


def normalized_to_pixels(xy, size) -> np.ndarray:
    h, w = size
    return (np.asarray(xy, dtype=np.float64) + 1.0) * np.array([w / 2.0, h / 2.0])


def make_annotation(image_u8, mask_u8, kp_pixels, visible, name="", sfm_cam=None) -> InstanceAnnotation:
    image = np.asarray(image_u8, dtype=np.float64) / 255.0
    mask = np.asarray(mask_u8) >= 128
    size = mask.shape
    kp_pixels = np.asarray(kp_pixels, dtype=np.float64)
    return InstanceAnnotation(image, mask, pixels_to_normalized(kp_pixels, size), np.asarray(visible, bool),
                              sfm_cam, distance_transform(mask), name, kp_pixels)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        man = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from exc
    if man.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported or missing schema_version {man.get('schema_version')!r}")
    root = path.parent
    try:
        names = list(man["keypoints"]["names"])
        pair_names = man["keypoints"].get("pairs", [])
        H, W = (int(v) for v in man["image_size"])
        instances = man["instances"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: manifest missing required field ({exc})") from exc
    index = {n: k for k, n in enumerate(names)}
    lr_pairs = []
    for pair in pair_names:
        if len(pair) != 2 or pair[0] not in index or pair[1] not in index:
            raise DataError(f"{path}: keypoint pair {pair!r} does not name two known keypoints")
        lr_pairs.append((index[pair[0]], index[pair[1]]))
    anns = []
    for inst in instances:
        iid = str(inst.get("id", len(anns)))
        img = read_pnm(root / inst["image"])
        msk = read_pnm(root / inst["mask"])
        if img.ndim != 3 or msk.ndim != 2:
            raise DataError(f"instance {iid}: image must be RGB (P6) and mask gray (P5)")
        if img.shape[:2] != (H, W) or msk.shape != (H, W):
            raise DataError(f"instance {iid}: image/mask size {img.shape[:2]}/{msk.shape} != manifest {(H, W)}")
        kp = np.asarray(inst["keypoints"], dtype=np.float64).reshape(-1, 3)
        if len(kp) != len(names):
            raise DataError(f"instance {iid}: {len(kp)} keypoints, manifest declares {len(names)}")
        if not np.all(np.isfinite(kp)):
            raise DataError(f"instance {iid}: non-finite keypoint coordinates")
        vis = kp[:, 2] > 0
        xy = kp[:, :2]
        if np.any((xy[vis] < 0) | (xy[vis] > [W, H])):
            raise DataError(f"instance {iid}: visible keypoint outside the image bounds")
        if not np.any(msk >= 128):
            raise DataError(f"instance {iid}: mask has no foreground")
        anns.append(make_annotation(img, msk, xy, vis, iid))
    return Dataset(names, lr_pairs, (H, W), anns, root)


def save_dataset(ds: Dataset, root, extra: dict | None = None) -> Path:
    """Write images, masks and manifest.json under root; returns the
    manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    insts = []
    for k, a in enumerate(ds.annotations):
        iid = a.name or f"{k:04d}"
        ip, mp = f"images/{iid}.ppm", f"masks/{iid}.pgm"
        write_pnm(root / ip, a.image)
        write_pnm(root / mp, np.where(a.mask, 255, 0).astype(np.uint8))
        px = a.keypoints_px if a.keypoints_px is not None else normalized_to_pixels(a.keypoints, ds.image_size)
        insts.append({"id": iid, "image": ip, "mask": mp,
                      "keypoints": [[float(x), float(y), int(v)] for (x, y), v in zip(px, a.visible)]})
    man = {
        "schema_version": SCHEMA_VERSION,
        "image_size": list(ds.image_size),
        "keypoints": {"names": list(ds.keypoint_names),
                      "pairs": [[ds.keypoint_names[i], ds.keypoint_names[j]] for i, j in ds.lr_pairs]},
        "instances": insts,
    }
    if extra:
        man.update(extra)
    out = root / "manifest.json"
    out.write_text(json.dumps(man, indent=1))
    return out
