"""Collection learning by direct optimization, single-instance fitting,
deformation PCA and texture transfer."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import Camera, SfMResult, axis_angle_quat, matrix_to_quat, resection
from .errors import DataError, NumericError
from .geom import (Mesh, build_symmetry, convex_hull, cotangent_laplacian, expand_symmetric, icosphere,
                   init_mean_shape)
from .objective import (FixedParts, InstanceAnnotation, ObjectiveConfig, softmax,
                        texture_objective, texture_plan, total_objective)
from .render import RasterConfig, rasterize_hard, render_textured
from .texture import UV_SHAPE, apply_flow, flow_grid, mask_bbox, sphere_uv, unsquash

log = logging.getLogger(__name__)

ICO_LEVEL = 3
CHECKPOINT_MAGIC = b"CMRCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shape_iters: int = 600
    texture_iters: int = 300
    batch_size: int = 8
    seed: int = 0
    anneal: bool = True
    # per-block step-size multipliers on top of lr
    lr_scale: dict = field(default_factory=lambda: {
        "mean": 1.0, "delta": 1.0, "kp_logits": 50.0, "cam": 1.0, "flow": 20.0,
    })

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("step size must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")

    def block_lr(self, name: str) -> float:
        return self.lr * self.lr_scale.get(name, 1.0)


class Adam:
    """Adaptive moment estimation with bias correction. Per-instance blocks
    keep one step counter per row so unsampled instances are not updated."""

    def __init__(self, cfg: OptimizerConfig, state: dict | None = None):
        self.cfg = cfg
        self.state = state if state is not None else {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, rows=None) -> None:
        c = self.cfg
        st = self.state.get(name)
        if st is None:
            nrows = param.shape[0] if rows is not None else 1
            st = self.state[name] = {"m": np.zeros_like(param), "v": np.zeros_like(param),
                                     "t": np.zeros(nrows, dtype=np.int64)}
        lr = c.block_lr(name)
        if rows is None:
            st["t"][0] += 1
            t = st["t"][0]
            st["m"] = c.beta1 * st["m"] + (1 - c.beta1) * grad
            st["v"] = c.beta2 * st["v"] + (1 - c.beta2) * grad * grad
            mh = st["m"] / (1 - c.beta1**t)
            vh = st["v"] / (1 - c.beta2**t)
            param -= lr * mh / (np.sqrt(vh) + c.eps)
            return
        for r, g in zip(rows, grad):
            st["t"][r] += 1
            t = st["t"][r]
            st["m"][r] = c.beta1 * st["m"][r] + (1 - c.beta1) * g
            st["v"][r] = c.beta2 * st["v"][r] + (1 - c.beta2) * g * g
            mh = st["m"][r] / (1 - c.beta1**t)
            vh = st["v"][r] / (1 - c.beta2**t)
            param[r] -= lr * mh / (np.sqrt(vh) + c.eps)


@dataclass
class CollectionModel:
    fixed: FixedParts
    sfm: SfMResult
    mean: np.ndarray  # (P, 3) free mean-shape params
    kp_logits: np.ndarray  # (K, V)
    delta: np.ndarray  # (N, P, 3)
    cams: np.ndarray  # (N, 7)
    flow_raw: np.ndarray  # (N, Hu, Wu, 2)
    names: list
    opt_state: dict = field(default_factory=dict)
    iteration: dict = field(default_factory=lambda: {"shape": 0, "texture": 0})

    @property
    def n_instances(self) -> int:
        return len(self.delta)

    @property
    def n_keypoints(self) -> int:
        return self.kp_logits.shape[0]

    def vertices(self, i: int | None = None) -> np.ndarray:
        d = 0.0 if i is None else self.delta[i]
        return expand_symmetric(self.fixed.smap, self.mean + d)

    def camera(self, i: int) -> Camera:
        return Camera.from_vector(self.cams[i])

    def assignment(self) -> np.ndarray:
        return softmax(self.kp_logits)

    def keypoints3d(self, i: int | None = None) -> np.ndarray:
        return self.assignment() @ self.vertices(i)

    def flow(self, i: int) -> np.ndarray:
        return np.tanh(self.flow_raw[i])

    def uv_image(self, i: int, image: np.ndarray) -> np.ndarray:
        return apply_flow(image, self.flow(i))

    def copy(self) -> "CollectionModel":
        return replace(
            self, mean=self.mean.copy(), kp_logits=self.kp_logits.copy(), delta=self.delta.copy(),
            cams=self.cams.copy(), flow_raw=self.flow_raw.copy(), names=list(self.names),
            opt_state=_copy_state(self.opt_state), iteration=dict(self.iteration))

    def shape_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for a in (self.mean, self.kp_logits, self.delta, self.cams))


def _copy_state(state: dict) -> dict:
    return {k: {kk: vv.copy() for kk, vv in v.items()} for k, v in state.items()}


def build_fixed(level: int = ICO_LEVEL, uv_shape: tuple = UV_SHAPE) -> tuple[FixedParts, np.ndarray]:
    sphere = icosphere(level)
    smap = build_symmetry(sphere)
    return FixedParts(sphere.faces, smap, cotangent_laplacian(sphere), sphere_uv(sphere, smap).uv,
                      tuple(uv_shape)), sphere.vertices


def init_flow(mask: np.ndarray, uv_shape: tuple = UV_SHAPE) -> np.ndarray:
    return unsquash(flow_grid(mask_bbox(mask), uv_shape))


def init_model(dataset, sfm: SfMResult, level: int = ICO_LEVEL, uv_shape: tuple = UV_SHAPE) -> CollectionModel:
    fixed, sphere_verts = build_fixed(level, uv_shape)
    sphere = Mesh(sphere_verts, fixed.faces)
    hull = convex_hull(sfm.B)
    mean = init_mean_shape(hull, sphere, fixed.smap)
    anns = dataset.annotations
    n = len(anns)
    K = sfm.B.shape[0]
    return CollectionModel(
        fixed=fixed,
        sfm=sfm,
        mean=mean,
        kp_logits=np.zeros((K, len(sphere_verts))),
        delta=np.zeros((n, fixed.smap.free_count, 3)),
        cams=np.stack([c.to_vector() for c in sfm.cameras]),
        flow_raw=np.stack([init_flow(a.mask, uv_shape) for a in anns]),
        names=[a.name for a in anns],
    )


def sigma_at(obj: ObjectiveConfig, opt: OptimizerConfig, it: int, total: int) -> float:
    if not opt.anneal or total <= 0:
        return obj.raster.sigma
    quarter = min(3, (4 * it) // total)
    return obj.raster.sigma * 0.5**quarter


def batch_order(seed: int, stage: str, epoch: int, n: int) -> np.ndarray:
    tag = 0 if stage == "shape" else 1
    return np.random.default_rng([seed, tag, epoch]).permutation(n)


def batch_at(opt: OptimizerConfig, stage: str, it: int, n: int) -> np.ndarray:
    """Instances in mini-batch `it`; each epoch is a fresh seeded shuffle."""
    bs = min(opt.batch_size, n)
    per_epoch = -(-n // bs)
    epoch, k = divmod(it, per_epoch)
    order = batch_order(opt.seed, stage, epoch, n)
    return np.sort(order[k * bs:(k + 1) * bs])


def _instance_params(model: CollectionModel, i: int) -> dict:
    return {"mean": model.mean, "delta": model.delta[i], "kp_logits": model.kp_logits, "cam": model.cams[i]}


def evaluate_shape(model: CollectionModel, anns, obj: ObjectiveConfig, rows=None) -> dict:
    rows = range(model.n_instances) if rows is None else rows
    reps = [total_objective(_instance_params(model, i), anns[i], model.fixed, obj) for i in rows]
    out = {k: float(np.mean([r.terms[k] for r in reps])) for k in reps[0].terms}
    out["total"] = float(np.mean([r.total for r in reps]))
    return out


def train_shape(model: CollectionModel, dataset, opt: OptimizerConfig, obj: ObjectiveConfig,
                iters: int | None = None, stop_at: int | None = None, on_step=None) -> tuple[CollectionModel, list]:
    """Stage 1: Adam over mean shape, keypoint logits, deformations and
    cameras. Resumes from model.iteration['shape']; runs until `stop_at`
    (default: the full schedule of `iters`)."""
    anns = dataset.annotations
    total_iters = opt.shape_iters if iters is None else iters
    stop = total_iters if stop_at is None else min(stop_at, total_iters)
    model = model.copy()
    adam = Adam(opt, model.opt_state)
    n = model.n_instances
    trace = []
    last_good = model.copy()
    for it in range(model.iteration["shape"], stop):
        sigma = sigma_at(obj, opt, it, total_iters)
        cfg = replace(obj, raster=obj.raster.with_sigma(sigma))
        rows = batch_at(opt, "shape", it, n)
        g_mean = np.zeros_like(model.mean)
        g_logits = np.zeros_like(model.kp_logits)
        g_delta = np.zeros((len(rows),) + model.delta.shape[1:])
        g_cam = np.zeros((len(rows), 7))
        totals = []
        terms = {}
        try:
            for b, i in enumerate(rows):
                rep = total_objective(_instance_params(model, i), anns[i], model.fixed, cfg)
                g_mean += rep.grads["mean"]
                g_logits += rep.grads["kp_logits"]
                g_delta[b] = rep.grads["delta"]
                g_cam[b] = rep.grads["cam"]
                totals.append(rep.total)
                for k, v in rep.terms.items():
                    terms[k] = terms.get(k, 0.0) + v / len(rows)
        except NumericError:
            log.error("non-finite loss at iteration %d; returning last good state", it)
            return last_good, trace
        # per-instance losses are averaged over the batch
        m = len(rows)
        g_delta *= 1.0 / m
        adam.step("mean", model.mean, g_mean / m)
        adam.step("kp_logits", model.kp_logits, g_logits / m)
        adam.step("delta", model.delta, g_delta, rows=rows)
        adam.step("cam", model.cams, g_cam / m, rows=rows)
        for i in rows:
            q = model.cams[i, 3:7]
            model.cams[i, 3:7] = q / np.linalg.norm(q)
            model.cams[i, 0] = max(model.cams[i, 0], 1e-6)
        model.iteration["shape"] = it + 1
        rec = {"stage": "shape", "step": it, "sigma": sigma, "total": float(np.mean(totals)), **terms}
        trace.append(rec)
        if on_step is not None:
            on_step(rec)
        if not np.isfinite(rec["total"]):
            return last_good, trace
        if (it + 1) % 50 == 0:
            last_good = model.copy()
    model.opt_state = adam.state
    return model, trace


def build_texture_plans(model: CollectionModel, anns, obj: ObjectiveConfig, rows=None) -> dict:
    rows = range(model.n_instances) if rows is None else rows
    return {i: texture_plan(model.vertices(i), model.fixed.faces, anns[i].sfm_cam, model.fixed.uv,
                            obj.raster, model.fixed.uv_shape) for i in rows}


def train_texture(model: CollectionModel, dataset, opt: OptimizerConfig, obj: ObjectiveConfig,
                  iters: int | None = None, stop_at: int | None = None, on_step=None) -> tuple[CollectionModel, list]:
    """Stage 2: optimize texture flows only; shape and camera blocks are
    left untouched."""
    anns = dataset.annotations
    total_iters = opt.texture_iters if iters is None else iters
    stop = total_iters if stop_at is None else min(stop_at, total_iters)
    model = model.copy()
    adam = Adam(opt, model.opt_state)
    plans = build_texture_plans(model, anns, obj) if stop > model.iteration["texture"] else {}
    trace = []
    n = model.n_instances
    for it in range(model.iteration["texture"], stop):
        rows = batch_at(opt, "texture", it, n)
        grads = np.zeros((len(rows),) + model.flow_raw.shape[1:])
        totals, terms = [], {}
        for b, i in enumerate(rows):
            rep = texture_objective(model.flow_raw[i], anns[i], plans[i], obj)
            grads[b] = rep.grads["flow"]
            totals.append(rep.total)
            for k, v in rep.terms.items():
                terms[k] = terms.get(k, 0.0) + v / len(rows)
        # flows are per-instance, so no batch averaging
        adam.step("flow", model.flow_raw, grads, rows=rows)
        model.iteration["texture"] = it + 1
        rec = {"stage": "texture", "step": it, "total": float(np.mean(totals)), **terms}
        trace.append(rec)
        if on_step is not None:
            on_step(rec)
    model.opt_state = adam.state
    return model, trace


# ---------------------------------------------------------------- fitting


def fit_instance(model: CollectionModel, ann: InstanceAnnotation, opt: OptimizerConfig,
                 obj: ObjectiveConfig, shape_iters: int | None = None,
                 texture_iters: int | None = None) -> dict:
    """Fit deformation, camera and texture flow of a new instance with the
    mean shape and keypoint assignment frozen."""
    X = model.keypoints3d()
    cam0 = resection(X, ann.keypoints, ann.visible)
    ann = replace(ann, sfm_cam=cam0)
    delta = np.zeros((1,) + model.delta.shape[1:])
    cam = cam0.to_vector()[None, :].copy()
    adam = Adam(opt)
    n_shape = opt.shape_iters if shape_iters is None else shape_iters
    for it in range(n_shape):
        sigma = sigma_at(obj, opt, it, n_shape)
        cfg = replace(obj, raster=obj.raster.with_sigma(sigma))
        params = {"mean": model.mean, "delta": delta[0], "kp_logits": model.kp_logits, "cam": cam[0]}
        rep = total_objective(params, ann, model.fixed, cfg)
        adam.step("delta", delta, rep.grads["delta"][None], rows=[0])
        adam.step("cam", cam, rep.grads["cam"][None], rows=[0])
        cam[0, 3:7] /= np.linalg.norm(cam[0, 3:7])
        cam[0, 0] = max(cam[0, 0], 1e-6)
    V = expand_symmetric(model.fixed.smap, model.mean + delta[0])
    plan = texture_plan(V, model.fixed.faces, cam0, model.fixed.uv, obj.raster, model.fixed.uv_shape)
    flow = init_flow(ann.mask, model.fixed.uv_shape)[None]
    n_tex = opt.texture_iters if texture_iters is None else texture_iters
    for _ in range(n_tex):
        rep = texture_objective(flow[0], ann, plan, obj)
        adam.step("flow", flow, rep.grads["flow"][None], rows=[0])
    final = total_objective({"mean": model.mean, "delta": delta[0], "kp_logits": model.kp_logits,
                             "cam": cam[0]}, ann, model.fixed, obj)
    return {"delta": delta[0], "cam": Camera.from_vector(cam[0]), "sfm_cam": cam0,
            "flow_raw": flow[0], "loss": final.total, "terms": final.terms}


# ---------------------------------------------------------------- analysis


@dataclass(frozen=True)
class DeformationModes:
    mean: np.ndarray  # (V, 3)
    modes: np.ndarray  # (n, V, 3) orthonormal when flattened
    eigenvalues: np.ndarray  # (n,) non-increasing, covariance normalization 1/(N-1)
    coeffs: np.ndarray  # (N, n)


def pca_deformations(model: CollectionModel, n_modes: int) -> DeformationModes:
    N = model.n_instances
    if N < n_modes + 1:
        raise DataError(f"PCA with {n_modes} modes needs at least {n_modes + 1} instances, got {N}")
    D = np.stack([expand_symmetric(model.fixed.smap, d).ravel() for d in model.delta])
    mu = D.mean(axis=0)
    Dc = D - mu
    G = Dc @ Dc.T
    lam, E = np.linalg.eigh(G)
    order = np.argsort(lam)[::-1][:n_modes]
    lam, E = np.clip(lam[order], 0.0, None), E[:, order]
    U = Dc.T @ E
    norms = np.linalg.norm(U, axis=0)
    ok = norms > 1e-12 * max(1.0, norms.max(initial=0.0))
    U[:, ok] /= norms[ok]
    U[:, ~ok] = 0.0
    lam = np.where(ok, lam, 0.0)
    nv = model.fixed.smap.n_verts
    return DeformationModes(mu.reshape(nv, 3), U.T.reshape(n_modes, nv, 3), lam / (N - 1), Dc @ U)


def texture_transfer(model: CollectionModel, dataset, shape_of: int, texture_of: int, cam: Camera,
                     cfg: RasterConfig) -> np.ndarray:
    n = model.n_instances
    for i in (shape_of, texture_of):
        if not 0 <= i < n:
            raise IndexError(f"instance index {i} out of range [0, {n})")
    V = model.vertices(shape_of)
    tex = model.uv_image(texture_of, dataset.annotations[texture_of].image)
    buf = rasterize_hard(V, model.fixed.faces, cam, cfg)
    return render_textured(buf, model.fixed.uv, tex)


def render_instance(model: CollectionModel, dataset, i: int, cam: Camera, cfg: RasterConfig) -> np.ndarray:
    return texture_transfer(model, dataset, i, i, cam, cfg)


def turntable_cameras(cam: Camera, angles_deg=(60.0, 180.0, -60.0)) -> list:
    """Novel views: the object rotated about its vertical (camera y) axis."""
    out = []
    for a in angles_deg:
        Rz = Camera(1.0, [0, 0], axis_angle_quat([0.0, 1.0, 0.0], np.radians(a))).R
        out.append(Camera(cam.s, cam.t, matrix_to_quat(Rz @ cam.R)))
    return out


# ---------------------------------------------------------------- checkpoint


def _blocks(model: CollectionModel) -> list:
    blocks = [
        ("mean", model.mean), ("kp_logits", model.kp_logits), ("delta", model.delta),
        ("cams", model.cams), ("flow_raw", model.flow_raw), ("sfm_B", model.sfm.B),
        ("sfm_cams", np.stack([c.to_vector() for c in model.sfm.cameras])),
        ("sfm_residuals", model.sfm.residuals),
    ]
    for name in sorted(model.opt_state):
        st = model.opt_state[name]
        blocks += [(f"adam/{name}/m", st["m"]), (f"adam/{name}/v", st["v"]),
                   (f"adam/{name}/t", st["t"].astype(np.float64))]
    return blocks


def save_checkpoint(model: CollectionModel, path, meta: dict | None = None) -> str:
    """Write MAGIC | u64 header length | JSON header | float64 LE blocks.
    Returns the SHA-256 of the payload (also recorded in the header)."""
    blocks = _blocks(model)
    payload = bytearray()
    entries = []
    for name, arr in blocks:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": len(payload), "nbytes": len(data)})
        payload += data
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "schema": "cmrfit.checkpoint", "version": CHECKPOINT_VERSION, "dtype": "<f8",
        "icosphere_level": int(round(np.log((model.fixed.smap.n_verts - 2) / 10) / np.log(4))),
        "uv_shape": list(model.fixed.uv_shape), "names": list(model.names),
        "iteration": dict(model.iteration), "blocks": entries, "sha256": digest, "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return digest


def load_checkpoint(path) -> tuple[CollectionModel, dict]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    try:
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = raw[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise DataError(f"{path}: checkpoint payload hash mismatch")
    arrays = {}
    for e in header["blocks"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    fixed, _ = build_fixed(header["icosphere_level"], tuple(header["uv_shape"]))
    sfm = SfMResult(arrays["sfm_B"], [Camera.from_vector(v) for v in arrays["sfm_cams"]],
                    arrays["sfm_residuals"])
    state = {}
    for key, arr in arrays.items():
        if key.startswith("adam/"):
            _, name, part = key.split("/")
            state.setdefault(name, {})[part] = arr.astype(np.int64) if part == "t" else arr
    model = CollectionModel(fixed, sfm, arrays["mean"], arrays["kp_logits"], arrays["delta"], arrays["cams"],
                            arrays["flow_raw"], list(header["names"]), state, dict(header["iteration"]))
    return model, header
