"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import report
from .camera import Camera, SfMResult, matrix_to_quat, sfm_factorize
from .errors import DataError, DegenerateMotionError, GeometryError, NumericError
from .fit import (OptimizerConfig, fit_instance, init_model, load_checkpoint, pca_deformations,
                  save_checkpoint, texture_transfer, train_shape, train_texture, turntable_cameras)
from .io import eval_metrics, export_obj, load_dataset, synth_generate, write_pnm
from .io.synth import SynthSpec
from .geom import expand_symmetric
from .objective import ObjectiveConfig
from .render import RasterConfig, rasterize_hard, render_textured
from .texture import apply_flow

log = logging.getLogger("cmrfit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config


def load_config(path=None, seed: int | None = None) -> tuple[ObjectiveConfig, OptimizerConfig]:
    """Flat JSON object whose keys are ObjectiveConfig / OptimizerConfig
    fields; raster settings go under "raster" and lr_scale entries are
    merged into the defaults."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise DataError(f"config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    obj_keys = {f.name for f in fields(ObjectiveConfig)}
    opt_keys = {f.name for f in fields(OptimizerConfig)}
    unknown = set(raw) - obj_keys - opt_keys
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    obj_kw = {k: v for k, v in raw.items() if k in obj_keys and k != "raster"}
    opt_kw = {k: v for k, v in raw.items() if k in opt_keys and k != "lr_scale"}
    try:
        if "raster" in raw:
            obj_kw["raster"] = RasterConfig(**raw["raster"])
        obj = ObjectiveConfig(**obj_kw)
        opt = OptimizerConfig(**opt_kw)
        if "lr_scale" in raw:
            opt = replace(opt, lr_scale={**opt.lr_scale, **raw["lr_scale"]})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if seed is not None:
        opt = replace(opt, seed=seed)
    return obj, opt


def _raster_for(obj: ObjectiveConfig, size) -> ObjectiveConfig:
    H, W = size
    return replace(obj, raster=replace(obj.raster, width=W, height=H))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for '{args.command}'")


def _load_sfm(path) -> SfMResult:
    try:
        return SfMResult.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError as exc:
        raise DataError(f"SfM file not found: {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: not a valid SfM file ({exc})") from exc


def _dataset_and_sfm(args, model=None):
    """Dataset with SfM cameras attached: from the checkpoint when given,
    else from --sfm, else computed."""
    ds = load_dataset(args.data)
    if model is not None:
        sfm = model.sfm
    elif getattr(args, "sfm", None):
        sfm = _load_sfm(args.sfm)
    else:
        sfm = sfm_factorize(ds.observations(), lr_pairs=ds.lr_pairs)
    if len(sfm.cameras) != len(ds):
        raise DataError(f"{len(sfm.cameras)} SfM cameras for {len(ds)} instances")
    return ds.with_cameras(sfm), sfm


def _checkpoint(args):
    _need(args, "checkpoint")
    return load_checkpoint(args.checkpoint)[0]


def _index(i: int, n: int, flag: str) -> int:
    if not 0 <= i < n:
        raise UsageError(f"{flag} {i} out of range [0, {n})")
    return i


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = _out(args)
    spec = SynthSpec(seed=args.seed or 0, n_instances=args.n, image_size=args.size, amplitude=args.amplitude)
    ds, _ = synth_generate(spec, out)
    print(f"wrote {len(ds)} instances to {out / 'manifest.json'}")
    return EXIT_OK


def cmd_sfm(args) -> int:
    _need(args, "data")
    out = _out(args)
    ds = load_dataset(args.data)
    sfm = sfm_factorize(ds.observations(), lr_pairs=ds.lr_pairs)
    (out / "sfm.json").write_text(json.dumps(sfm.to_dict(), indent=1))
    rows = [{"instance": a.name, "s": c.s, "tx": c.t[0], "ty": c.t[1], "qw": c.q[0], "qx": c.q[1],
             "qy": c.q[2], "qz": c.q[3], "rms_residual": r}
            for a, c, r in zip(ds.annotations, sfm.cameras, sfm.residuals)]
    report.write_csv(out / "cameras.csv", rows)
    print(f"sfm: {len(ds)} cameras, mean reprojection residual {np.mean(sfm.residuals):.3g}")
    return EXIT_OK


def cmd_train(args) -> int:
    _need(args, "data")
    out = _out(args)
    obj, opt = load_config(args.config, args.seed)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        ds, _ = _dataset_and_sfm(args, model)
    else:
        if args.stage == "texture":
            raise UsageError("--stage texture needs --checkpoint from a shape run")
        ds, sfm = _dataset_and_sfm(args)
        model = init_model(ds, sfm)
    obj = _raster_for(obj, ds.image_size)
    trace = []
    if args.stage in ("shape", "all"):
        model, tr = train_shape(model, ds, opt, obj)
        trace += tr
    if args.stage in ("texture", "all"):
        model, tr = train_texture(model, ds, opt, obj)
        trace += tr
    digest = save_checkpoint(model, out / "model.ckpt", meta={"stage": args.stage, "seed": opt.seed})
    if trace:
        report.write_csv(out / "trace.csv", trace)
        for stage in ("shape", "texture"):
            tr = [r for r in trace if r["stage"] == stage]
            if tr:
                report.plot_loss_trace(tr, out / f"loss_{stage}.png")
    rep = eval_metrics(model, ds, obj.raster)
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=1))
    print(f"checkpoint {out / 'model.ckpt'} sha256={digest}")
    print(f"mean IoU sfm={rep.mean_iou_sfm:.4f} pred={rep.mean_iou_pred:.4f} "
          f"PCK@0.1={rep.pck[0.1]:.4f} entropy={rep.entropy:.4f}")
    return EXIT_OK


def cmd_fit(args) -> int:
    _need(args, "data")
    model = _checkpoint(args)
    out = _out(args)
    obj, opt = load_config(args.config, args.seed)
    ds = load_dataset(args.data)
    obj = _raster_for(obj, ds.image_size)
    ann = ds.annotations[_index(args.index, len(ds), "--index")]
    res = fit_instance(model, ann, opt, obj)
    V = expand_symmetric(model.fixed.smap, model.mean + res["delta"])
    tex = apply_flow(ann.image, np.tanh(res["flow_raw"]))
    buf = rasterize_hard(V, model.fixed.faces, res["cam"], obj.raster)
    rendered = render_textured(buf, model.fixed.uv, tex)
    export_obj(V, model.fixed.faces, model.fixed.uv, tex, out / "fit.obj")
    write_pnm(out / "fit_render.ppm", rendered)
    report.plot_images([ann.image, ann.mask.astype(float), buf.covered.astype(float), rendered],
                       ["input", "mask", "fitted mask", "fitted render"], out / "fit.png")
    rec = {"instance": ann.name, "camera": res["cam"].to_dict(), "init_camera": res["sfm_cam"].to_dict(),
           "loss": res["loss"], "terms": {k: float(v) for k, v in res["terms"].items()}}
    (out / "fit.json").write_text(json.dumps(rec, indent=1))
    print(f"fit {ann.name}: loss {res['loss']:.4f}")
    return EXIT_OK


def cmd_render(args) -> int:
    _need(args, "data")
    model = _checkpoint(args)
    out = _out(args)
    ds, _ = _dataset_and_sfm(args, model)
    cfg = RasterConfig(ds.image_size[1], ds.image_size[0])
    i = _index(args.index, len(ds), "--index")
    V = model.vertices(i)
    tex = model.uv_image(i, ds.annotations[i].image)
    cam = model.camera(i)
    angles = [float(a) for a in args.angles.split(",")]
    views = [cam] + turntable_cameras(cam, angles)
    titles = ["input view"] + [f"{a:g}°" for a in angles]
    images = []
    for k, c in enumerate(views):
        img = render_textured(rasterize_hard(V, model.fixed.faces, c, cfg), model.fixed.uv, tex)
        write_pnm(out / f"view_{k}.ppm", img)
        images.append(img)
    export_obj(V, model.fixed.faces, model.fixed.uv, tex, out / f"instance_{i}.obj")
    report.plot_images([ds.annotations[i].image] + images, ["image"] + titles, out / "turntable.png")
    print(f"rendered {len(views)} views of instance {i} to {out}")
    return EXIT_OK


def cmd_pca(args) -> int:
    model = _checkpoint(args)
    out = _out(args)
    modes = pca_deformations(model, args.modes)
    base = model.vertices() + modes.mean
    cfg = RasterConfig(args.size, args.size)
    cam = _side_camera()
    rows, table = [], []
    for k in range(args.modes):
        sd = float(np.sqrt(modes.eigenvalues[k]))
        imgs = []
        for tag, c in (("minus2sd", -2.0), ("mean", 0.0), ("plus2sd", 2.0)):
            V = base + c * sd * modes.modes[k]
            if tag != "mean" or k == 0:
                export_obj(V, model.fixed.faces, None, None, out / f"mode{k}_{tag}.obj")
            imgs.append(rasterize_hard(V, model.fixed.faces, cam, cfg).covered.astype(float))
        rows.append((f"mode {k}", imgs))
        table.append({"mode": k, "eigenvalue": modes.eigenvalues[k], "std": sd})
    report.write_csv(out / "eigenvalues.csv", table)
    report.plot_pca_modes(rows, out / "pca_modes.png")
    print("eigenvalues: " + ", ".join(f"{r['eigenvalue']:.4g}" for r in table))
    return EXIT_OK


def _side_camera() -> Camera:
    R = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]])
    return Camera(0.55, [0.0, 0.0], matrix_to_quat(R))


def cmd_transfer(args) -> int:
    _need(args, "data", "shape", "texture")
    model = _checkpoint(args)
    out = _out(args)
    ds, _ = _dataset_and_sfm(args, model)
    cfg = RasterConfig(ds.image_size[1], ds.image_size[0])
    n = len(ds)
    a, b = _index(args.shape, n, "--shape"), _index(args.texture, n, "--texture")
    img = texture_transfer(model, ds, a, b, model.camera(a), cfg)
    write_pnm(out / f"transfer_{a}_{b}.ppm", img)
    report.plot_images([ds.annotations[a].image, ds.annotations[b].image, img],
                       ["shape source", "texture source", "transfer"], out / f"transfer_{a}_{b}.png")
    print(f"texture of {b} on shape of {a} written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _need(args, "data")
    model = _checkpoint(args)
    out = _out(args)
    ds, _ = _dataset_and_sfm(args, model)
    cfg = RasterConfig(ds.image_size[1], ds.image_size[0])
    alphas = tuple(float(a) for a in args.pck.split(","))
    rep = eval_metrics(model, ds, cfg, pck_alphas=alphas)
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=1))
    report.write_csv(out / "per_instance.csv", [{"instance": n, "iou_sfm": s, "iou_pred": p}
                                                for n, s, p in zip(rep.names, rep.iou_sfm, rep.iou_pred)])
    report.write_csv(out / "iou_curve.csv", [{"threshold": t, "sfm": s, "pred": p}
                                             for t, s, p in zip(rep.thresholds, rep.curve_sfm, rep.curve_pred)])
    report.plot_iou_curve(rep, out / "iou_curve.png")
    pck = " ".join(f"PCK@{a:g}={v:.4f}" for a, v in rep.pck.items())
    print(f"mean IoU sfm={rep.mean_iou_sfm:.4f} pred={rep.mean_iou_pred:.4f} {pck} entropy={rep.entropy:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON of objective and optimizer settings")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--checkpoint", help="model checkpoint to read")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cmrfit", description="Learn and fit a deformable category mesh from annotated images.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int, default=40)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--amplitude", type=float, default=0.25)

    s = sub.add_parser("sfm", parents=[common], help="keypoint structure-from-motion cameras")
    s.add_argument("--data", help="manifest.json")

    s = sub.add_parser("train", parents=[common], help="learn the collection model")
    s.add_argument("--data", help="manifest.json")
    s.add_argument("--sfm", help="sfm.json from the sfm command")
    s.add_argument("--stage", choices=("shape", "texture", "all"), default="all")

    s = sub.add_parser("fit", parents=[common], help="fit one image with the learned category model")
    s.add_argument("--data", help="manifest.json holding the image")
    s.add_argument("--index", type=int, default=0)

    s = sub.add_parser("render", parents=[common], help="novel-view renders of a learned instance")
    s.add_argument("--data", help="manifest.json")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--angles", default="60,180,-60", help="turntable angles in degrees")

    s = sub.add_parser("pca", parents=[common], help="deformation modes at -2/0/+2 standard deviations")
    s.add_argument("--modes", type=int, default=3)
    s.add_argument("--size", type=int, default=96)

    s = sub.add_parser("transfer", parents=[common], help="render one instance's texture on another's shape")
    s.add_argument("--data", help="manifest.json")
    s.add_argument("--shape", type=int)
    s.add_argument("--texture", type=int)

    s = sub.add_parser("eval", parents=[common], help="mask IoU and keypoint PCK report")
    s.add_argument("--data", help="manifest.json")
    s.add_argument("--pck", default="0.05,0.1,0.2", help="normalized PCK thresholds")
    return p


COMMANDS = {"synth": cmd_synth, "sfm": cmd_sfm, "train": cmd_train, "fit": cmd_fit, "render": cmd_render,
            "pca": cmd_pca, "transfer": cmd_transfer, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cmrfit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DegenerateMotionError, GeometryError) as exc:
        print(f"cmrfit {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"cmrfit {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
