"""Wavefront OBJ export with per-corner texture coordinates, plus a small
reference parser used for round-trip checks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DataError
from .images import write_pnm


def export_obj(V: np.ndarray, F: np.ndarray, uv, texture: np.ndarray | None, path) -> dict:
    """Write `path` (.obj), and when a texture is given a .mtl and a P6
    texture next to it. Returns the written paths."""
    path = Path(path)
    uvs = getattr(uv, "uv", uv)
    V = np.asarray(V, dtype=np.float64)
    F = np.asarray(F)
    if uvs is not None and uvs.shape[:2] != F.shape:
        raise ValueError(f"uv atlas shape {uvs.shape} does not match faces {F.shape}")
    written = {"obj": path}
    lines = []
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if texture is not None:
            mtl = path.with_suffix(".mtl")
            tex = path.with_name(path.stem + "_texture.ppm")
            write_pnm(tex, texture)
            mtl.write_text(f"newmtl material0\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\nmap_Kd {tex.name}\n")
            lines += [f"mtllib {mtl.name}", "usemtl material0"]
            written.update(mtl=mtl, texture=tex)
        lines += [f"v {x:.8f} {y:.8f} {z:.8f}" for x, y, z in V]
        if uvs is None:
            lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in F]
        else:
            # per (vertex, uv) pairs: key on both so seam corners duplicate
            keys = np.concatenate([F.reshape(-1, 1).astype(np.float64), np.round(uvs.reshape(-1, 2), 12)], axis=1)
            uniq, inv = np.unique(keys, axis=0, return_inverse=True)
            inv = inv.reshape(F.shape)
            lines += [f"vt {u:.8f} {1.0 - v:.8f}" for u, v in uniq[:, 1:]]
            lines += ["f " + " ".join(f"{F[k, j] + 1}/{inv[k, j] + 1}" for j in range(3)) for k in range(len(F))]
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write mesh to {path}: {exc}") from exc
    return written


def read_obj(path) -> dict:
    """Parse v / vt / f records (triangles only). Faces are 0-based; vt is
    returned in file convention (v axis up)."""
    verts, vts, faces, ftex = [], [], [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            vts.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise DataError(f"{path}:{ln}: only triangles are supported")
            idx = [p.split("/") for p in parts[1:]]
            faces.append([int(i[0]) - 1 for i in idx])
            if all(len(i) > 1 and i[1] for i in idx):
                ftex.append([int(i[1]) - 1 for i in idx])
    return {
        "vertices": np.array(verts).reshape(-1, 3),
        "texcoords": np.array(vts).reshape(-1, 2),
        "faces": np.array(faces, dtype=np.int64).reshape(-1, 3),
        "face_texcoords": np.array(ftex, dtype=np.int64).reshape(-1, 3) if ftex else None,
    }
