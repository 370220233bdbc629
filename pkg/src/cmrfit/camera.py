"""Weak-perspective cameras, keypoint structure-from-motion and similarity
alignment."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import least_squares

from .errors import DegenerateMotionError, GeometryError, InvalidRotationError, NumericError

log = logging.getLogger(__name__)

# ---------------------------------------------------------------- quaternions


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise InvalidRotationError("quaternion has zero or non-finite norm")
    return q / n


def canonical_quat(q) -> np.ndarray:
    q = normalize_quat(q)
    return -q if q[0] < 0 else q


def _rot_unit(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _drot_unit(q: np.ndarray) -> np.ndarray:
    """d R / d q for the unit-quaternion polynomial, shape (3, 3, 4)."""
    w, x, y, z = q
    d = np.zeros((3, 3, 4))
    d[0, 0] = [0, 0, -4 * y, -4 * z]
    d[0, 1] = [-2 * z, 2 * y, 2 * x, -2 * w]
    d[0, 2] = [2 * y, 2 * z, 2 * w, 2 * x]
    d[1, 0] = [2 * z, 2 * y, 2 * x, 2 * w]
    d[1, 1] = [0, -4 * x, 0, -4 * z]
    d[1, 2] = [-2 * x, -2 * w, 2 * z, 2 * y]
    d[2, 0] = [-2 * y, 2 * z, -2 * w, 2 * x]
    d[2, 1] = [2 * x, 2 * w, 2 * z, 2 * y]
    d[2, 2] = [0, -4 * x, -4 * y, 0]
    return d


def quat_to_matrix(q) -> np.ndarray:
    return _rot_unit(normalize_quat(q))


def quat_to_matrix_grad(q) -> tuple[np.ndarray, np.ndarray]:
    """R(q/|q|) and its derivative w.r.t. the raw (unnormalized) q."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    qh = normalize_quat(q)
    P = (np.eye(4) - np.outer(qh, qh)) / n
    return _rot_unit(qh), _drot_unit(qh) @ P


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        S = np.sqrt(tr + 1.0) * 2
        q = [0.25 * S, (R[2, 1] - R[1, 2]) / S, (R[0, 2] - R[2, 0]) / S, (R[1, 0] - R[0, 1]) / S]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        S = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / S, 0.25 * S, (R[0, 1] + R[1, 0]) / S, (R[0, 2] + R[2, 0]) / S]
    elif R[1, 1] > R[2, 2]:
        S = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / S, (R[0, 1] + R[1, 0]) / S, 0.25 * S, (R[1, 2] + R[2, 1]) / S]
    else:
        S = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / S, (R[0, 2] + R[2, 0]) / S, (R[1, 2] + R[2, 1]) / S, 0.25 * S]
    return canonical_quat(q)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_rotate(q, P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    return P @ quat_to_matrix(q).T


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotation matrices."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


# ---------------------------------------------------------------- camera


@dataclass(frozen=True)
class Camera:
    s: float
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(2))
        object.__setattr__(self, "q", canonical_quat(self.q))
        if not self.s > 0:
            raise ValueError(f"camera scale must be positive, got {self.s}")

    @property
    def R(self) -> np.ndarray:
        return _rot_unit(self.q)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.s], self.t, self.q])

    @classmethod
    def from_vector(cls, vec) -> "Camera":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[0], vec[1:3], vec[3:7])

    def to_dict(self) -> dict:
        return {"s": self.s, "t": self.t.tolist(), "q": self.q.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["s"], d["t"], d["q"])


def project(cam: Camera, P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    return cam.s * (P @ cam.R[:2].T) + cam.t


def project_vec(vec: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Projection from a raw (s, t, q) parameter vector; q need not be unit."""
    R = quat_to_matrix(vec[3:7])
    return vec[0] * (P @ R[:2].T) + vec[1:3]


def project_jacobian(vec: np.ndarray, P: np.ndarray) -> dict:
    """Per-point Jacobians of project_vec: dP (N,2,3), ds (N,2), dt (N,2,2),
    dq (N,2,4) with q treated as the raw parameter."""
    P = np.asarray(P, dtype=np.float64)
    s = vec[0]
    R, dR = quat_to_matrix_grad(vec[3:7])
    n = len(P)
    return {
        "P": np.broadcast_to(s * R[:2], (n, 2, 3)).copy(),
        "s": P @ R[:2].T,
        "t": np.broadcast_to(np.eye(2), (n, 2, 2)).copy(),
        "q": s * np.einsum("abk,nb->nak", dR[:2], P),
    }


def project_vjp(vec: np.ndarray, P: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pull back an upstream gradient g (N,2) on projected points to the
    points (N,3) and to the raw camera vector (7,)."""
    s = vec[0]
    R, dR = quat_to_matrix_grad(vec[3:7])
    gP = s * (g @ R[:2])
    M = g.T @ P  # (2, 3)
    gcam = np.empty(7)
    gcam[0] = np.sum(M * R[:2])
    gcam[1:3] = g.sum(axis=0)
    gcam[3:7] = s * np.einsum("ab,abk->k", M, dR[:2])
    return gP, gcam


def camera_distance(a: Camera, b: Camera) -> float:
    return float(
        (a.s - b.s) ** 2 + np.sum((a.t - b.t) ** 2) + 2.0 * (1.0 - np.dot(a.q, b.q) ** 2)
    )


def camera_distance_grad(vec: np.ndarray, target: Camera) -> tuple[float, np.ndarray]:
    """camera_distance(raw vec, target) and its gradient w.r.t. the raw vec."""
    q = np.asarray(vec[3:7], dtype=np.float64)
    n = np.linalg.norm(q)
    qh = q / n
    dot = float(qh @ target.q)
    ds = vec[0] - target.s
    dt = vec[1:3] - target.t
    val = ds**2 + float(dt @ dt) + 2.0 * (1.0 - dot**2)
    g = np.empty(7)
    g[0] = 2 * ds
    g[1:3] = 2 * dt
    gqh = -4.0 * dot * target.q
    g[3:7] = (gqh - qh * (qh @ gqh)) / n
    return val, g


# ---------------------------------------------------------------- similarity


def align_similarity(A, B) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares (scale, R, t) with s R a + t ~ b; reflections allowed."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or len(A) < 3:
        raise GeometryError("similarity alignment needs equal point sets of size >= 3")
    ma, mb = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - ma, B - mb
    va = np.sum(A0**2)
    if va < 1e-24 or np.linalg.matrix_rank(A0, tol=1e-10 * np.sqrt(va)) < 2:
        raise GeometryError("degenerate span in similarity alignment")
    U, S, Vt = np.linalg.svd(B0.T @ A0)
    R = U @ Vt
    scale = S.sum() / va
    t = mb - scale * R @ ma
    return float(scale), R, t


# ---------------------------------------------------------------- sfm


@dataclass(frozen=True)
class KeypointObservations:
    points: np.ndarray  # (K, 2) normalized image coordinates
    visible: np.ndarray  # (K,) bool

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "visible", np.asarray(self.visible, dtype=bool))

    @property
    def n_visible(self) -> int:
        return int(self.visible.sum())


@dataclass(frozen=True)
class SfMResult:
    B: np.ndarray  # (K, 3)
    cameras: list
    residuals: np.ndarray  # per-instance RMS reprojection error

    def to_dict(self) -> dict:
        return {
            "B": self.B.tolist(),
            "cameras": [c.to_dict() for c in self.cameras],
            "residuals": self.residuals.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SfMResult":
        return cls(np.array(d["B"], dtype=np.float64), [Camera.from_dict(c) for c in d["cameras"]],
                   np.array(d["residuals"], dtype=np.float64))


def _impute_factorize(W: np.ndarray, mask: np.ndarray, rounds: int, tol: float = 1e-12):
    W = W.copy()
    col_mean = np.array([W[r][mask[r]].mean() for r in range(len(W))])[:, None]
    W = np.where(mask, W, col_mean)
    # column means over instances, per keypoint, for each coordinate row parity
    for parity in (0, 1):
        rows = slice(parity, None, 2)
        obs = np.where(mask[rows], W[rows], 0.0)
        cnt = mask[rows].sum(axis=0)
        kp_mean = np.divide(obs.sum(axis=0), cnt, out=np.zeros(W.shape[1]), where=cnt > 0)
        W[rows] = np.where(mask[rows], W[rows], kp_mean[None, :])
    for _ in range(rounds if not mask.all() else 0):
        c = W.mean(axis=1, keepdims=True)
        U, S, Vt = np.linalg.svd(W - c, full_matrices=False)
        approx = (U[:, :3] * S[:3]) @ Vt[:3] + c
        W_new = np.where(mask, W, approx)
        change = np.abs(W_new - W).max()
        W = W_new
        if change < tol:
            break
    c = W.mean(axis=1, keepdims=True)
    U, S, Vt = np.linalg.svd(W - c, full_matrices=False)
    return U, S, Vt, c


def _affine_refine(W, mask, M, B, c, max_nfev=500):
    """Least-squares fit of the rank-3 affine model W ~ M B^T + c over the
    observed entries only, started from the imputed factorization."""
    R, K = W.shape
    r, k = np.nonzero(mask)
    n = len(r)
    oB, oc = 3 * R, 3 * R + 3 * K

    def unpack(x):
        return x[:oB].reshape(R, 3), x[oB:oc].reshape(K, 3), x[oc:]

    def resid(x):
        M, B, c = unpack(x)
        return np.einsum("ij,ij->i", M[r], B[k]) + c[r] - W[r, k]

    def jac(x):
        M, B, c = unpack(x)
        rows = np.repeat(np.arange(n), 7)
        cols = np.concatenate([3 * r[:, None] + np.arange(3), oB + 3 * k[:, None] + np.arange(3),
                               (oc + r)[:, None]], axis=1).ravel()
        vals = np.concatenate([B[k], M[r], np.ones((n, 1))], axis=1).ravel()
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, len(x)))

    x0 = np.concatenate([M.ravel(), B.ravel(), c.ravel()])
    sol = least_squares(resid, x0, jac=jac, method="trf", tr_solver="lsmr", max_nfev=max_nfev,
                        xtol=1e-12, ftol=1e-12, gtol=1e-12)
    return unpack(sol.x)


def _metric_upgrade(Mhat: np.ndarray) -> np.ndarray:
    def row(a, b):
        return np.array([a[0] * b[0], a[0] * b[1] + a[1] * b[0], a[0] * b[2] + a[2] * b[0],
                         a[1] * b[1], a[1] * b[2] + a[2] * b[1], a[2] * b[2]])

    eqs, norm = [], np.zeros(6)
    for i in range(0, len(Mhat), 2):
        m, n = Mhat[i], Mhat[i + 1]
        eqs.append(row(m, m) - row(n, n))
        eqs.append(row(m, n))
        norm += row(m, m) + row(n, n)
    A = np.array(eqs)
    _, S, Vt = np.linalg.svd(A)
    x = Vt[-1]
    x = x / (norm @ x / len(Mhat))
    Q = np.array([[x[0], x[1], x[2]], [x[1], x[3], x[4]], [x[2], x[4], x[5]]])
    lam, E = np.linalg.eigh(Q)
    if lam[-1] > 0 and lam[0] >= -1e-3 * lam[-1]:
        return E * np.sqrt(np.clip(lam, 1e-12 * lam[-1], None))
    # non-rigid or noisy input: the linear solution is indefinite, so fit
    # Q = L L^T directly, starting from its positive part
    tri = np.tril_indices(3)
    w = np.sqrt(len(Mhat) / 2)

    def resid(l):
        L = np.zeros((3, 3))
        L[tri] = l
        G = L @ L.T
        q = np.array([G[0, 0], G[0, 1], G[0, 2], G[1, 1], G[1, 2], G[2, 2]])
        return np.concatenate([A @ q, [w * (norm @ q / len(Mhat) - 1.0)]])

    start = np.linalg.cholesky(E @ np.diag(np.clip(lam, 1e-3 * max(lam[-1], 1e-12), None)) @ E.T)
    sol = least_squares(resid, start[tri], method="lm")
    L = np.zeros((3, 3))
    L[tri] = sol.x
    sv = np.linalg.svd(L, compute_uv=False)
    if not np.all(np.isfinite(sv)) or sv[-1] < 1e-6 * sv[0]:
        raise DegenerateMotionError("metric upgrade failed: Gram constraints are rank deficient")
    return L


def _cameras_from_motion(M: np.ndarray) -> list:
    Rs, ss = [], []
    for i in range(0, len(M), 2):
        m, n = M[i], M[i + 1]
        nm, nn = np.linalg.norm(m), np.linalg.norm(n)
        r1, r2 = m / nm, n / nn
        R = nearest_rotation(np.stack([r1, r2, np.cross(r1, r2)]))
        Rs.append(R)
        ss.append(0.5 * (nm + nn))
    return Rs, np.array(ss)


def _pack(B, scales, ts, quats):
    return np.concatenate([B.ravel(), scales, ts.ravel(), quats.ravel()])


def _unpack(x, K, N):
    B = x[: 3 * K].reshape(K, 3)
    o = 3 * K
    scales = x[o:o + N]
    ts = x[o + N:o + 3 * N].reshape(N, 2)
    quats = x[o + 3 * N:].reshape(N, 4)
    return B, scales, ts, quats


def _residuals(x, X, mask, K, N):
    B, scales, ts, quats = _unpack(x, K, N)
    out = []
    for i in range(N):
        R = quat_to_matrix(quats[i])
        pred = scales[i] * (B @ R[:2].T) + ts[i]
        out.append((pred - X[i])[mask[i]].ravel())
    return np.concatenate(out)


def _jacobian(x, X, mask, K, N):
    """Sparse Jacobian of _residuals: each residual touches one point, one
    scale, one translation entry and one quaternion."""
    B, scales, ts, quats = _unpack(x, K, N)
    cam, kp = np.nonzero(mask)
    n = len(cam)
    Rd = [quat_to_matrix_grad(q) for q in quats]
    R2 = np.stack([r[0][:2] for r in Rd])[cam]  # (n, 2, 3)
    dR2 = np.stack([r[1][:2] for r in Rd])[cam]  # (n, 2, 3, 4)
    Bk = B[kp]
    s = scales[cam][:, None, None]
    # columns per (observation, coordinate): 3 point, 1 scale, 1 translation, 4 quaternion
    cols = np.concatenate([
        np.broadcast_to(3 * kp[:, None, None] + np.arange(3), (n, 2, 3)),
        np.broadcast_to((3 * K + cam)[:, None, None], (n, 2, 1)),
        (3 * K + N + 2 * cam[:, None] + np.arange(2))[:, :, None],
        np.broadcast_to((3 * K + 3 * N + 4 * cam)[:, None, None] + np.arange(4), (n, 2, 4)),
    ], axis=2)
    vals = np.concatenate([
        s * R2,
        np.einsum("ncd,nd->nc", R2, Bk)[:, :, None],
        np.ones((n, 2, 1)),
        s * np.einsum("ncdj,nd->ncj", dR2, Bk),
    ], axis=2)
    rows = np.broadcast_to(np.arange(2 * n).reshape(n, 2, 1), cols.shape)
    return sparse.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(2 * n, len(x)))


def _rms_residuals(B, cams, X, mask):
    res = []
    for i, c in enumerate(cams):
        d = (project(c, B) - X[i])[mask[i]]
        res.append(np.sqrt(np.mean(np.sum(d**2, axis=1))))
    return np.array(res)


def _symmetry_frame(B: np.ndarray, lr_pairs) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and offset taking the best-fit symmetry plane of B to x = 0
    with right-labelled keypoints at positive x."""
    left = np.array([p[0] for p in lr_pairs])
    right = np.array([p[1] for p in lr_pairs])
    n = (B[right] - B[left]).mean(axis=0)
    n /= np.linalg.norm(n)
    ex = np.array([1.0, 0.0, 0.0])
    c = float(n @ ex)
    if c < -1 + 1e-12:
        A = np.diag([-1.0, -1.0, 1.0])
    else:
        v = np.cross(n, ex)
        vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
        A = np.eye(3) + vx + vx @ vx / (1 + c)
    mid = 0.5 * (B[left] + B[right])
    offset = B.mean(axis=0)
    offset = offset - n * (n @ offset) + n * float((mid @ n).mean())
    return A, offset


def _reframe(B, cams, A, offset):
    """Express the reconstruction in the frame B' = A (B - offset)."""
    B2 = (B - offset) @ A.T
    new = []
    for c in cams:
        R2 = c.R @ A.T
        t2 = c.t + c.s * (c.R @ offset)[:2]
        new.append(Camera(c.s, t2, matrix_to_quat(R2)))
    return B2, new


def _octahedral_rotations() -> list:
    """The 24 proper rotations of the cube."""
    out = []
    for perm in ([0, 1, 2], [1, 2, 0], [2, 0, 1], [0, 2, 1], [2, 1, 0], [1, 0, 2]):
        for signs in np.ndindex(2, 2, 2):
            R = np.zeros((3, 3))
            for r, c in enumerate(perm):
                R[r, c] = 1.0 if signs[r] == 0 else -1.0
            if np.linalg.det(R) > 0:
                out.append(R)
    return out


def resection(X: np.ndarray, x: np.ndarray, visible: np.ndarray) -> Camera:
    """Weak-perspective camera best reprojecting 3D points X onto x, from 24
    rotation seeds with least-squares scale/translation and refinement."""
    vis = np.asarray(visible, dtype=bool)
    if vis.sum() < 4:
        raise DegenerateMotionError("resectioning needs at least 4 visible keypoints")
    X, x = X[vis], x[vis]
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(x))):
        raise NumericError("resectioning got non-finite points")

    def resid(vec):
        return (project_vec(vec, X) - x).ravel()

    def jac(vec):
        R, dR = quat_to_matrix_grad(vec[3:])
        J = np.empty((len(X), 2, 7))
        J[:, :, 0] = X @ R[:2].T
        J[:, :, 1:3] = np.eye(2)
        J[:, :, 3:] = vec[0] * np.einsum("cdj,nd->ncj", dR[:2], X)
        return J.reshape(-1, 7)

    best = None
    for R in _octahedral_rotations():
        P = X @ R[:2].T
        Pc, xc = P - P.mean(axis=0), x - x.mean(axis=0)
        s = max(float(np.sum(Pc * xc) / max(np.sum(Pc**2), 1e-12)), 1e-3)
        t = x.mean(axis=0) - s * P.mean(axis=0)
        vec0 = np.concatenate([[s], t, matrix_to_quat(R)])
        sol = least_squares(resid, vec0, jac=jac, method="lm")
        cost = float(np.sum(sol.fun**2))
        if sol.x[0] <= 0:
            continue
        if best is None or cost < best[0] - 1e-15:
            best = (cost, sol.x)
    if best is None:
        raise DegenerateMotionError("resectioning failed for every rotation seed")
    return Camera.from_vector(best[1])


def _factorized_start(W, Wmask, impute_rounds):
    """Rank-3 factorization of the (imputed) measurement matrix followed by
    the metric upgrade."""
    U, S, Vt, c = _impute_factorize(W, Wmask, impute_rounds)
    if len(S) < 3 or S[2] <= 1e-8 * S[0]:
        raise DegenerateMotionError("measurement matrix has rank < 3 (degenerate motion)")
    Mhat = U[:, :3] * np.sqrt(S[:3])
    Bhat = (np.sqrt(S[:3])[:, None] * Vt[:3]).T
    if not Wmask.all():
        Mhat, Bhat, c = _affine_refine(W, Wmask, Mhat, Bhat, c[:, 0])
        Wfull = Mhat @ Bhat.T + c[:, None]
        U, S, Vt = np.linalg.svd(Wfull - Wfull.mean(axis=1, keepdims=True), full_matrices=False)
        Mhat = U[:, :3] * np.sqrt(S[:3])
        Bhat = (np.sqrt(S[:3])[:, None] * Vt[:3]).T
    G = _metric_upgrade(Mhat)
    B = Bhat @ np.linalg.inv(G).T
    return B, _cameras_for(Mhat @ G, B, W.reshape(-1, 2, W.shape[1]).transpose(0, 2, 1),
                           Wmask[::2])


def _cameras_for(M, B, X, mask):
    Rs, scales = _cameras_from_motion(M)
    cams = []
    for i, (R, s) in enumerate(zip(Rs, scales)):
        t = (X[i] - s * (B @ R[:2].T))[mask[i]].mean(axis=0)
        cams.append(Camera(s, t, matrix_to_quat(R)))
    return cams


def _triangulate(cams: dict, X, mask, k) -> np.ndarray:
    A, b = [], []
    for i, c in cams.items():
        if mask[i, k]:
            A.append(c.s * c.R[:2])
            b.append(X[i, k] - c.t)
    return np.linalg.lstsq(np.concatenate(A), np.concatenate(b), rcond=None)[0]


def _spread(P) -> float:
    """Smallest over largest singular value of the centered point set."""
    if len(P) < 4:
        return 0.0
    sv = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    return float(sv[2] / sv[0])


def _incremental_start(X, mask, min_points=5, min_spread=0.1):
    """Factorize the largest fully observed block of views and keypoints,
    then alternate triangulation and resectioning until every view has a
    camera."""
    N, K, _ = X.shape
    best = None
    for i in range(N):
        S = np.flatnonzero(mask[i])
        if len(S) < min_points:
            continue
        V = np.flatnonzero(mask[:, S].all(axis=1))
        score = len(V) * len(S)
        if len(V) < 3 or (best is not None and score <= best[0]):
            continue
        W = X[V][:, S].transpose(0, 2, 1).reshape(2 * len(V), len(S))
        U, sv, Vt = np.linalg.svd(W - W.mean(axis=1, keepdims=True), full_matrices=False)
        if len(sv) >= 3 and sv[2] > 1e-3 * sv[0]:
            best = (score, V, S, U, sv, Vt)
    if best is None:
        raise DegenerateMotionError("no well-conditioned fully observed block of at least 3 views")
    _, V, S, U, sv, Vt = best
    Mhat = U[:, :3] * np.sqrt(sv[:3])
    G = _metric_upgrade(Mhat)
    BS = (np.sqrt(sv[:3])[:, None] * Vt[:3]).T @ np.linalg.inv(G).T
    cams = dict(zip(V.tolist(), _cameras_for(Mhat @ G, BS, X[V][:, S], mask[V][:, S])))
    B = np.full((K, 3), np.nan)
    B[S] = BS
    while len(cams) < N or np.isnan(B).any():
        progress = False
        for k in np.flatnonzero(np.isnan(B[:, 0])):
            if sum(mask[i, k] for i in cams) >= 2:
                B[k] = _triangulate(cams, X, mask, k)
                progress = True
        known = ~np.isnan(B[:, 0])
        # coplanar points leave a depth-reversed camera that fits equally
        # well, so only resect from point sets with real 3D extent
        spread = {i: _spread(B[mask[i] & known]) for i in range(N)
                  if i not in cams and (mask[i] & known).sum() >= 4}
        ready = [i for i, v in spread.items() if v >= min_spread]
        if not ready and not progress and spread and max(spread.values()) > 1e-6:
            ready = [max(spread, key=spread.get)]
        for i in ready:
            cams[i] = resection(B[known], X[i][known], mask[i][known])
            progress = True
        if not progress:
            raise DegenerateMotionError("incremental reconstruction could not reach every view")
    return B, [cams[i] for i in range(N)]


def _pick_branch(branches, mask):
    """Resolve the depth-reversal ambiguity. Occluded keypoints should lie
    behind visible ones (larger depth); when no instance has both, fall back
    to the branch whose first camera has the larger quaternion w."""
    scores = []
    for B, cams in branches:
        gaps = [np.mean(B[~m] @ c.R[2]) - np.mean(B[m] @ c.R[2])
                for c, m in zip(cams, mask) if m.any() and not m.all()]
        scores.append(float(np.sum(gaps)) if gaps else 0.0)
    if abs(scores[0] - scores[1]) > 1e-9:
        return branches[int(np.argmax(scores))]
    return max(branches, key=lambda bc: bc[1][0].q[0])


def sfm_factorize(obs: list, lr_pairs=None, impute_rounds: int = 500,
                  refine_iters: int = 200) -> SfMResult:
    """Orthographic factorization with scaled-orthographic metric upgrade and
    least-squares refinement of all cameras and points.

    lr_pairs: optional (left_index, right_index) keypoint pairs; when given,
    every view is paired with its mirror image (image x negated, pair labels
    swapped) during factorization, and the reconstruction is rotated so its
    symmetry plane is x = 0 with left keypoints at negative x.
    """
    N = len(obs)
    if N < 3:
        raise DegenerateMotionError("structure-from-motion needs at least 3 instances")
    K = len(obs[0].points)
    X = np.stack([o.points for o in obs])  # (N, K, 2)
    mask = np.stack([o.visible for o in obs])  # (N, K)
    if np.any(mask.sum(axis=1) < 4):
        raise DegenerateMotionError("every instance needs at least 4 visible keypoints")
    X_obs, mask_obs, N_obs = X, mask, N
    if lr_pairs:
        # mirrored views see the opposite side, which side views rarely
        # observe together
        perm = np.arange(K)
        for a, b in lr_pairs:
            perm[a], perm[b] = b, a
        X = np.concatenate([X, X[:, perm] * [-1.0, 1.0]])
        mask = np.concatenate([mask, mask[:, perm]])
        N = 2 * N
    W = X.transpose(0, 2, 1).reshape(2 * N, K)
    Wmask = np.repeat(mask, 2, axis=0)
    # two independent starts; the refined solution with the lower cost wins
    starts = []
    for make in (lambda: _incremental_start(X, mask), lambda: _factorized_start(W, Wmask, impute_rounds)):
        try:
            starts.append(make())
        except DegenerateMotionError as exc:
            log.info("SfM start skipped: %s", exc)
        if mask.all() and starts:
            break
    if not starts:
        raise DegenerateMotionError("measurement matrix has rank < 3 (degenerate motion)")
    best = None
    for B, cams in starts:
        x0 = _pack(B, np.array([c.s for c in cams]), np.stack([c.t for c in cams]), np.stack([c.q for c in cams]))
        sol = least_squares(_residuals, x0, jac=_jacobian, args=(X, mask, K, N), method="trf",
                            tr_solver="lsmr", x_scale="jac", max_nfev=refine_iters,
                            xtol=1e-12, ftol=1e-12, gtol=1e-12)
        c0 = 0.5 * np.sum(_residuals(x0, X, mask, K, N) ** 2)
        cand = (sol.cost, sol.x, sol.status == 0) if sol.cost <= c0 else (c0, x0, True)
        if best is None or cand[0] < best[0]:
            best = cand
    if best[2]:
        warnings.warn(f"SfM refinement did not converge in {refine_iters} evaluations; using the best iterate")
    B, scales, ts, quats = _unpack(best[1], K, N)
    # a negative scale is the same camera with its image axes rotated by pi
    flip = np.diag([-1.0, -1.0, 1.0])
    cams = [Camera(scales[i], ts[i], quats[i]) if scales[i] > 0
            else Camera(-scales[i], ts[i], matrix_to_quat(flip @ quat_to_matrix(quats[i])))
            for i in range(N_obs)]
    X, mask = X_obs, mask_obs

    # gauge: centered structure, unit mean camera scale
    B, cams = _reframe(B, cams, np.eye(3), B.mean(axis=0))
    k = float(np.mean([c.s for c in cams]))
    B = B * k
    cams = [Camera(c.s / k, c.t, c.q) for c in cams]

    branches = [(B, cams)]
    # global point-reflection ambiguity of orthographic factorization
    branches.append((-B, [Camera(c.s, c.t, matrix_to_quat(flip @ c.R)) for c in cams]))
    if lr_pairs:
        branches = [_reframe(b, c, *_symmetry_frame(b, lr_pairs)) for b, c in branches]
    B, cams = _pick_branch(branches, mask)
    return SfMResult(B, cams, _rms_residuals(B, cams, X, mask))
