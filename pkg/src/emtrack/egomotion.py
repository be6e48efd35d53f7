"""Sparse 3D flow, rigid camera-motion estimation and the residual motion field."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import FlowField
from .geometry import GridSpec, Intrinsics, PointCloud, RigidTransform, pixel_rays, scatter_max


class DegenerateConfigurationError(ValueError):
    """Too few or collinear correspondences for a rigid fit."""


class EgomotionFailure(RuntimeError):
    """No rigid hypothesis gathered enough support."""


@dataclass
class Flow3D:
    """Corresponding 3D points: ``x0`` in the first frame, ``x1`` in the second."""
    x0: np.ndarray
    x1: np.ndarray
    pixels: np.ndarray  # (N, 2) integer source pixel (u, v)

    def __len__(self) -> int:
        return len(self.x0)

    def transformed(self, T0: RigidTransform, T1: RigidTransform | None = None) -> "Flow3D":
        """Re-express both endpoints in another frame (``T1`` defaults to ``T0``)."""
        T1 = T0 if T1 is None else T1
        return Flow3D(T0.apply(self.x0), T1.apply(self.x1), self.pixels)

    def subset(self, idx) -> "Flow3D":
        return Flow3D(self.x0[idx], self.x1[idx], self.pixels[idx])


@dataclass
class EgomotionEstimate:
    T_fw: RigidTransform
    T_bw: RigidTransform
    cycle_error: float
    accepted: bool
    inlier_count: int

    def to_dict(self) -> dict:
        return {"T_fw": self.T_fw.to_dict(), "T_bw": self.T_bw.to_dict(),
                "cycle_error": float(self.cycle_error), "accepted": bool(self.accepted),
                "inlier_count": int(self.inlier_count)}


@dataclass
class MotionField:
    anchors: np.ndarray  # x0, first-frame coordinates
    residual: np.ndarray  # x1 - T(x0)

    @property
    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.residual, axis=1)

    def rasterize(self, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
        """Max residual magnitude per voxel, plus a mask of voxels holding any measurement."""
        mag = scatter_max(spec, self.anchors, self.magnitude)
        idx = spec.index_of(self.anchors)
        idx = idx[spec.inside(idx)]
        measured = np.zeros(spec.dims, dtype=bool)
        measured[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        return mag, measured


def _depth_at(depth: np.ndarray, valid: np.ndarray, x: np.ndarray, y: np.ndarray,
              rel_tol: float = 0.2, plane_tol: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-depth bilinear interpolation at subpixel positions.

    A sample counts as valid only when its four neighbours are valid, agree
    within ``rel_tol`` and lie on one plane (inverse depth of a plane is affine
    in pixel coordinates).  Samples straddling a depth discontinuity are
    therefore dropped instead of being assigned to the wrong surface."""
    h, w = depth.shape
    x0 = np.clip(np.floor(x).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(int), 0, max(h - 2, 0))
    fx, fy = x - x0, y - y0
    corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
    zs = np.stack([depth[a, b] for a, b in corners])
    ok = np.all(np.stack([valid[a, b] for a, b in corners]), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        spread = (zs.max(axis=0) - zs.min(axis=0)) / zs.min(axis=0)
        inv = 1.0 / zs
        twist = np.abs(inv[0] + inv[3] - inv[1] - inv[2]) / inv.mean(axis=0)
    smooth = ok & (spread < rel_tol) & (twist < plane_tol)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    with np.errstate(divide="ignore", invalid="ignore"):
        z = 1.0 / np.sum(np.where(smooth, inv, 0.0) * wts, axis=0)
    return np.where(smooth, z, 0.0), smooth


def lift_flow(f: FlowField, mask: np.ndarray | None, d0, d1, intr: Intrinsics) -> Flow3D:
    """Unproject both ends of every accepted flow vector that starts and ends on valid depth."""
    dv0, dv1 = _depth_parts(d0), _depth_parts(d1)
    h, w = f.shape
    ok = dv0[1] & f.valid
    if mask is not None:
        ok &= np.asarray(mask, bool)
    vs, us = np.nonzero(ok)
    tx = us + f.vectors[vs, us, 0]
    ty = vs + f.vectors[vs, us, 1]
    # end pixel must round onto the image
    inside = (np.round(tx) >= 0) & (np.round(tx) <= w - 1) & (np.round(ty) >= 0) & (np.round(ty) <= h - 1)
    us, vs, tx, ty = us[inside], vs[inside], tx[inside], ty[inside]
    z1, good = _depth_at(dv1[0], dv1[1], np.clip(tx, 0, w - 1), np.clip(ty, 0, h - 1))
    us, vs, tx, ty, z1 = us[good], vs[good], tx[good], ty[good], z1[good]
    z0 = dv0[0][vs, us]
    x0 = pixel_rays(intr, us, vs) * z0[:, None]
    x1 = pixel_rays(intr, tx, ty) * z1[:, None]
    return Flow3D(x0, x1, np.column_stack([us, vs]))


def _depth_parts(d) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(d, "values"):
        return d.values, d.valid
    d = np.asarray(d, float)
    return d, np.isfinite(d) & (d > 0)


def _as_points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, float).reshape(-1, 3)


def _kabsch_batch(src: np.ndarray, dst: np.ndarray, rel_tol: float = 1e-10):
    """Batched least-squares rigid fits for (B, N, 3) correspondences.

    Returns (R, t, ok) where ``ok`` flags non-degenerate configurations."""
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    H = np.einsum("bni,bnj->bij", src - cs, dst - cd)
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.transpose(0, 2, 1) @ U.transpose(0, 2, 1)))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = Vt.transpose(0, 2, 1) @ D @ U.transpose(0, 2, 1)
    t = cd[:, 0] - np.einsum("bij,bj->bi", R, cs[:, 0])
    scale = np.maximum(S[:, 0], 1e-300)
    ok = S[:, 1] > rel_tol * scale
    return R, t, ok


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def kabsch(src, dst) -> RigidTransform:
    """Rigid transform minimizing the summed squared distance from ``R src + t`` to ``dst``."""
    a, b = _as_points(src), _as_points(dst)
    if a.shape != b.shape:
        raise ValueError("src and dst must have the same number of points")
    if len(a) < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {len(a)}")
    R, t, ok = _kabsch_batch(a[None], b[None])
    if not ok[0]:
        raise DegenerateConfigurationError("correspondences are collinear or coincident")
    return RigidTransform(_orthonormalize(R[0]), t[0])


def _sample_triples(n: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(0, n, size=(iters, 3))
    for _ in range(100):
        bad = (idx[:, 0] == idx[:, 1]) | (idx[:, 0] == idx[:, 2]) | (idx[:, 1] == idx[:, 2])
        if not bad.any():
            break
        idx[bad] = rng.integers(0, n, size=(int(bad.sum()), 3))
    return idx


def ransac_rigid(flows: Flow3D, iters: int = 256, inlier_eps: float = 0.05,
                 rng: np.random.Generator | int | None = 0, chunk: int = 64, max_score_points: int = 4000):
    """Rigid motion explaining the most correspondences.

    Returns ``(transform, inlier_mask)``; raises :class:`EgomotionFailure`
    when no hypothesis has three or more inliers.  Ties go to the lowest
    hypothesis index, so the result does not depend on evaluation order."""
    x0, x1 = flows.x0, flows.x1
    n = len(x0)
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {n}")
    if n == 3:
        T = kabsch(x0, x1)
        return T, np.ones(3, dtype=bool)
    rng = np.random.default_rng(rng)
    samples = _sample_triples(n, iters, rng)
    R, t, ok = _kabsch_batch(x0[samples], x1[samples])
    # hypotheses are scored on a fixed random subset; the refit uses every point
    score = np.sort(rng.choice(n, max_score_points, replace=False)) if n > max_score_points else np.arange(n)
    s0, s1 = x0[score], x1[score]
    counts = np.zeros(iters, dtype=int)
    eps2 = inlier_eps ** 2
    for s in range(0, iters, chunk):
        pred = np.einsum("bij,nj->bni", R[s:s + chunk], s0) + t[s:s + chunk, None]
        err2 = np.sum((pred - s1[None]) ** 2, axis=-1)
        counts[s:s + chunk] = np.sum(err2 < eps2, axis=1)
    counts[~ok] = -1
    best = int(np.argmax(counts))  # argmax returns the first maximum
    pred = x0 @ R[best].T + t[best]
    inliers = np.sum((pred - x1) ** 2, axis=1) < eps2
    if counts[best] < 0 or inliers.sum() < 3:
        raise EgomotionFailure("no rigid hypothesis with at least 3 inliers")
    try:
        T = kabsch(x0[inliers], x1[inliers])
    except DegenerateConfigurationError:
        T = RigidTransform(_orthonormalize(R[best]), t[best])
    return T, inliers


def check_egomotion_cycle(T_fw: RigidTransform, T_bw: RigidTransform, x0, threshold: float = 0.25):
    """Worst-case drift of points sent forward then back; returns (error, accepted)."""
    pts = _as_points(x0)
    if len(pts) == 0:
        raise ValueError("cycle check needs a non-empty cloud")
    err = float(np.max(np.linalg.norm(T_bw.apply(T_fw.apply(pts)) - pts, axis=1)))
    return err, err < threshold


def estimate_egomotion(fw: Flow3D, bw: Flow3D, iters: int = 256, inlier_eps: float = 0.05,
                       threshold: float = 0.25, rng: np.random.Generator | int | None = 0) -> EgomotionEstimate:
    """Independent forward and backward RANSAC fits, certified by the cycle check.

    A failed fit in either direction yields a rejected estimate with infinite cycle error."""
    rng = np.random.default_rng(rng)
    try:
        T_fw, inl = ransac_rigid(fw, iters, inlier_eps, rng)
        T_bw, _ = ransac_rigid(bw, iters, inlier_eps, rng)
    except (EgomotionFailure, DegenerateConfigurationError):
        ident = RigidTransform.identity()
        return EgomotionEstimate(ident, ident, float("inf"), False, 0)
    err, accepted = check_egomotion_cycle(T_fw, T_bw, fw.x0, threshold)
    return EgomotionEstimate(T_fw, T_bw, err, accepted, int(inl.sum()))


def motion_field(flows: Flow3D, T_fw: RigidTransform) -> MotionField:
    """Per-correspondence motion left over after removing the camera motion."""
    return MotionField(flows.x0.copy(), flows.x1 - T_fw.apply(flows.x0))
