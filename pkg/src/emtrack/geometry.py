"""Geometric primitives shared by every stage of the pipeline.

Conventions: right-handed frames with +z forward and +y up.  Box yaw is an
angle in the ground (x, z) plane; a box with yaw ``a`` has its length axis
along ``(cos a, 0, sin a)``.  Box sizes are ``(l, h, w)``: length along the
heading, height along +y, width across the heading.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap an angle (or array of angles) into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % TWO_PI - np.pi


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def rot_yaw(a: float) -> np.ndarray:
    """Rotation taking heading ``a`` to heading ``a + b`` when called with ``b``."""
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def rot_pitch(theta: float) -> np.ndarray:
    """Camera-from-level rotation for a camera pitched down by ``theta``."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


@dataclass
class PointCloud:
    points: np.ndarray
    pixels: np.ndarray | None = None  # (N, 2) integer (u, v) source pixels

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DepthMap:
    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        ok = np.isfinite(self.values) & (self.values > 0)
        self.valid = ok if self.valid is None else (np.asarray(self.valid, bool) & ok)


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float, float]
    voxel_size: tuple[float, float, float]
    dims: tuple[int, int, int]

    def __post_init__(self):
        if min(self.dims) <= 0 or min(self.voxel_size) <= 0:
            raise ValueError("grid dims and voxel size must be positive")

    @property
    def origin_arr(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=float)

    @property
    def size_arr(self) -> np.ndarray:
        return np.asarray(self.voxel_size, dtype=float)

    @property
    def extent(self) -> np.ndarray:
        return self.size_arr * np.asarray(self.dims)

    def voxel_centers(self) -> np.ndarray:
        """(X, Y, Z, 3) array of voxel-center coordinates."""
        axes = [self.origin[i] + (np.arange(self.dims[i]) + 0.5) * self.voxel_size[i] for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def index_of(self, points) -> np.ndarray:
        return np.floor((np.asarray(points, float) - self.origin_arr) / self.size_arr).astype(int)

    def inside(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def continuous_index(self, points) -> np.ndarray:
        """Coordinates in voxel units with voxel centers at integers."""
        return (np.asarray(points, float) - self.origin_arr) / self.size_arr - 0.5

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": list(self.voxel_size), "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(float(v) for v in d["origin"]), tuple(float(v) for v in d["voxel_size"]),
                   tuple(int(v) for v in d["dims"]))


@dataclass
class VoxelGrid:
    spec: GridSpec
    values: np.ndarray  # (X, Y, Z) or (X, Y, Z, C)

    def __post_init__(self):
        if tuple(self.values.shape[:3]) != tuple(self.spec.dims):
            raise ValueError("value array does not match grid dims")


@dataclass
class Box3D:
    center: np.ndarray
    size: np.ndarray  # (l, h, w)
    yaw: float = 0.0
    confidence: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.size = np.asarray(self.size, dtype=float).reshape(3)
        self.yaw = float(wrap_angle(self.yaw))
        if np.any(self.size <= 0):
            raise ValueError("box size must be positive")

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise (x, z) corners of the footprint."""
        c = self.center[[0, 2]]
        el = np.array([np.cos(self.yaw), np.sin(self.yaw)])
        ew = np.array([-el[1], el[0]])
        hl, hw = self.size[0] / 2, self.size[2] / 2
        return np.array([c + hl * el + hw * ew, c - hl * el + hw * ew,
                         c - hl * el - hw * ew, c + hl * el - hw * ew])

    def corners(self) -> np.ndarray:
        """(8, 3) corners: bottom face then top face."""
        bev = self.bev_corners()
        y0 = self.center[1] - self.size[1] / 2
        y1 = self.center[1] + self.size[1] / 2
        bottom = np.column_stack([bev[:, 0], np.full(4, y0), bev[:, 1]])
        top = np.column_stack([bev[:, 0], np.full(4, y1), bev[:, 1]])
        return np.vstack([bottom, top])

    def to_local(self, points) -> np.ndarray:
        """Express points in the box frame (length axis x, up y, width axis z)."""
        return (np.asarray(points, float) - self.center) @ rot_yaw(self.yaw)

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        local = self.to_local(points)
        half = self.size / 2 + margin
        return np.all(np.abs(local) <= half, axis=-1)

    def enlarged(self, margin: float) -> "Box3D":
        return Box3D(self.center.copy(), np.maximum(self.size + 2 * margin, 1e-3), self.yaw, self.confidence)

    def volume(self) -> float:
        return float(np.prod(self.size))

    def to_dict(self) -> dict:
        return {"center": [float(v) for v in self.center], "size": [float(v) for v in self.size],
                "yaw": float(self.yaw), "confidence": float(self.confidence)}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(np.array(d["center"]), np.array(d["size"]), float(d.get("yaw", 0.0)),
                   float(d.get("confidence", 1.0)))


@dataclass
class Box2D:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError("degenerate 2D box")

    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


# ---------------------------------------------------------------------------
# projection

def project(points, intr: Intrinsics):
    """Project camera-frame points.  Returns ``(uv, z, keep)`` where ``keep``
    indexes the input points that lie in front of the camera."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    keep = np.nonzero(pts[:, 2] > 0)[0]
    p = pts[keep]
    u = intr.fx * p[:, 0] / p[:, 2] + intr.cx
    v = intr.fy * p[:, 1] / p[:, 2] + intr.cy
    return np.column_stack([u, v]), p[:, 2].copy(), keep


def rasterize_depth(points, intr: Intrinsics) -> DepthMap:
    """Z-buffer camera-frame points into a depth map (nearest point wins)."""
    uv, z, _ = project(points, intr)
    ui = np.round(uv[:, 0]).astype(int)
    vi = np.round(uv[:, 1]).astype(int)
    ok = (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    depth = np.full((intr.height, intr.width), np.inf)
    np.minimum.at(depth, (vi[ok], ui[ok]), z[ok])
    valid = np.isfinite(depth)
    depth[~valid] = 0.0
    return DepthMap(depth, valid)


def pixel_rays(intr: Intrinsics, u, v) -> np.ndarray:
    """Camera-frame ray directions with unit z for pixel coordinates."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def unproject(depth: DepthMap, intr: Intrinsics) -> PointCloud:
    vs, us = np.nonzero(depth.valid)
    z = depth.values[vs, us]
    pts = pixel_rays(intr, us, vs) * z[:, None]
    return PointCloud(pts, np.column_stack([us, vs]))


def apply_transform(T: RigidTransform, pc: PointCloud) -> PointCloud:
    return PointCloud(T.apply(pc.points), None if pc.pixels is None else pc.pixels.copy())


# ---------------------------------------------------------------------------
# box overlap

def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of a convex polygon by a CCW convex polygon."""
    out = subject
    n = len(clip)
    for i in range(n):
        if len(out) == 0:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        side = edge[0] * (out[:, 1] - a[1]) - edge[1] * (out[:, 0] - a[0])
        inside = side >= 0
        new = []
        m = len(out)
        for j in range(m):
            p, q = out[j], out[(j + 1) % m]
            sp, sq = side[j], side[(j + 1) % m]
            if inside[j]:
                new.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                new.append(p + t * (q - p))
        out = np.array(new) if new else np.zeros((0, 2))
    return out


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def bev_intersection(a: Box3D, b: Box3D) -> float:
    return polygon_area(_clip_polygon(a.bev_corners(), b.bev_corners()))


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    union = a.size[0] * a.size[2] + b.size[0] * b.size[2] - inter
    return float(np.clip(inter / union, 0.0, 1.0)) if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    ylo = max(a.center[1] - a.size[1] / 2, b.center[1] - b.size[1] / 2)
    yhi = min(a.center[1] + a.size[1] / 2, b.center[1] + b.size[1] / 2)
    if yhi <= ylo:
        return 0.0
    inter = bev_intersection(a, b) * (yhi - ylo)
    union = a.volume() + b.volume() - inter
    return float(np.clip(inter / union, 0.0, 1.0)) if union > 0 else 0.0


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area() + b.area() - inter))


def yaw_of(rotation: np.ndarray) -> float:
    """Heading change a rotation applies to the +x axis in the ground plane."""
    return float(np.arctan2(rotation[2, 0], rotation[0, 0]))


def transform_box(box: Box3D, T: RigidTransform) -> Box3D:
    """Box carried by a (near-)vertical-axis rigid motion."""
    return Box3D(T.apply(box.center), box.size.copy(), box.yaw + yaw_of(T.rotation), box.confidence)


def box_to_2d(box: Box3D, intr: Intrinsics, cam_from_box: RigidTransform | None = None) -> Box2D | None:
    """Image-space bounding rectangle of a projected 3D box, clipped to the image."""
    corners = box.corners()
    if cam_from_box is not None:
        corners = cam_from_box.apply(corners)
    if np.any(corners[:, 2] <= 1e-3):
        corners = corners[corners[:, 2] > 1e-3]
        if len(corners) == 0:
            return None
    uv, _, _ = project(corners, intr)
    x0 = max(uv[:, 0].min(), 0.0)
    x1 = min(uv[:, 0].max(), intr.width - 1.0)
    y0 = max(uv[:, 1].min(), 0.0)
    y1 = min(uv[:, 1].max(), intr.height - 1.0)
    if x1 <= x0 or y1 <= y0:
        return None
    return Box2D(x0, y0, x1, y1, box.confidence)


# ---------------------------------------------------------------------------
# voxel operations

def voxelize(pc, spec: GridSpec) -> VoxelGrid:
    points = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, float).reshape(-1, 3)
    occ = np.zeros(spec.dims, dtype=np.float32)
    idx = spec.index_of(points)
    idx = idx[spec.inside(idx)]
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelGrid(spec, occ)


def scatter_max(spec: GridSpec, points, values) -> np.ndarray:
    """Per-voxel maximum of ``values`` over the points falling in each voxel (0 if none)."""
    out = np.zeros(spec.dims, dtype=float)
    idx = spec.index_of(points)
    ok = spec.inside(idx)
    idx = idx[ok]
    np.maximum.at(out, (idx[:, 0], idx[:, 1], idx[:, 2]), np.asarray(values, float)[ok])
    return out


def scatter_mean(spec: GridSpec, points, values) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel mean of (N,) or (N, C) values; returns (mean, count)."""
    values = np.asarray(values, float)
    idx = spec.index_of(points)
    ok = spec.inside(idx)
    flat = np.ravel_multi_index(idx[ok].T, spec.dims)
    n = int(np.prod(spec.dims))
    count = np.bincount(flat, minlength=n).astype(float)
    if values.ndim == 1:
        total = np.bincount(flat, weights=values[ok], minlength=n)
        mean = np.divide(total, count, out=np.zeros(n), where=count > 0)
        return mean.reshape(spec.dims), count.reshape(spec.dims)
    chans = [np.bincount(flat, weights=values[ok, c], minlength=n) for c in range(values.shape[1])]
    total = np.stack(chans, axis=-1)
    mean = np.divide(total, count[:, None], out=np.zeros_like(total), where=count[:, None] > 0)
    return mean.reshape(*spec.dims, -1), count.reshape(spec.dims)


def raycast_visibility(pc, spec: GridSpec, intr: Intrinsics,
                       cam_from_grid: RigidTransform | None = None) -> VoxelGrid:
    """Per-voxel visibility from a camera at the camera-frame origin.

    ``pc`` is given in the grid frame; ``cam_from_grid`` maps grid-frame
    coordinates to the camera frame.  A voxel is visible (1) when its center
    lies in front of, or within half a voxel behind, the first surface along
    its pixel ray, or when that ray has no return.  Voxels behind a surface
    and voxels outside the camera frustum are 0.
    """
    T = cam_from_grid or RigidTransform.identity()
    points = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, float).reshape(-1, 3)
    surface = rasterize_depth(T.apply(points), intr)
    surf = np.where(surface.valid, surface.values, np.inf)
    centers = T.apply(spec.voxel_centers().reshape(-1, 3))
    vis = np.zeros(len(centers), dtype=np.float32)
    uv, z, keep = project(centers, intr)
    ui = np.round(uv[:, 0]).astype(int)
    vi = np.round(uv[:, 1]).astype(int)
    ok = (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    tol = 0.5 * min(spec.voxel_size)
    seen = z[ok] <= surf[vi[ok], ui[ok]] + tol
    vis[keep[ok]] = seen.astype(np.float32)
    return VoxelGrid(spec, vis.reshape(spec.dims))


def trilinear_sample(grid: VoxelGrid, xyz) -> np.ndarray | float:
    """Trilinear interpolation of voxel-center values at world points (clamped to the grid)."""
    pts = np.asarray(xyz, float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    dims = np.asarray(grid.spec.dims)
    q = np.clip(grid.spec.continuous_index(pts), 0, dims - 1)
    i0 = np.minimum(np.floor(q).astype(int), np.maximum(dims - 2, 0))
    f = q - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    v = grid.values
    out = 0.0
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                iz = i1[:, 2] if dz else i0[:, 2]
                w = wx * wy * wz
                val = v[ix, iy, iz]
                out = out + (w[:, None] * val if val.ndim > 1 else w * val)
    out = np.asarray(out)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# box fitting

class DegenerateBoxError(ValueError):
    pass


def _min_area_rect(xz: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Yaw and (lo, hi) extents of the minimum-area rectangle around 2D points."""
    try:
        hull = xz[ConvexHull(xz).vertices]
    except (QhullError, ValueError):
        centered = xz - xz.mean(axis=0)
        _, vecs = np.linalg.eigh(centered.T @ centered)
        axis = vecs[:, -1]
        yaw = np.arctan2(axis[1], axis[0])
        hull = xz
        candidates = [yaw]
    else:
        edges = np.roll(hull, -1, axis=0) - hull
        candidates = np.arctan2(edges[:, 1], edges[:, 0])
    best = None
    for a in candidates:
        el = np.array([np.cos(a), np.sin(a)])
        ew = np.array([-el[1], el[0]])
        pl, pw = hull @ el, hull @ ew
        area = (pl.max() - pl.min()) * (pw.max() - pw.min())
        if best is None or area < best[0] - 1e-12:
            best = (area, a)
    a = best[1]
    el = np.array([np.cos(a), np.sin(a)])
    ew = np.array([-el[1], el[0]])
    lo = np.array([(xz @ el).min(), (xz @ ew).min()])
    hi = np.array([(xz @ el).max(), (xz @ ew).max()])
    return float(a), lo, hi


def fit_box(points, min_size: float = 1e-3, confidence: float = 1.0) -> Box3D:
    """Fit an upright box to points: footprint from the minimum-area BEV
    rectangle, height from the vertical extent.  Length is the longer side and
    yaw is reported in [-pi/2, pi/2)."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateBoxError("need at least 3 points to fit a box")
    xz = pts[:, [0, 2]]
    yaw, lo, hi = _min_area_rect(xz)
    ext = hi - lo
    mid = (lo + hi) / 2
    el = np.array([np.cos(yaw), np.sin(yaw)])
    ew = np.array([-el[1], el[0]])
    c_xz = mid[0] * el + mid[1] * ew
    length, width = ext[0], ext[1]
    if width > length:
        length, width = width, length
        yaw += np.pi / 2
    yaw = float((yaw + np.pi / 2) % np.pi - np.pi / 2)
    y0, y1 = pts[:, 1].min(), pts[:, 1].max()
    size = np.maximum([length, y1 - y0, width], min_size)
    return Box3D(np.array([c_xz[0], (y0 + y1) / 2, c_xz[1]]), size, yaw, confidence)
