"""Object proposals from motion and appearance cues, and the supervision
regions used to train the appearance models on them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .egomotion import MotionField, kabsch, DegenerateConfigurationError
from .geometry import (Box3D, DegenerateBoxError, GridSpec, Intrinsics, RigidTransform, fit_box,
                       iou_bev, project)

POSITIVE, NEGATIVE, IGNORE = 1, -1, 0
CUES = ("motion", "seg2d", "det3d")
_FULL_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class SaliencyConfig:
    motion_threshold: float = 0.25
    bins: int = 8
    hist_range: float = 1.0
    chi2_threshold: float = 0.5
    shell_width: int = 3
    min_voxels: int = 4

    def __post_init__(self):
        if min(self.motion_threshold, self.bins, self.hist_range, self.chi2_threshold,
               self.shell_width, self.min_voxels) <= 0:
            raise ValueError("saliency parameters must be positive")


@dataclass(frozen=True)
class FusionConfig:
    decay: float = 2.0
    threshold: float = 2.0
    motion_heat: str = "static"  # "static": exp(-decay |dx|); "moving": 1 - exp(-decay |dx|)
    min_voxels: int = 4
    dedup_iou: float = 0.3

    def __post_init__(self):
        if self.decay <= 0 or self.threshold <= 0:
            raise ValueError("decay and threshold must be positive")
        if self.motion_heat not in ("static", "moving"):
            raise ValueError("motion_heat must be 'static' or 'moving'")


@dataclass
class Region:
    voxels: np.ndarray  # (K, 3) integer indices
    points: np.ndarray  # (N, 3) member points
    box: Box3D | None = None

    def __len__(self) -> int:
        return len(self.voxels)


@dataclass
class PseudoLabel:
    frame_id: str
    box: Box3D
    round: int
    cues: tuple[str, ...] = ("motion",)
    confidence: float = 1.0

    def to_dict(self) -> dict:
        return {"frame_id": self.frame_id, "round": int(self.round),
                "center": [float(v) for v in self.box.center], "size": [float(v) for v in self.box.size],
                "yaw": float(self.box.yaw), "confidence": float(self.confidence), "cues": list(self.cues)}

    @classmethod
    def from_dict(cls, d: dict) -> "PseudoLabel":
        conf = float(d.get("confidence", 1.0))
        box = Box3D(np.array(d["center"], float), np.array(d["size"], float), float(d["yaw"]), conf)
        return cls(d["frame_id"], box, int(d["round"]), tuple(d.get("cues", ())), conf)


@dataclass
class SupervisionRegions:
    labels_2d: np.ndarray | None = None  # (H, W) int8 of POSITIVE / NEGATIVE / IGNORE
    heatmap: np.ndarray | None = None  # (X, Y, Z) objectness target
    size: np.ndarray | None = None  # (X, Y, Z, 3)
    offset: np.ndarray | None = None  # (X, Y, Z, 3)
    orientation: np.ndarray | None = None  # (X, Y, Z) bin index, -1 where unsupervised
    valid: np.ndarray | None = None  # (X, Y, Z) bool, False = ignore
    peaks: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# regions

def connected_components(grid: np.ndarray, threshold: float, min_voxels: int = 4,
                         spec: GridSpec | None = None, points: np.ndarray | None = None) -> list[Region]:
    """26-connected components of voxels strictly above ``threshold``.

    When ``spec`` and ``points`` are given, each region collects the points
    whose voxel belongs to it."""
    lab, n = ndimage.label(np.asarray(grid) > threshold, structure=_FULL_26)
    if n == 0:
        return []
    if spec is not None and points is not None and len(points):
        idx = spec.index_of(points)
        ok = spec.inside(idx)
        pt_lab = np.zeros(len(points), dtype=int)
        pt_lab[ok] = lab[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
    else:
        pt_lab = None
    regions = []
    counts = np.bincount(lab.ravel(), minlength=n + 1)
    for k in range(1, n + 1):
        if counts[k] < min_voxels:
            continue
        vox = np.argwhere(lab == k)
        pts = points[pt_lab == k] if pt_lab is not None else np.zeros((0, 3))
        regions.append(Region(vox, pts))
    return regions


def _histogram(residuals: np.ndarray, bins: int, rng: float) -> np.ndarray:
    edges = np.linspace(-rng, rng, bins + 1)
    clipped = np.clip(residuals, -rng, rng - 1e-12)
    h, _ = np.histogramdd(clipped, bins=(edges, edges, edges))
    total = h.sum()
    return (h / total).ravel() if total > 0 else h.ravel()


def chi_square(p: np.ndarray, q: np.ndarray, eps: float = 1e-9) -> float:
    """Symmetric chi-square distance between normalized histograms, in [0, 1]."""
    return float(0.5 * np.sum((p - q) ** 2 / (p + q + eps)))


def center_surround(region: Region, motion: MotionField, spec: GridSpec,
                    cfg: SaliencyConfig = SaliencyConfig()) -> float | None:
    """Distinctness of a region's motion from the shell of voxels around it.

    Motion vectors are binned jointly over their three components.  Returns
    None when the surrounding shell holds no measurements."""
    inside = np.zeros(spec.dims, dtype=bool)
    inside[region.voxels[:, 0], region.voxels[:, 1], region.voxels[:, 2]] = True
    shell = ndimage.binary_dilation(inside, structure=_FULL_26, iterations=cfg.shell_width) & ~inside
    idx = spec.index_of(motion.anchors)
    ok = spec.inside(idx)
    in_c = np.zeros(len(idx), dtype=bool)
    in_s = np.zeros(len(idx), dtype=bool)
    in_c[ok] = inside[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
    in_s[ok] = shell[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
    if not in_s.any() or not in_c.any():
        return None
    p = _histogram(motion.residual[in_c], cfg.bins, cfg.hist_range)
    q = _histogram(motion.residual[in_s], cfg.bins, cfg.hist_range)
    return chi_square(p, q)


# ---------------------------------------------------------------------------
# handcrafted (motion-only) proposals

@dataclass(frozen=True)
class PromotionConfig:
    """Checks a motion region must pass before becoming a label."""
    min_points: int = 30
    border_margin: int = 2
    occlusion_gap: float = 0.3
    occlusion_reach: int = 3  # px; silhouette pixels without reliable depth are missing from the footprint
    rigidity_rms: float = 0.05
    min_aspect: float = 0.5  # width / length; thinner boxes are partial views
    min_length: float = 0.5
    min_height: float = 0.2
    require_inside_grid: bool = True


def _touches_grid_boundary(voxels: np.ndarray, dims) -> bool:
    d = np.asarray(dims)
    return bool(np.any(voxels == 0) or np.any(voxels == d - 1))


def _occluded(pixels: np.ndarray, own_depth: np.ndarray, depth: np.ndarray, valid: np.ndarray,
              gap: float, reach: int = 2) -> bool:
    """True when a nearer surface lies within ``reach`` pixels of the region's footprint."""
    h, w = depth.shape
    mask = np.zeros((h, w), dtype=bool)
    mask[pixels[:, 1], pixels[:, 0]] = True
    mask = ndimage.binary_closing(mask, iterations=1) | mask
    ring = ndimage.binary_dilation(mask, iterations=reach) & ~mask
    if not ring.any():
        return False
    zmap = np.full((h, w), np.inf)
    zmap[pixels[:, 1], pixels[:, 0]] = own_depth
    near_own = ndimage.grey_erosion(zmap, size=(2 * reach + 1,) * 2)  # nearest own depth within reach
    ry, rx = np.nonzero(ring & valid)
    return bool(np.any(depth[ry, rx] < near_own[ry, rx] - gap))


def motion_proposals(motion: MotionField, frame_points: np.ndarray, frame_pixels: np.ndarray,
                     depth: np.ndarray, spec: GridSpec, intr: Intrinsics, moved_to: np.ndarray | None = None,
                     cfg: SaliencyConfig = SaliencyConfig(), promo: PromotionConfig = PromotionConfig(),
                     ground_y: float | None = None) -> list[tuple[Box3D, float]]:
    """Conservative boxes around salient moving regions.

    ``motion.anchors`` are lifted points of this frame; ``moved_to`` holds the
    same points in the other frame (for the rigidity check).  ``frame_points``
    and ``frame_pixels`` describe the full depth cloud of the frame.  Returns
    (box, chi-square score) pairs."""
    mag, _ = motion.rasterize(spec)
    h, w = depth.shape
    valid = depth > 0
    out = []
    for region in connected_components(mag, cfg.motion_threshold, cfg.min_voxels):
        if promo.require_inside_grid and _touches_grid_boundary(region.voxels, spec.dims):
            continue
        score = center_surround(region, motion, spec, cfg)
        if score is None or score <= cfg.chi2_threshold:
            continue
        inside = np.zeros(spec.dims, dtype=bool)
        inside[region.voxels[:, 0], region.voxels[:, 1], region.voxels[:, 2]] = True
        idx = spec.index_of(motion.anchors)
        ok = spec.inside(idx)
        member = np.zeros(len(idx), dtype=bool)
        member[ok] = inside[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
        member &= motion.magnitude > cfg.motion_threshold
        if member.sum() < promo.min_points:
            continue
        if moved_to is not None:
            try:
                T = kabsch(motion.anchors[member], moved_to[member])
            except DegenerateConfigurationError:
                continue
            rms = np.sqrt(np.mean(np.sum((T.apply(motion.anchors[member]) - moved_to[member]) ** 2, axis=1)))
            if rms > promo.rigidity_rms:
                continue
        pts = motion.anchors[member]
        # every visible point of the object, not only the ones with flow
        pidx = spec.index_of(frame_points)
        pok = spec.inside(pidx)
        near = np.zeros(len(frame_points), dtype=bool)
        grown = ndimage.binary_dilation(inside, structure=_FULL_26)
        near[pok] = grown[pidx[pok, 0], pidx[pok, 1], pidx[pok, 2]]
        try:
            rough = fit_box(pts)
        except DegenerateBoxError:
            continue
        near &= rough.contains(frame_points, margin=0.05)
        if ground_y is not None:
            near &= frame_points[:, 1] > ground_y + 0.05
        obj_pts = frame_points[near] if near.sum() >= promo.min_points else pts
        obj_px = frame_pixels[near] if near.sum() >= promo.min_points else None
        if obj_px is not None:
            u, v = obj_px[:, 0], obj_px[:, 1]
            m = promo.border_margin
            if np.any((u < m) | (u >= w - m) | (v < m) | (v >= h - m)):
                continue
            if _occluded(obj_px, depth[v, u], depth, valid, promo.occlusion_gap, promo.occlusion_reach):
                continue
        try:
            box = fit_box(obj_pts)
        except DegenerateBoxError:
            continue
        box = extend_to_ground(box, ground_y)
        if not plausible(box, promo):
            continue
        out.append((box, float(score)))
    return out


def plausible(box: Box3D, promo: PromotionConfig = PromotionConfig()) -> bool:
    """Reject slivers: thin or tiny boxes come from partial views of an object."""
    l, h, w = box.size
    return bool(w >= promo.min_aspect * l and l >= promo.min_length and h >= promo.min_height)


def extend_to_ground(box: Box3D, ground_y: float | None, reach: float = 0.3) -> Box3D:
    """Drop the box bottom onto the ground when it floats just above it."""
    if ground_y is None:
        return box
    top = box.center[1] + box.size[1] / 2
    bottom = box.center[1] - box.size[1] / 2
    if bottom - ground_y > reach or top <= ground_y:
        return box
    c = box.center.copy()
    s = box.size.copy()
    c[1] = (top + ground_y) / 2
    s[1] = top - ground_y
    return Box3D(c, s, box.yaw, box.confidence)


def estimate_ground(points: np.ndarray, percentile: float = 5.0) -> float:
    """Ground height as a low percentile of point heights."""
    if len(points) == 0:
        return 0.0
    return float(np.percentile(points[:, 1], percentile))


# ---------------------------------------------------------------------------
# ensemble fusion

def motion_heat(magnitude: np.ndarray, measured: np.ndarray, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Per-voxel motion cue; zero where no motion was measured."""
    decay = np.exp(-cfg.decay * magnitude)
    heat = decay if cfg.motion_heat == "static" else 1.0 - decay
    return np.where(measured, heat, 0.0)


def fuse_ensemble(m_heat: np.ndarray, seg_heat: np.ndarray, det_heat: np.ndarray,
                  cfg: FusionConfig = FusionConfig(), spec: GridSpec | None = None,
                  points: np.ndarray | None = None, ground_y: float | None = None,
                  promo: PromotionConfig | None = None):
    """Sum the three cue grids and propose boxes where the sum clears the threshold.

    Returns (fused grid, list of (box, confidence)).  Proposals need ``spec``
    and ``points`` (the frame cloud) to fit boxes; with ``promo`` set,
    implausible box shapes are dropped."""
    if not (m_heat.shape == seg_heat.shape == det_heat.shape):
        raise ValueError("cue grids must share one grid spec")
    fused = m_heat + seg_heat + det_heat
    proposals = []
    if spec is None or points is None:
        return fused, proposals
    for region in connected_components(fused, cfg.threshold, cfg.min_voxels, spec, points):
        if len(region.points) < 3:
            continue
        try:
            box = fit_box(region.points)
        except DegenerateBoxError:
            continue
        box = extend_to_ground(box, ground_y)
        if promo is not None and not plausible(box, promo):
            continue
        v = region.voxels
        conf = float(np.clip(fused[v[:, 0], v[:, 1], v[:, 2]].mean() / 3.0, 0.0, 1.0))
        box.confidence = conf
        proposals.append((box, conf))
    return fused, proposals


def dedup_against(proposals, existing: list[Box3D], iou: float = 0.3):
    """Drop proposals overlapping existing boxes or a higher-confidence proposal."""
    kept: list = []
    for box, conf in sorted(proposals, key=lambda bc: -bc[1]):
        if any(iou_bev(box, e) > iou for e in existing):
            continue
        if any(iou_bev(box, k[0]) > iou for k in kept):
            continue
        kept.append((box, conf))
    return kept


# ---------------------------------------------------------------------------
# supervision regions

def _project_segments(corners: np.ndarray, intr: Intrinsics, samples: int = 48) -> np.ndarray:
    edges = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]
    t = np.linspace(0.0, 1.0, samples)[:, None]
    pts = np.concatenate([corners[a] * (1 - t) + corners[b] * t for a, b in edges])
    uv, _, _ = project(pts, intr)
    return uv


def make_supervision_2d(boxes: list[Box3D], points_level: np.ndarray, pixels: np.ndarray,
                        intr: Intrinsics, cam_from_level: RigidTransform,
                        shrink: float = 0.1, enlarge: float = 2.0) -> np.ndarray:
    """Pixel label map: points inside shrunken boxes are positive, points in
    the enlarged shell around a box and the projected box outline are
    negative, and everything else is ignored.  Positive wins conflicts."""
    h, w = intr.height, intr.width
    lab = np.full((h, w), IGNORE, dtype=np.int8)
    if not boxes:
        return lab
    neg = np.zeros((h, w), dtype=bool)
    pos = np.zeros((h, w), dtype=bool)
    for box in boxes:
        core = box.enlarged(-shrink)
        inside_core = core.contains(points_level)
        inside_box = box.contains(points_level)
        shell = box.enlarged(enlarge).contains(points_level) & ~inside_box
        pos[pixels[inside_core, 1], pixels[inside_core, 0]] = True
        neg[pixels[shell, 1], pixels[shell, 0]] = True
        uv = _project_segments(cam_from_level.apply(box.corners()), intr)
        ui, vi = np.round(uv[:, 0]).astype(int), np.round(uv[:, 1]).astype(int)
        ok = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        neg[vi[ok], ui[ok]] = True
    lab[neg] = NEGATIVE
    lab[pos] = POSITIVE
    return lab


N_BINS = 16


def yaw_to_bin(yaw: float) -> int:
    a = (float(yaw) + np.pi) % (2 * np.pi)
    return int(a // (2 * np.pi / N_BINS)) % N_BINS


def bin_to_yaw(b: int) -> float:
    return float(-np.pi + (b + 0.5) * 2 * np.pi / N_BINS)


def gaussian_sigma(box: Box3D, voxel: float) -> float:
    """Target Gaussian width in voxels."""
    return max(1.0, min(box.size[0], box.size[2]) / (4.0 * voxel))


def canonical_yaw(yaw: float) -> float:
    """Box yaw modulo pi, in [-pi/2, pi/2)."""
    return float((yaw + np.pi / 2) % np.pi - np.pi / 2)


def encode_box(box: Box3D, spec: GridSpec):
    """Peak voxel, subvoxel offset and orientation bin for one box."""
    q = (np.asarray(box.center) - spec.origin_arr) / spec.size_arr - 0.5
    peak = np.round(q).astype(int)
    return peak, q - peak, yaw_to_bin(canonical_yaw(box.yaw))


def make_supervision_3d(boxes: list[Box3D], spec: GridSpec, ignore_factor: float = 3.0) -> SupervisionRegions:
    """Objectness, size, offset and orientation targets for a voxel grid.

    Voxels farther than ``ignore_factor * max(l, h, w)`` from every box
    center are excluded from the loss."""
    dims = spec.dims
    heat = np.zeros(dims, dtype=np.float32)
    size = np.zeros(dims + (3,), dtype=np.float32)
    offset = np.zeros(dims + (3,), dtype=np.float32)
    orient = np.full(dims, -1, dtype=np.int64)
    valid = np.zeros(dims, dtype=bool)
    centers = spec.voxel_centers()
    grid_idx = np.indices(dims).transpose(1, 2, 3, 0).astype(float)
    peaks = []
    for box in boxes:
        peak, off, b = encode_box(box, spec)
        r = ignore_factor * float(np.max(box.size))
        valid |= np.linalg.norm(centers - np.asarray(box.center), axis=-1) <= r
        sigma = gaussian_sigma(box, float(min(spec.voxel_size)))
        d2 = np.sum((grid_idx - peak) ** 2, axis=-1)
        heat = np.maximum(heat, np.exp(-d2 / (2 * sigma ** 2)).astype(np.float32))
        if np.all(peak >= 0) and np.all(peak < np.asarray(dims)):
            i, j, k = peak
            heat[i, j, k] = 1.0
            size[i, j, k] = box.size
            offset[i, j, k] = off
            orient[i, j, k] = b
            valid[i, j, k] = True
            peaks.append(tuple(int(v) for v in peak))
    return SupervisionRegions(None, heat, size, offset, orient, valid, peaks)
