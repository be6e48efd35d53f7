"""Short-range association, template tracking, tracklet verification and a
library of verified trajectories used to bridge occlusions."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import linear_sum_assignment

from .flow import FlowField
from .geometry import (Box3D, GridSpec, Intrinsics, RigidTransform, VoxelGrid, iou_bev, project, rot_yaw,
                       transform_box, trilinear_sample)

HANDOFF_SCORE = 0.5


class EmptyLibraryError(ValueError):
    pass


@dataclass
class Tracklet:
    object_id: int
    frames: list[int] = field(default_factory=list)
    boxes: list[Box3D] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    verified: bool = False

    def append(self, t: int, box: Box3D, source: str, score: float = 1.0) -> None:
        if self.frames and t <= self.frames[-1]:
            raise ValueError("tracklet timesteps must increase")
        self.frames.append(int(t))
        self.boxes.append(box)
        self.sources.append(source)
        self.scores.append(float(score))

    def __len__(self) -> int:
        return len(self.frames)

    def box_at(self, t: int) -> Box3D | None:
        try:
            return self.boxes[self.frames.index(t)]
        except ValueError:
            return None

    def records(self, frame_ids: list[str]) -> list[dict]:
        return [{"object_id": self.object_id, "frame_id": frame_ids[t], "box": b.to_dict(), "source": s,
                 "score": float(sc)} for t, b, s, sc in zip(self.frames, self.boxes, self.sources, self.scores)]


# ---------------------------------------------------------------------------
# association

def associate_iou(dets_t: list[Box3D], dets_t1: list[Box3D], gate: float = 0.1) -> list[tuple[int, int]]:
    """Hungarian matching minimizing total (1 - BEV IoU); pairs at or below ``gate`` are dropped."""
    if not dets_t or not dets_t1:
        return []
    iou = np.array([[iou_bev(a, b) for b in dets_t1] for a in dets_t])
    rows, cols = linear_sum_assignment(1.0 - iou)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if iou[r, c] > gate]


# ---------------------------------------------------------------------------
# template correlation

def crop_template(features: np.ndarray, spec: GridSpec, box: Box3D, margin: int = 1):
    """Feature crop around a box, excluding the voxel layer the box rests on
    so the ground does not dominate the match.  Returns (template, voxel
    index of its lower corner)."""
    half = np.ceil(np.array([max(box.size[0], box.size[2]), box.size[1], max(box.size[0], box.size[2])])
                   / 2 / spec.size_arr).astype(int) + margin
    c = np.round(spec.continuous_index(box.center)).astype(int)
    lo = c - half
    hi = c + half + 1
    bottom = box.center - np.array([0.0, box.size[1] / 2, 0.0])
    lo[1] = min(max(lo[1], int(spec.index_of(bottom[None])[0, 1]) + 1), c[1])
    dims = np.asarray(spec.dims)
    lo_c, hi_c = np.clip(lo, 0, dims), np.clip(hi, 0, dims)
    tmpl = np.zeros((features.shape[0], *(hi - lo)), dtype=float)
    src = features[:, lo_c[0]:hi_c[0], lo_c[1]:hi_c[1], lo_c[2]:hi_c[2]]
    o = lo_c - lo
    tmpl[:, o[0]:o[0] + src.shape[1], o[1]:o[1] + src.shape[2], o[2]:o[2] + src.shape[3]] = src
    return tmpl, lo


def correlate_template(template: np.ndarray, scene: np.ndarray, anchor, window,
                       subvoxel: bool = False) -> tuple[np.ndarray | None, float]:
    """Normalized cross-correlation of a (C, a, b, c) template over integer
    offsets ``-window..window`` around ``anchor`` (the scene index where the
    template's lower corner would sit with zero offset).

    Returns (best integer offset, peak score in [-1, 1]); with ``subvoxel``
    the offset is refined by a parabola fit through the neighbouring scores.
    A template without variance gives (None, -1)."""
    t = np.asarray(template, float)
    tz = t - t.mean()
    tn = np.sqrt(np.sum(tz * tz))
    if tn < 1e-12:
        return None, -1.0
    anchor = np.asarray(anchor, int)
    win = np.asarray(window, int)
    shape = np.asarray(t.shape[1:])
    lo = anchor - win
    hi = anchor + win + shape
    pad_lo = np.maximum(0, -lo)
    dims = np.asarray(scene.shape[1:])
    pad_hi = np.maximum(0, hi - dims)
    padded = np.pad(scene, [(0, 0)] + [(int(a), int(b)) for a, b in zip(pad_lo, pad_hi)])
    lo_p = lo + pad_lo
    region = padded[:, lo_p[0]:lo_p[0] + (hi - lo)[0], lo_p[1]:lo_p[1] + (hi - lo)[1], lo_p[2]:lo_p[2] + (hi - lo)[2]]
    views = sliding_window_view(region, tuple(shape), axis=(1, 2, 3))  # (C, ox, oy, oz, a, b, c)
    n = t.size
    s_sum = views.sum(axis=(0, 4, 5, 6))
    s_sq = np.einsum("cxyzabd,cxyzabd->xyz", views, views)
    dot = np.einsum("cxyzabd,cabd->xyz", views, tz)
    var = s_sq - s_sum ** 2 / n
    with np.errstate(divide="ignore", invalid="ignore"):
        ncc = np.where(var > 1e-12, dot / (tn * np.sqrt(np.maximum(var, 1e-300))), -1.0)
    best = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
    score = float(ncc[best])
    off = np.array(best, float)
    for ax in range(3 if subvoxel else 0):
        i = best[ax]
        if 0 < i < ncc.shape[ax] - 1:
            a_idx, c_idx = list(best), list(best)
            a_idx[ax] -= 1
            c_idx[ax] += 1
            fm, f0, fp = ncc[tuple(a_idx)], ncc[best], ncc[tuple(c_idx)]
            den = fm - 2 * f0 + fp
            if den < -1e-12:
                off[ax] += float(np.clip(0.5 * (fm - fp) / den, -0.5, 0.5))
    return off - win, score


# ---------------------------------------------------------------------------
# cost volume

def build_cost_volume(seg_heat: np.ndarray, objectness: np.ndarray, visibility: np.ndarray) -> np.ndarray:
    """Per-voxel traversability: high where the voxel looks like an object or cannot be seen."""
    if not (seg_heat.shape == objectness.shape == visibility.shape):
        raise ValueError("cue grids must share one grid spec")
    return np.clip(seg_heat * objectness + (1.0 - visibility), 0.0, 1.0)


@dataclass
class CostVolume:
    spec: GridSpec
    values: np.ndarray  # (T, X, Y, Z)

    def sample(self, t: int, points) -> np.ndarray:
        if t < 0 or t >= len(self.values):
            return np.ones(len(np.atleast_2d(points)))
        return np.atleast_1d(trilinear_sample(VoxelGrid(self.spec, self.values[t]), np.atleast_2d(points)))

    def path_likelihood(self, t0: int, positions: np.ndarray) -> float:
        """Mean cost-volume value at ``positions[i]`` in frame ``t0 + i``."""
        if len(positions) == 0:
            return 1.0
        vals = [self.sample(t0 + i, p[None])[0] for i, p in enumerate(positions)]
        return float(np.mean(vals))


# ---------------------------------------------------------------------------
# verification

@dataclass(frozen=True)
class VerifyConfig:
    flow_px: float = 2.0
    cost: float = 0.99
    min_length: int = 3
    min_speed: float = 0.15  # m per frame on every step; slower tracklets are label jitter on parked objects


def _box_motion(a: Box3D, b: Box3D) -> RigidTransform:
    R = rot_yaw(b.yaw - a.yaw)
    return RigidTransform(R, b.center - R @ a.center)


def flow_agreement(tr: Tracklet, flows: dict[int, FlowField], clouds: dict[int, tuple[np.ndarray, np.ndarray]],
                   intr: Intrinsics, cam_from_level: dict[int, RigidTransform] | RigidTransform) -> float:
    """Mean pixel distance between the motion the tracklet implies for the
    object's points and the observed flow at those points."""
    errs = []
    for i in range(len(tr) - 1):
        t, t1 = tr.frames[i], tr.frames[i + 1]
        if t1 != t + 1 or t not in flows or t not in clouds:
            continue
        pts, px = clouds[t]
        inside = tr.boxes[i].contains(pts)
        if not inside.any():
            continue
        moved = _box_motion(tr.boxes[i], tr.boxes[i + 1]).apply(pts[inside])
        cam1 = cam_from_level[t1] if isinstance(cam_from_level, dict) else cam_from_level
        uv, _, keep = project(cam1.apply(moved), intr)
        if len(keep) == 0:
            continue
        src = px[inside][keep]
        pred = uv - src
        obs = flows[t].vectors[src[:, 1], src[:, 0]]
        errs.append(np.mean(np.linalg.norm(pred - obs, axis=1)))
    return float(np.mean(errs)) if errs else float("inf")


def trajectory_samples(tr: Tracklet) -> tuple[np.ndarray, np.ndarray]:
    """Frame indices and positions along a tracklet: box centers plus midpoints."""
    ts, ps = [], []
    for i, (t, b) in enumerate(zip(tr.frames, tr.boxes)):
        ts.append(t)
        ps.append(b.center)
        if i + 1 < len(tr) and tr.frames[i + 1] == t + 1:
            ts.append(t)
            ps.append((b.center + tr.boxes[i + 1].center) / 2)
    return np.array(ts), np.array(ps)


def cost_agreement(tr: Tracklet, cost: CostVolume) -> float:
    ts, ps = trajectory_samples(tr)
    return float(np.mean([cost.sample(int(t), p[None])[0] for t, p in zip(ts, ps)]))


def verify_tracklet(tr: Tracklet, flows, clouds, intr: Intrinsics, cam_from_level, cost: CostVolume,
                    cfg: VerifyConfig = VerifyConfig()) -> tuple[bool, float, float]:
    """Accept tracklets that follow the observed flow and only pass through
    object-like or unobserved space.  Returns (accepted, flow error, mean cost)."""
    if len(tr) < cfg.min_length:
        return False, float("inf"), 0.0
    ferr = flow_agreement(tr, flows, clouds, intr, cam_from_level)
    c = cost_agreement(tr, cost)
    return bool(ferr < cfg.flow_px and c >= cfg.cost), ferr, c


# ---------------------------------------------------------------------------
# trajectory library

def _heading_rotation(d: np.ndarray) -> np.ndarray:
    """Rotation about +y taking +x to the horizontal direction of ``d``."""
    return rot_yaw(np.arctan2(d[2], d[0]))


def normalize_trajectory(displacements: np.ndarray) -> np.ndarray:
    """Rotate about the vertical so the first step points along +x, and
    scale so it has unit horizontal length."""
    d = np.asarray(displacements, float).reshape(-1, 3)
    first = d[0]
    speed = float(np.hypot(first[0], first[2]))
    if speed < 1e-9:
        raise ValueError("first displacement has no horizontal motion")
    R = _heading_rotation(first)
    return (d @ R) / speed


def orient_trajectory(entry: np.ndarray, initial_motion: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_trajectory` for the observed first step."""
    m = np.asarray(initial_motion, float)
    speed = float(np.hypot(m[0], m[2]))
    R = _heading_rotation(m)
    return (np.asarray(entry, float) @ R.T) * speed


def total_turning(entry: np.ndarray) -> float:
    """Summed absolute heading change along a trajectory (radians)."""
    d = np.asarray(entry, float)
    moving = np.hypot(d[:, 0], d[:, 2]) > 1e-9
    heading = np.unwrap(np.arctan2(d[moving, 2], d[moving, 0]))
    return float(np.sum(np.abs(np.diff(heading))))


@dataclass
class TrajectoryLibrary:
    """Normalized displacement sequences; lower indices win likelihood ties,
    so :meth:`sorted` puts the straightest entries first."""
    entries: list[np.ndarray] = field(default_factory=list)

    def sorted(self) -> "TrajectoryLibrary":
        order = sorted(range(len(self.entries)), key=lambda i: (round(total_turning(self.entries[i]), 9), i))
        return TrajectoryLibrary([self.entries[i] for i in order])

    def add(self, displacements: np.ndarray) -> None:
        self.entries.append(normalize_trajectory(displacements))

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> str:
        return json.dumps([e.round(9).tolist() for e in self.entries])

    @classmethod
    def from_json(cls, text: str) -> "TrajectoryLibrary":
        return cls([np.asarray(e, float).reshape(-1, 3) for e in json.loads(text)])


def _extend(entry: np.ndarray, n: int) -> np.ndarray:
    """First ``n`` steps, holding the final displacement when the entry is shorter."""
    if len(entry) >= n:
        return entry[:n]
    pad = np.repeat(entry[-1:], n - len(entry), axis=0)
    return np.vstack([entry, pad])


def library_link(initial_motion, last_pose: Box3D, t_last: int, lib: TrajectoryLibrary, cost: CostVolume,
                 horizon: int, tie_tol: float = 1e-2) -> tuple[np.ndarray, float, int]:
    """Best library path continuing an object last seen at ``last_pose`` in frame ``t_last``.

    Every entry is oriented to the observed motion, anchored at the last
    position and scored by the mean cost volume along the next ``horizon``
    frames.  Likelihoods within ``tie_tol`` of the best count as ties and go
    to the lowest entry index.  Returns (positions for frames t_last+1 ..,
    likelihood, entry index; -1 for the zero-velocity fallback)."""
    if len(lib) == 0:
        raise EmptyLibraryError("trajectory library is empty")
    m = np.asarray(initial_motion, float)
    start = np.asarray(last_pose.center, float)
    if np.hypot(m[0], m[2]) < 1e-9:
        path = np.repeat(start[None], horizon, axis=0)
        return path, cost.path_likelihood(t_last + 1, path), -1
    paths, scores = [], []
    for entry in lib.entries:
        steps = orient_trajectory(_extend(entry, horizon), m)
        steps[:, 1] = 0.0  # objects stay on the ground
        paths.append(start + np.cumsum(steps, axis=0))
        scores.append(cost.path_likelihood(t_last + 1, paths[-1]))
    scores = np.array(scores)
    i = int(np.flatnonzero(scores >= scores.max() - tie_tol)[0])
    return paths[i], float(scores[i]), i


# ---------------------------------------------------------------------------
# tracking

@dataclass(frozen=True)
class TrackConfig:
    handoff: float = HANDOFF_SCORE
    search_extent: float = 1.5
    gate: float = 0.1
    anchor_score: float = 0.9
    reacquire_extent: float = 1.0


@dataclass
class FrameEvidence:
    """Per-frame inputs to the tracker."""
    features: np.ndarray  # (C, X, Y, Z)
    detections: list[Box3D]


def _search_window(box: Box3D, spec: GridSpec, extent: float) -> np.ndarray:
    ext = np.array([max(box.size[0], box.size[2]), box.size[1] * 0.5, max(box.size[0], box.size[2])])
    return np.maximum(np.ceil(extent * ext / spec.size_arr).astype(int), 1)


def _moved(box: Box3D, center: np.ndarray) -> Box3D:
    return Box3D(center, box.size.copy(), box.yaw, box.confidence)


def _correlate_at(template, lo0, ref_center, box, spec, ev: FrameEvidence, window):
    """Correlate around the position where the box center would be ``ref_center``."""
    shift_vox = np.round((np.asarray(ref_center) - box.center) / spec.size_arr).astype(int)
    anchor = lo0 + shift_vox
    off, score = correlate_template(template, ev.features, anchor, window, subvoxel=True)
    if off is None:
        return None, -1.0
    center = box.center + (shift_vox + off) * spec.size_arr
    center[1] = box.center[1]
    return center, score


def track(evidence: list[FrameEvidence], init_box: Box3D, spec: GridSpec, lib: TrajectoryLibrary | None = None,
          cost: CostVolume | None = None, object_id: int = 0, cfg: TrackConfig = TrackConfig(),
          ego: list[RigidTransform | None] | None = None) -> Tracklet:
    """Follow one object from its frame-0 box.

    Boxes live in each frame's own level frame; ``ego[t]``, when given, maps
    frame t-1 coordinates into frame t so the tracker state can follow a
    moving camera.

    Each frame correlates the frame-0 template around a constant-velocity
    prediction.  A peak at or above the handoff score keeps the track, snapped
    to an associated detection when one overlaps.  Velocity is measured
    between anchor states (detections and very confident correlations) since
    partially occluded correlations lag behind the object.  When the template
    is lost and a library and cost volume are available, the best library path
    from the last anchor carries the track until the template or a detection
    is found again near the path; without them the track ends."""
    tr = Tracklet(object_id)
    tr.append(0, init_box, "detected", 1.0)
    template, lo0 = crop_template(evidence[0].features, spec, init_box)
    box = anchor = init_box
    anchor_t = 0
    velocity = np.zeros(3)
    path: np.ndarray | None = None  # path[i] is the predicted center in frame anchor_t + 1 + i
    T = len(evidence)
    for t in range(1, T):
        ev = evidence[t]
        if ego is not None and ego[t] is not None:
            E = ego[t]
            anchor, box = transform_box(anchor, E), transform_box(box, E)
            velocity = E.rotation @ velocity
            if path is not None:
                path = E.apply(path)
        if path is None:
            pred = anchor.center + velocity * (t - anchor_t)
            center, score = _correlate_at(template, lo0, pred, init_box, spec, ev,
                                          _search_window(box, spec, cfg.search_extent))
            if center is None or score < cfg.handoff:
                if lib is None or cost is None or len(lib) == 0:
                    break
                path, _, _ = library_link(velocity, anchor, anchor_t, lib, cost, T - anchor_t - 1)
        if path is not None:
            pred = path[t - anchor_t - 1]
            center, score = _correlate_at(template, lo0, pred, init_box, spec, ev,
                                          _search_window(box, spec, cfg.reacquire_extent))
            redetected = (center is not None and score >= cfg.handoff
                          and associate_iou([_moved(box, center)], ev.detections, cfg.gate))
            if not redetected:
                pos = pred.copy()
                pos[1] = box.center[1]
                tr.append(t, _moved(box, pos), "library", max(score, 0.0))
                continue
        cand = _moved(box, center)
        source = "correlated"
        match = associate_iou([cand], ev.detections, cfg.gate)
        if match:
            det = ev.detections[match[0][1]]
            cand = Box3D(det.center.copy(), box.size.copy(), det.yaw, det.confidence)
            source = "detected"
        if source == "detected" or score >= cfg.anchor_score or path is not None:
            velocity = (cand.center - anchor.center) / (t - anchor_t)
            velocity[1] = 0.0
            anchor, anchor_t = cand, t
        box = cand
        path = None
        tr.append(t, box, source, score)
    while tr.sources[-1] == "library":  # a bridge never confirmed by re-acquisition is dropped
        for seq in (tr.frames, tr.boxes, tr.sources, tr.scores):
            seq.pop()
    return tr


def tracklet_displacements(tr: Tracklet) -> np.ndarray:
    """Per-step center displacements over consecutive frames."""
    c = np.array([b.center for b in tr.boxes])
    return np.diff(c, axis=0)
