"""Synthetic RGB-D scenes with exact ground truth.

Colored primitives (cuboids, cylinders, spheres) move over a textured
ground plane and are rendered by analytic ray casting.  Every frame carries
depth, forward and backward flow, the camera pose and per-object boxes.

World frame: ground plane ``y = 0``, arena centered at the origin.  The
camera sits at a fixed height and is pitched down; its "level" frame shares
the camera center but is gravity aligned, and all 3D boxes are reported in
the level frame of their frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .flow import FlowField
from .geometry import (Box3D, GridSpec, Intrinsics, RigidTransform, pixel_rays,
                       rot_pitch, rot_yaw, wrap_angle)

PALETTE = (
    (0.85, 0.15, 0.15), (0.15, 0.65, 0.2), (0.15, 0.3, 0.9), (0.95, 0.8, 0.1),
    (0.7, 0.2, 0.8), (0.1, 0.75, 0.8), (0.95, 0.5, 0.1), (0.9, 0.3, 0.6),
)
DISTRACTOR_COLORS = ((0.55, 0.55, 0.55), (0.75, 0.75, 0.72), (0.4, 0.4, 0.42))
SHAPES = ("cuboid", "cylinder", "sphere")
MOTIONS = ("static", "linear", "turning")
CAMERA_PATHS = ("static", "arc", "forward")

SKY = -2
GROUND = -1


@dataclass
class ObjectSpec:
    """One primitive; ``position`` is its (x, z) ground location at frame 0."""
    shape: str
    size: tuple[float, float, float]  # (l, h, w)
    color: tuple[float, float, float]
    position: tuple[float, float]
    heading: float = 0.0
    motion: str = "static"
    speed: float = 0.0  # units per second
    turn_rate: float = 0.0  # radians per second
    moving_type: bool = True


@dataclass
class SceneSpec:
    n_objects: int = 5
    n_frames: int = 10
    seed: int = 0
    footprint_range: tuple[float, float] = (0.7, 1.2)
    height_range: tuple[float, float] = (0.6, 1.0)
    palette: tuple = PALETTE
    shapes: tuple = ("cuboid", "cylinder")
    stationary_fraction: float = 0.0
    turning_fraction: float = 0.3
    speed_range: tuple[float, float] = (3.5, 6.0)
    turn_range: tuple[float, float] = (1.5, 3.5)
    fps: float = 10.0
    camera: str = "static"
    arc_rate: float = 0.35  # radians per second
    forward_speed: float = 1.5  # units per second
    n_distractors: int = 0
    arena: float = 3.0
    image_size: tuple[int, int] = (128, 192)  # (H, W)
    focal: float = 120.0
    camera_height: float = 3.0
    camera_pitch: float = math.radians(25.0)
    camera_distance: float = 6.5
    objects: list[ObjectSpec] | None = None  # explicit layout overrides random sampling

    def validate(self) -> None:
        n = len(self.objects) if self.objects is not None else self.n_objects + self.n_distractors
        if self.objects is None and not (1 <= self.n_objects <= 10):
            raise ValueError("n_objects must be between 1 and 10")
        if n < 1:
            raise ValueError("scene needs at least one object")
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if self.camera not in CAMERA_PATHS:
            raise ValueError(f"unknown camera path {self.camera!r}")
        if not (0.0 <= self.stationary_fraction <= 1.0):
            raise ValueError("stationary_fraction must be in [0, 1]")
        lo, hi = self.footprint_range
        if not (0 < lo <= hi):
            raise ValueError("invalid footprint range")
        if any(s not in SHAPES for s in self.shapes):
            raise ValueError("unknown shape in spec")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def intrinsics(self) -> Intrinsics:
        h, w = self.image_size
        return Intrinsics(self.focal, self.focal, w / 2.0, h / 2.0, w, h)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "objects"}
        if self.objects is not None:
            d["objects"] = [o.__dict__ for o in self.objects]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        objs = d.pop("objects", None)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec fields: {sorted(unknown)}")
        for k in ("footprint_range", "height_range", "speed_range", "turn_range", "image_size"):
            if k in d:
                d[k] = tuple(d[k])
        if "palette" in d:
            d["palette"] = tuple(tuple(c) for c in d["palette"])
        if "shapes" in d:
            d["shapes"] = tuple(d["shapes"])
        spec = cls(**d)
        if objs is not None:
            spec.objects = [ObjectSpec(**{**o, "size": tuple(o["size"]), "color": tuple(o["color"]),
                                          "position": tuple(o["position"])}) for o in objs]
        return spec


@dataclass
class GTObject:
    object_id: int
    box: Box3D  # level frame of its frame
    moving_type: bool
    is_moving: bool
    visible_pixels: int
    shape: str = "cuboid"

    def to_dict(self) -> dict:
        return {"object_id": self.object_id, "box": self.box.to_dict(), "moving_type": self.moving_type,
                "is_moving": self.is_moving, "visible_pixels": self.visible_pixels, "shape": self.shape}

    @classmethod
    def from_dict(cls, d: dict) -> "GTObject":
        return cls(int(d["object_id"]), Box3D.from_dict(d["box"]), bool(d["moving_type"]),
                   bool(d["is_moving"]), int(d["visible_pixels"]), d.get("shape", "cuboid"))


@dataclass
class Frame:
    index: int
    rgb: np.ndarray
    depth: np.ndarray  # (H, W) meters along camera z, 0 where invalid
    intrinsics: Intrinsics
    gt_pose: RigidTransform  # world -> camera
    gt_objects: list[GTObject]
    gt_flow: FlowField | None = None  # to the next frame
    gt_flow_bw: FlowField | None = None  # from the next frame back to this one
    instance: np.ndarray | None = None  # (H, W) object id, GROUND or SKY

    @property
    def depth_valid(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


@dataclass
class Sequence:
    name: str
    frames: list[Frame]
    intrinsics: Intrinsics
    camera_pitch: float
    spec: SceneSpec | None = None

    @property
    def cam_from_level(self) -> RigidTransform:
        return RigidTransform(rot_pitch(self.camera_pitch), np.zeros(3))

    @property
    def level_from_cam(self) -> RigidTransform:
        return self.cam_from_level.inverse()

    def __len__(self) -> int:
        return len(self.frames)


def default_grid(spec: SceneSpec | None = None, voxel: float = 0.25) -> GridSpec:
    """Level-frame grid spanning 8 x 4 x 8 units in front of the camera."""
    h = spec.camera_height if spec is not None else 3.0
    dims = (int(round(8 / voxel)), int(round(4 / voxel)), int(round(8 / voxel)))
    return GridSpec((-4.0, -h - 0.25, 2.5), (voxel, voxel, voxel), dims)


# ---------------------------------------------------------------------------
# scene sampling and motion

def _sample_objects(spec: SceneSpec, rng: np.random.Generator) -> list[ObjectSpec]:
    objects: list[ObjectSpec] = []
    n_static = int(round(spec.stationary_fraction * spec.n_objects))
    static_ids = set(rng.permutation(spec.n_objects)[:n_static].tolist())
    placed: list[tuple[float, float, float]] = []

    def place(radius: float) -> tuple[float, float]:
        for _ in range(200):
            x, z = rng.uniform(-spec.arena, spec.arena, size=2)
            if all(math.hypot(x - px, z - pz) > radius + pr + 0.3 for px, pz, pr in placed):
                return float(x), float(z)
        return float(x), float(z)

    for i in range(spec.n_objects):
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        lo, hi = spec.footprint_range
        if shape == "cuboid":
            l, w = sorted(rng.uniform(lo, hi, size=2))[::-1]
            h = rng.uniform(*spec.height_range)
        elif shape == "cylinder":
            l = w = rng.uniform(lo, hi)
            h = rng.uniform(*spec.height_range)
        else:
            l = w = h = rng.uniform(lo, min(hi, spec.height_range[1] * 1.1))
        color = spec.palette[i % len(spec.palette)]
        radius = 0.5 * math.hypot(l, w)
        x, z = place(radius)
        placed.append((x, z, radius))
        heading = float(rng.uniform(-math.pi, math.pi))
        if i in static_ids:
            motion, speed, turn = "static", 0.0, 0.0
        else:
            motion = "turning" if rng.uniform() < spec.turning_fraction else "linear"
            speed = float(rng.uniform(*spec.speed_range))
            turn = float(rng.uniform(*spec.turn_range) * rng.choice([-1.0, 1.0])) if motion == "turning" else 0.0
        objects.append(ObjectSpec(shape, (float(l), float(h), float(w)), tuple(color), (x, z),
                                  heading, motion, speed, turn, True))
    for j in range(spec.n_distractors):
        fp = rng.uniform(0.4, 0.8)
        h = rng.uniform(1.4, 2.0)
        radius = 0.5 * math.hypot(fp, fp)
        x, z = place(radius)
        placed.append((x, z, radius))
        color = DISTRACTOR_COLORS[j % len(DISTRACTOR_COLORS)]
        objects.append(ObjectSpec("cuboid", (float(fp), float(h), float(fp)), color, (x, z),
                                  float(rng.uniform(-math.pi, math.pi)), "static", 0.0, 0.0, False))
    return objects


def object_states(obj: ObjectSpec, n_frames: int, fps: float, arena: float) -> np.ndarray:
    """Per-frame (x, z, yaw) with reflection at the arena walls."""
    out = np.zeros((n_frames, 3))
    x, z = obj.position
    heading = obj.heading
    step = obj.speed / fps
    turn = obj.turn_rate / fps
    bound = arena + 0.5
    for k in range(n_frames):
        out[k] = (x, z, heading)
        if obj.motion == "static":
            continue
        x += step * math.cos(heading)
        z += step * math.sin(heading)
        if abs(x) > bound:
            x = math.copysign(2 * bound - abs(x), x)
            heading = math.pi - heading
        if abs(z) > bound:
            z = math.copysign(2 * bound - abs(z), z)
            heading = -heading
        if obj.motion == "turning":
            heading += turn
        heading = float(wrap_angle(heading))
    return out


def camera_path(spec: SceneSpec) -> list[tuple[np.ndarray, float]]:
    """Per-frame (camera center, camera yaw) in the world frame."""
    out = []
    for k in range(spec.n_frames):
        t = k / spec.fps
        if spec.camera == "arc":
            phi = math.pi / 2 + spec.arc_rate * t
            c = np.array([-spec.camera_distance * math.cos(phi), spec.camera_height,
                          -spec.camera_distance * math.sin(phi)])
            out.append((c, phi - math.pi / 2))
        elif spec.camera == "forward":
            out.append((np.array([0.0, spec.camera_height, -spec.camera_distance + spec.forward_speed * t]), 0.0))
        else:
            out.append((np.array([0.0, spec.camera_height, -spec.camera_distance]), 0.0))
    return out


def level_from_world(center: np.ndarray, yaw: float) -> RigidTransform:
    r = rot_yaw(yaw).T
    return RigidTransform(r, -r @ center)


def camera_pose(center: np.ndarray, yaw: float, pitch: float) -> RigidTransform:
    lw = level_from_world(center, yaw)
    return RigidTransform(rot_pitch(pitch), np.zeros(3)).compose(lw)


# ---------------------------------------------------------------------------
# ray casting

def _texture_noise(rng: np.random.Generator, n: int = 96) -> np.ndarray:
    return rng.uniform(0.75, 1.25, size=(n, n))


def _sample_noise(tex: np.ndarray, x: np.ndarray, z: np.ndarray, scale: float) -> np.ndarray:
    n = tex.shape[0]
    gx = (x / scale) % n
    gz = (z / scale) % n
    x0 = np.floor(gx).astype(int)
    z0 = np.floor(gz).astype(int)
    fx, fz = gx - x0, gz - z0
    x0, z0 = x0 % n, z0 % n
    x1, z1 = (x0 + 1) % n, (z0 + 1) % n
    return (tex[x0, z0] * (1 - fx) * (1 - fz) + tex[x1, z0] * fx * (1 - fz)
            + tex[x0, z1] * (1 - fx) * fz + tex[x1, z1] * fx * fz)


def _intersect(obj: ObjectSpec, state, origin: np.ndarray, dirs: np.ndarray):
    """Ray parameters and world normals of hits with one primitive (inf where missed)."""
    l, h, w = obj.size
    center = np.array([state[0], h / 2, state[1]])
    R = rot_yaw(state[2])
    o = (origin - center) @ R
    d = dirs @ R
    n = len(d)
    t = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        if obj.shape == "cuboid":
            half = np.array([l / 2, h / 2, w / 2])
            t1 = (-half - o) / d
            t2 = (half - o) / d
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            tmin = np.where(np.isnan(tmin), -np.inf, tmin)
            tmax = np.where(np.isnan(tmax), np.inf, tmax)
            tnear = tmin.max(axis=1)
            tfar = tmax.min(axis=1)
            hit = (tnear <= tfar) & (tnear > 1e-6)
            t[hit] = tnear[hit]
            axis = np.argmax(tmin, axis=1)
            local_n = np.zeros((n, 3))
            local_n[np.arange(n), axis] = -np.sign(d[np.arange(n), axis])
            normal = local_n @ R.T
        elif obj.shape == "cylinder":
            r = l / 2
            a = d[:, 0] ** 2 + d[:, 2] ** 2
            b = 2 * (o[0] * d[:, 0] + o[2] * d[:, 2])
            c = o[0] ** 2 + o[2] ** 2 - r * r
            disc = b * b - 4 * a * c
            sq = np.sqrt(np.maximum(disc, 0))
            ts = (-b - sq) / (2 * a)
            ys = o[1] + ts * d[:, 1]
            side = (disc >= 0) & (a > 1e-12) & (ts > 1e-6) & (np.abs(ys) <= h / 2)
            t_side = np.where(side, ts, np.inf)
            tc = np.full(n, np.inf)
            for ycap in (h / 2, -h / 2):
                tt = (ycap - o[1]) / d[:, 1]
                px = o[0] + tt * d[:, 0]
                pz = o[2] + tt * d[:, 2]
                ok = (tt > 1e-6) & (px * px + pz * pz <= r * r)
                tc = np.where(ok & (tt < tc), tt, tc)
            t = np.minimum(t_side, tc)
            p = o + t[:, None] * d
            use_side = t_side <= tc
            local_n = np.where(use_side[:, None], np.column_stack([p[:, 0], np.zeros(n), p[:, 2]]) / r,
                               np.column_stack([np.zeros(n), np.sign(p[:, 1]), np.zeros(n)]))
            normal = local_n @ R.T
        else:
            r = l / 2
            b = 2 * (d @ o)
            a = np.einsum("ij,ij->i", d, d)
            c = o @ o - r * r
            disc = b * b - 4 * a * c
            ts = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
            hit = (disc >= 0) & (ts > 1e-6)
            t = np.where(hit, ts, np.inf)
            p = o + np.where(np.isfinite(t), t, 0)[:, None] * d
            normal = (p / r) @ R.T
    t = np.where(np.isfinite(t), t, np.inf)
    return t, normal


def _object_texture(obj_index: int, seed: int):
    rng = np.random.default_rng([seed, 7919, obj_index])
    freqs = rng.uniform(4.0, 9.0, size=(3, 3))
    phases = rng.uniform(0, 2 * np.pi, size=3)

    def tex(local):
        s = sum(np.sin(local @ freqs[i] + phases[i]) for i in range(3)) / 3.0
        return 1.0 + 0.18 * s
    return tex


LIGHT = np.array([0.4, 1.0, -0.3]) / np.linalg.norm([0.4, 1.0, -0.3])


def render(objects: list[ObjectSpec], states: list, pose: RigidTransform, intr: Intrinsics,
           ground_tex: np.ndarray, seed: int, max_depth: float = 40.0):
    """Ray-cast one frame.  Returns (rgb uint8, depth, instance, world points)."""
    h, w = intr.height, intr.width
    vs, us = np.mgrid[0:h, 0:w]
    dirs_c = pixel_rays(intr, us.ravel(), vs.ravel())
    R = pose.rotation
    origin = -R.T @ pose.translation
    dirs = dirs_c @ R  # world-frame directions, parameter t equals camera depth
    n = len(dirs)
    best_t = np.full(n, np.inf)
    inst = np.full(n, SKY, dtype=np.int32)
    normals = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dirs[:, 1] < -1e-9, -origin[1] / dirs[:, 1], np.inf)
    hit = tg < best_t
    best_t[hit] = tg[hit]
    inst[hit] = GROUND
    normals[hit] = (0.0, 1.0, 0.0)
    for i, (obj, st) in enumerate(zip(objects, states)):
        t, nrm = _intersect(obj, st, origin, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        inst[closer] = i
        normals[closer] = nrm[closer]
    far = best_t > max_depth
    inst[far] = SKY
    best_t[far] = np.inf
    pts = origin + np.where(np.isfinite(best_t), best_t, 0)[:, None] * dirs

    shade = 0.55 + 0.45 * np.clip(normals @ LIGHT, 0, 1)
    color = np.tile(np.array([0.7, 0.8, 0.95]), (n, 1))
    g = inst == GROUND
    if np.any(g):
        x, z = pts[g, 0], pts[g, 2]
        checker = (np.floor(x / 0.5) + np.floor(z / 0.5)) % 2
        base = np.where(checker[:, None] > 0, np.array([0.52, 0.5, 0.46]), np.array([0.38, 0.37, 0.35]))
        noise = _sample_noise(ground_tex, x, z, 0.125)
        color[g] = base * noise[:, None] * shade[g, None]
    for i, (obj, st) in enumerate(zip(objects, states)):
        m = inst == i
        if not np.any(m):
            continue
        center = np.array([st[0], obj.size[1] / 2, st[1]])
        local = (pts[m] - center) @ rot_yaw(st[2])
        tex = _object_texture(i, seed)(local)
        color[m] = np.asarray(obj.color) * (tex * shade[m])[:, None]
    rgb = np.clip(np.round(color * 255), 0, 255).astype(np.uint8).reshape(h, w, 3)
    depth = np.where(np.isfinite(best_t), best_t, 0.0).reshape(h, w)
    return rgb, depth, inst.reshape(h, w), pts.reshape(h, w, 3)


def _move_points(points, inst, objects, states_a, states_b):
    """Carry world points attached to objects from one frame's state to another's."""
    out = points.copy()
    for i, obj in enumerate(objects):
        m = inst == i
        if not np.any(m):
            continue
        a, b = states_a[i], states_b[i]
        ca = np.array([a[0], obj.size[1] / 2, a[1]])
        cb = np.array([b[0], obj.size[1] / 2, b[1]])
        out[m] = (points[m] - ca) @ rot_yaw(b[2] - a[2]).T + cb
    return out


def _flow_between(points, inst, objects, states_a, states_b, pose_a, pose_b, intr):
    """Displacement of each pixel's surface point, measured as the difference of
    two projections so that an unchanged point has exactly zero flow."""
    h, w = intr.height, intr.width
    pts = points.reshape(-1, 3)
    moved = _move_points(pts, inst.ravel(), objects, states_a, states_b)
    cam_a = pose_a.apply(pts)
    cam = pose_b.apply(moved)
    flow = np.zeros((h * w, 2))
    valid = (inst.ravel() != SKY) & (cam[:, 2] > 1e-6) & (cam_a[:, 2] > 1e-6)
    with np.errstate(divide="ignore", invalid="ignore"):
        du = intr.fx * (cam[:, 0] / cam[:, 2] - cam_a[:, 0] / cam_a[:, 2])
        dv = intr.fy * (cam[:, 1] / cam[:, 2] - cam_a[:, 1] / cam_a[:, 2])
    flow[valid, 0] = du[valid]
    flow[valid, 1] = dv[valid]
    return flow.reshape(h, w, 2), valid.reshape(h, w)


def generate(spec: SceneSpec, name: str = "seq000") -> Sequence:
    """Render a full sequence for ``spec``; identical specs give identical output."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    objects = list(spec.objects) if spec.objects is not None else _sample_objects(spec, rng)
    ground_tex = _texture_noise(np.random.default_rng([spec.seed, 104729]))
    intr = spec.intrinsics()
    T = spec.n_frames
    states = [object_states(o, T, spec.fps, spec.arena) for o in objects]
    cams = camera_path(spec)
    poses = [camera_pose(c, yaw, spec.camera_pitch) for c, yaw in cams]

    rendered = [render(objects, [s[k] for s in states], poses[k], intr, ground_tex, spec.seed)
                for k in range(T)]
    frames = []
    for k in range(T):
        rgb, depth, inst, pts = rendered[k]
        c, cyaw = cams[k]
        lw = level_from_world(c, cyaw)
        gts = []
        for i, obj in enumerate(objects):
            st = states[i][k]
            nxt = states[i][k + 1] if k + 1 < T else None
            prv = states[i][k - 1] if k > 0 else None
            ref = nxt if nxt is not None else prv
            moving = ref is not None and (abs(ref[0] - st[0]) + abs(ref[1] - st[1]) > 1e-9)
            center_w = np.array([st[0], obj.size[1] / 2, st[1]])
            box = Box3D(lw.apply(center_w), np.array(obj.size), float(wrap_angle(st[2] - cyaw)))
            gts.append(GTObject(i, box, obj.moving_type, bool(moving), int(np.sum(inst == i)), obj.shape))
        f_fw = f_bw = None
        if k + 1 < T:
            sa = [s[k] for s in states]
            sb = [s[k + 1] for s in states]
            fw, fw_ok = _flow_between(pts, inst, objects, sa, sb, poses[k], poses[k + 1], intr)
            pts_b, inst_b = rendered[k + 1][3], rendered[k + 1][2]
            bw, bw_ok = _flow_between(pts_b, inst_b, objects, sb, sa, poses[k + 1], poses[k], intr)
            f_fw = FlowField(fw, "forward", (k, k + 1), fw_ok)
            f_bw = FlowField(bw, "backward", (k + 1, k), bw_ok)
        frames.append(Frame(k, rgb, depth, intr, poses[k], gts, f_fw, f_bw, inst))
    return Sequence(name, frames, intr, spec.camera_pitch, spec)


def gt_egomotion(seq: Sequence, k: int) -> RigidTransform:
    """Level-frame rigid motion carrying frame k coordinates into frame k+1."""
    lc = seq.level_from_cam
    a = lc.compose(seq.frames[k].gt_pose)
    b = lc.compose(seq.frames[k + 1].gt_pose)
    return b.compose(a.inverse())


def corrupt_flow(flow: FlowField, sigma: float = 0.0, rho: float = 0.0,
                 rng: np.random.Generator | int | None = None):
    """Add iid Gaussian noise and replace a fraction of vectors with uniform
    garbage in [-20, 20] px.  Returns (corrupted field, corrupted mask)."""
    rng = np.random.default_rng(rng)
    vec = flow.vectors.copy()
    h, w = flow.shape
    if sigma > 0:
        vec = vec + rng.normal(0.0, sigma, size=vec.shape)
    n_bad = int(math.floor(rho * h * w))
    mask = np.zeros(h * w, dtype=bool)
    if n_bad > 0:
        idx = rng.choice(h * w, size=n_bad, replace=False)
        mask[idx] = True
        flat = vec.reshape(-1, 2)
        flat[idx] = rng.uniform(-20.0, 20.0, size=(n_bad, 2))
    return replace(flow, vectors=vec, valid=flow.valid.copy()), mask.reshape(h, w)


def reference_suite(n_sequences: int = 10, n_frames: int = 10, seed: int = 1234,
                    stationary_fraction: float = 0.5, **overrides) -> list[SceneSpec]:
    """Seed-pinned scene specs used for end-to-end checks."""
    rng = np.random.default_rng(seed)
    cams = ["static", "arc", "forward"]
    specs = []
    for i in range(n_sequences):
        kw = dict(n_objects=int(rng.integers(4, 7)), n_frames=n_frames, seed=int(rng.integers(1 << 30)),
                  stationary_fraction=stationary_fraction, camera=cams[i % 3],
                  n_distractors=int(rng.integers(1, 3)))
        kw.update(overrides)
        specs.append(SceneSpec(**kw))
    return specs


def occlusion_suite(n_sequences: int = 20, n_frames: int = 16, seed: int = 77) -> list[SceneSpec]:
    """Static-camera scenes where each mover crosses behind a wall for several frames.

    A gray wall stands between the camera and a lane of movers; a stationary
    bystander sits in front of the wall.  Some movers turn while hidden."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_sequences):
        wall_z = float(rng.uniform(-1.8, -1.4))
        wall = ObjectSpec("cuboid", (2.5, float(rng.uniform(1.6, 2.0)), 0.2), DISTRACTOR_COLORS[0],
                          (0.0, wall_z), 0.0, "static", 0.0, 0.0, False)
        objs = [wall]
        n_movers = int(rng.integers(1, 3))
        for j in range(n_movers):
            direction = 1.0 if (i + j) % 2 == 0 else -1.0
            lane = wall_z + 1.3 + 0.9 * j
            fp = rng.uniform(0.7, 1.0, size=2)
            l, w = float(max(fp)), float(min(fp))
            h = float(rng.uniform(0.6, 0.9))
            turning = rng.uniform() < 0.3
            objs.append(ObjectSpec("cuboid", (l, h, w), PALETTE[(i + j) % len(PALETTE)],
                                   (-2.8 * direction, lane), 0.0 if direction > 0 else math.pi,
                                   "turning" if turning else "linear", float(rng.uniform(3.8, 4.2)),
                                   float(rng.uniform(0.2, 0.5)) * (-direction) if turning else 0.0, True))
        objs.append(ObjectSpec("cylinder", (0.8, 0.7, 0.8), PALETTE[(i + 3) % len(PALETTE)],
                               (float(rng.uniform(-2.5, 2.5)), wall_z - 1.6), 0.0, "static", 0.0, 0.0, True))
        specs.append(SceneSpec(n_frames=n_frames, seed=int(rng.integers(1 << 30)), camera="static",
                               objects=objs))
    return specs
