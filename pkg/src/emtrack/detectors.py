"""Trainable appearance models: a per-pixel objectness segmenter and a voxel
box detector, both small convolutional heads over the fixed feature stacks.

Losses are computed in numpy together with their analytic gradient with
respect to the head outputs; the gradient is handed to torch autograd for
the parameter update."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .discovery import IGNORE, N_BINS, POSITIVE, bin_to_yaw, make_supervision_2d, make_supervision_3d
from .features import N_FEAT_2D, N_FEAT_3D, features_2d, features_3d, point_colors
from .geometry import Box3D, GridSpec, Intrinsics, RigidTransform, iou_bev, rot_yaw

DET_CHANNELS = 1 + 3 + 3 + N_BINS
CHECKPOINT_MAGIC = b"TCRM"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# models

class SegHead(torch.nn.Module):
    def __init__(self, hidden: int = 16):
        super().__init__()
        self.conv1 = torch.nn.Conv2d(N_FEAT_2D, hidden, 3, padding=1)
        self.conv2 = torch.nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self, x):
        return self.conv2(torch.relu(self.conv1(x)))


class DetHead(torch.nn.Module):
    def __init__(self, hidden: int = 16):
        super().__init__()
        self.conv1 = torch.nn.Conv3d(N_FEAT_3D, hidden, 3, padding=1)
        self.conv2 = torch.nn.Conv3d(hidden, DET_CHANNELS, 3, padding=1)

    def forward(self, x):
        return self.conv2(torch.relu(self.conv1(x)))


def make_seg_model(seed: int = 0) -> SegHead:
    torch.manual_seed(seed)
    return SegHead()


def make_det_model(seed: int = 0) -> DetHead:
    torch.manual_seed(seed)
    model = DetHead()
    with torch.no_grad():
        model.conv2.bias[0] = -2.19  # initial objectness near 0.1
        model.conv2.bias[1:4] = 0.8  # typical object size
    return model


def n_parameters(model: torch.nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, u32 header length, JSON layout, <f4 data

def save_checkpoint(path, model: torch.nn.Module, kind: str, meta: dict | None = None) -> None:
    state = model.state_dict()
    layout = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = json.dumps({"kind": kind, "layout": layout, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for v in state.values():
            f.write(np.ascontiguousarray(v.detach().cpu().numpy(), dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[torch.nn.Module, str, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC or len(data) < 12:
        raise CheckpointError(f"{path}: bad magic")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(data[12:12 + hlen])
        model = {"seg": SegHead, "det": DetHead}[header["kind"]]()
        layout = header["layout"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    counts = [int(np.prod(e["shape"])) for e in layout]
    pos = 12 + hlen
    if pos + 4 * sum(counts) != len(data):
        raise CheckpointError(f"{path}: size does not match layout")
    state = {}
    for entry, n in zip(layout, counts):
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * n
    model.load_state_dict(state)
    return model, header["kind"], header.get("meta", {})


# ---------------------------------------------------------------------------
# losses

def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def seg_loss(logits, labels, mask):
    """Balanced logistic loss over labelled pixels.

    ``labels`` holds +1 / -1, ``mask`` selects supervised pixels.  Positive
    and negative terms are each averaged over their own count, so both sides
    carry equal weight.  Returns (loss, d loss / d logits)."""
    s = np.asarray(logits, float)
    y = np.asarray(labels, float)
    m = np.asarray(mask, float)
    pos = m * (y > 0)
    neg = m * (y < 0)
    n_pos, n_neg = pos.sum(), neg.sum()
    term = np.logaddexp(0.0, -y * s)
    dterm = -y * _sigmoid(-y * s)
    wts = np.zeros_like(s)
    if n_pos > 0:
        wts = wts + pos / n_pos
    if n_neg > 0:
        wts = wts + neg / n_neg
    return float(np.sum(wts * term)), wts * dterm


@dataclass(frozen=True)
class DetLossWeights:
    objectness: float = 1.0
    size: float = 0.1
    offset: float = 1.0
    orientation: float = 0.5
    alpha: float = 2.0
    beta: float = 4.0


def det_loss(output, heat, size, offset, orient, valid, w: DetLossWeights = DetLossWeights()):
    """Penalty-reduced focal loss on objectness plus L1 size/offset and
    cross-entropy orientation at peak voxels, normalized by the peak count.

    ``output`` is (B, 23, X, Y, Z) or (23, X, Y, Z); targets match without the
    channel axis (size/offset carry a trailing 3).  Returns (loss, gradient)."""
    out = np.asarray(output, float)
    single = out.ndim == 4
    if single:
        out = out[None]
        heat, size, offset, orient, valid = (np.asarray(a)[None] for a in (heat, size, offset, orient, valid))
    heat = np.asarray(heat, float)
    valid = np.asarray(valid, bool)
    orient = np.asarray(orient)
    peak = (orient >= 0) & valid
    n_pos = max(1.0, float(peak.sum()))
    grad = np.zeros_like(out)

    x = out[:, 0]
    logp, log1mp = _log_sigmoid(x), _log_sigmoid(-x)
    p = np.exp(logp)
    a, b = w.alpha, w.beta
    pos_loss = (1 - p) ** a * (-logp)
    pos_grad = (1 - p) ** a * (a * p * logp - (1 - p))
    negw = (1 - heat) ** b
    neg_loss = negw * p ** a * (-log1mp)
    neg_grad = negw * p ** a * (p - a * (1 - p) * log1mp)
    negm = valid & ~peak
    l_obj = (np.sum(pos_loss[peak]) + np.sum(neg_loss[negm])) / n_pos
    grad[:, 0] = (np.where(peak, pos_grad, 0.0) + np.where(negm, neg_grad, 0.0)) * (w.objectness / n_pos)

    bi, xi, yi, zi = np.nonzero(peak)
    loss = w.objectness * l_obj
    if len(bi):
        s_pred = out[bi, 1:4, xi, yi, zi]
        s_tgt = np.asarray(size, float)[bi, xi, yi, zi]
        o_pred = out[bi, 4:7, xi, yi, zi]
        o_tgt = np.asarray(offset, float)[bi, xi, yi, zi]
        loss += w.size * np.abs(s_pred - s_tgt).sum() / n_pos
        loss += w.offset * np.abs(o_pred - o_tgt).sum() / n_pos
        grad[bi, 1:4, xi, yi, zi] = w.size * np.sign(s_pred - s_tgt) / n_pos
        grad[bi, 4:7, xi, yi, zi] = w.offset * np.sign(o_pred - o_tgt) / n_pos
        logits = out[bi, 7:, xi, yi, zi]
        tgt = orient[bi, xi, yi, zi].astype(int)
        lse = np.logaddexp.reduce(logits, axis=1)
        loss += w.orientation * np.sum(lse - logits[np.arange(len(tgt)), tgt]) / n_pos
        soft = np.exp(logits - lse[:, None])
        soft[np.arange(len(tgt)), tgt] -= 1.0
        grad[bi, 7:, xi, yi, zi] = w.orientation * soft / n_pos
    if single:
        grad = grad[0]
    return float(loss), grad


# ---------------------------------------------------------------------------
# training data and augmentation

@dataclass
class TrainSample:
    """One labelled frame: image, level-frame cloud with source pixels, and boxes."""
    rgb: np.ndarray
    points: np.ndarray
    pixels: np.ndarray
    boxes: list[Box3D]
    intrinsics: Intrinsics
    cam_from_level: RigidTransform
    ground_y: float


@dataclass(frozen=True)
class AugmentationSpec:
    enabled: bool = True
    brightness: tuple[float, float] = (0.75, 1.25)
    channel_gain: tuple[float, float] = (0.85, 1.15)
    translate_px: float = 12.0
    scale: tuple[float, float] = (0.9, 1.1)
    occlusions: int = 2
    occlusion_size: tuple[int, int] = (8, 28)
    voxel_dropout: float = 0.1
    translate_3d: float = 1.0
    yaw_range: float = np.pi

    def __post_init__(self):
        if self.brightness[0] > self.brightness[1] or self.scale[0] > self.scale[1]:
            raise ValueError("invalid augmentation range")
        if not 0.0 <= self.voxel_dropout < 1.0:
            raise ValueError("voxel dropout must be in [0, 1)")


def _occlude(sample: TrainSample, rng: np.random.Generator, aug: AugmentationSpec):
    """Erase random rectangles near labelled objects, in the image and in the cloud."""
    h, w = sample.rgb.shape[:2]
    rgb = sample.rgb.copy()
    keep = np.ones(len(sample.points), dtype=bool)
    rects = []
    for _ in range(int(rng.integers(0, aug.occlusions + 1))):
        if sample.boxes:
            box = sample.boxes[int(rng.integers(len(sample.boxes)))]
            c = sample.cam_from_level.apply(box.center[None])[0]
            if c[2] <= 0:
                continue
            u0 = sample.intrinsics.fx * c[0] / c[2] + sample.intrinsics.cx
            v0 = sample.intrinsics.fy * c[1] / c[2] + sample.intrinsics.cy
        else:
            u0, v0 = rng.uniform(0, w), rng.uniform(0, h)
        rw, rh = rng.integers(aug.occlusion_size[0], aug.occlusion_size[1] + 1, size=2)
        x0 = int(np.clip(u0 + rng.uniform(-1, 1) * rw - rw / 2, 0, w - 1))
        y0 = int(np.clip(v0 + rng.uniform(-1, 1) * rh - rh / 2, 0, h - 1))
        x1, y1 = min(w, x0 + int(rw)), min(h, y0 + int(rh))
        rgb[y0:y1, x0:x1] = rng.integers(0, 256, size=3)
        px = sample.pixels
        keep &= ~((px[:, 0] >= x0) & (px[:, 0] < x1) & (px[:, 1] >= y0) & (px[:, 1] < y1))
        rects.append((x0, y0, x1, y1))
    return rgb, keep, rects


def seg_example(sample: TrainSample, aug: AugmentationSpec, rng: np.random.Generator):
    """Augmented (features, labels, mask) for the segmenter."""
    rgb = sample.rgb
    labels = make_supervision_2d(sample.boxes, sample.points, sample.pixels,
                                 sample.intrinsics, sample.cam_from_level)
    if aug.enabled:
        rgb, _, rects = _occlude(sample, rng, aug)
        labels = labels.copy()
        for x0, y0, x1, y1 in rects:
            labels[y0:y1, x0:x1] = IGNORE
        img = rgb.astype(float) * rng.uniform(*aug.brightness) * rng.uniform(*aug.channel_gain, size=3)
        img = np.clip(img, 0, 255)
        sc = rng.uniform(*aug.scale)
        shift = rng.uniform(-aug.translate_px, aug.translate_px, size=2)
        h, w = labels.shape
        ctr = np.array([h / 2, w / 2])
        offset = ctr - (ctr + shift[::-1]) / sc
        mat = np.eye(2) / sc
        img = np.stack([ndimage.affine_transform(img[..., c], mat, offset, order=1, mode="nearest")
                        for c in range(3)], axis=-1)
        labels = ndimage.affine_transform(labels, mat, offset, order=0, mode="constant", cval=IGNORE)
        rgb = img
    feats = features_2d(rgb)
    mask = labels != IGNORE
    return feats, np.where(labels == POSITIVE, 1.0, -1.0), mask


def det_example(sample: TrainSample, spec: GridSpec, aug: AugmentationSpec, rng: np.random.Generator):
    """Augmented (features, targets) for the voxel detector."""
    pts, boxes = sample.points, sample.boxes
    colors = point_colors(sample.rgb, sample.pixels)
    if aug.enabled:
        _, keep, _ = _occlude(sample, rng, aug)
        pts, colors = pts[keep], colors[keep]
        pivot = spec.origin_arr + spec.extent / 2
        ang = rng.uniform(-aug.yaw_range, aug.yaw_range)
        shift = np.array([rng.uniform(-aug.translate_3d, aug.translate_3d), 0.0,
                          rng.uniform(-aug.translate_3d, aug.translate_3d)])
        R = rot_yaw(ang)
        pts = (pts - pivot) @ R.T + pivot + shift
        boxes = [Box3D((b.center - pivot) @ R.T + pivot + shift, b.size, b.yaw + ang, b.confidence)
                 for b in boxes]
    feats = features_3d(pts, colors, spec, sample.ground_y)
    if aug.enabled and aug.voxel_dropout > 0:
        feats = feats * (rng.uniform(size=spec.dims) >= aug.voxel_dropout)[None]
    return feats, make_supervision_3d(boxes, spec)


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 2000
    lr: float = 1e-4
    batch: int = 4
    seed: int = 0
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)


def _check_finite(loss: float, step: int, what: str):
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"{what} loss became {loss} at step {step}")


def train_seg(model: SegHead, samples: list[TrainSample], cfg: TrainConfig) -> list[float]:
    """Adam on batches of ``cfg.batch`` augmented frames; returns per-step losses.

    One forward pass over the stacked batch gives the same gradient as
    accumulating the samples one at a time."""
    if not samples:
        raise ValueError("training needs at least one labelled frame")
    rng = np.random.default_rng([cfg.seed, 2])
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    model.train()
    for step in range(cfg.iters):
        picks = rng.integers(0, len(samples), size=cfg.batch)
        ex = [seg_example(samples[i], cfg.augment, rng) for i in picks]
        x = torch.from_numpy(np.stack([e[0] for e in ex]))
        out = model(x)[:, 0]
        loss, grad = seg_loss(out.detach().numpy(), np.stack([e[1] for e in ex]), np.stack([e[2] for e in ex]))
        _check_finite(loss, step, "segmentation")
        opt.zero_grad()
        out.backward(torch.from_numpy(grad.astype(np.float32)))
        opt.step()
        history.append(loss)
    model.eval()
    return history


def train_det(model: DetHead, samples: list[TrainSample], spec: GridSpec, cfg: TrainConfig,
              weights: DetLossWeights = DetLossWeights()) -> list[float]:
    if not samples:
        raise ValueError("training needs at least one labelled frame")
    rng = np.random.default_rng([cfg.seed, 3])
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    model.train()
    for step in range(cfg.iters):
        picks = rng.integers(0, len(samples), size=cfg.batch)
        ex = [det_example(samples[i], spec, cfg.augment, rng) for i in picks]
        x = torch.from_numpy(np.stack([e[0] for e in ex]))
        out = model(x)
        t = [e[1] for e in ex]
        loss, grad = det_loss(out.detach().numpy(), np.stack([s.heatmap for s in t]),
                              np.stack([s.size for s in t]), np.stack([s.offset for s in t]),
                              np.stack([s.orientation for s in t]), np.stack([s.valid for s in t]), weights)
        _check_finite(loss, step, "detection")
        opt.zero_grad()
        out.backward(torch.from_numpy(grad.astype(np.float32)))
        opt.step()
        history.append(loss)
    model.eval()
    return history


# ---------------------------------------------------------------------------
# inference

def infer_seg(model: SegHead, rgb: np.ndarray) -> np.ndarray:
    """Per-pixel objectness probability."""
    with torch.no_grad():
        out = model(torch.from_numpy(features_2d(rgb)[None]))[0, 0].numpy()
    return _sigmoid(out.astype(float))


def run_det(model: DetHead, feats: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return model(torch.from_numpy(np.asarray(feats, np.float32)[None]))[0].numpy().astype(float)


def nms_bev(boxes: list[Box3D], iou: float = 0.3) -> list[Box3D]:
    kept: list[Box3D] = []
    for b in sorted(boxes, key=lambda b: -b.confidence):
        if all(iou_bev(b, k) <= iou for k in kept):
            kept.append(b)
    return kept


def decode_det(output: np.ndarray, spec: GridSpec, threshold: float = 0.3, nms_iou: float = 0.3) -> list[Box3D]:
    """Boxes at 3x3x3 local maxima of objectness above ``threshold``."""
    prob = _sigmoid(output[0])
    peaks = (prob == ndimage.maximum_filter(prob, size=3, mode="constant", cval=-1.0)) & (prob > threshold)
    boxes = []
    for i, j, k in np.argwhere(peaks):
        size = np.maximum(output[1:4, i, j, k], 0.05)
        off = output[4:7, i, j, k]
        center = spec.origin_arr + (np.array([i, j, k]) + 0.5 + off) * spec.size_arr
        yaw = bin_to_yaw(int(np.argmax(output[7:, i, j, k])))
        boxes.append(Box3D(center, size, yaw, float(prob[i, j, k])))
    return nms_bev(boxes, nms_iou)


def infer_det(model: DetHead, feats: np.ndarray, spec: GridSpec, threshold: float = 0.3,
              nms_iou: float = 0.3) -> tuple[list[Box3D], np.ndarray]:
    """Decoded boxes and the raw objectness probability grid."""
    out = run_det(model, feats)
    return decode_det(out, spec, threshold, nms_iou), _sigmoid(out[0])


def paint_boxes(boxes: list[Box3D], spec: GridSpec, margin: float | None = None) -> np.ndarray:
    """Voxel grid holding, per voxel, the highest confidence of a box that
    reaches its center (boxes grown by half a voxel by default, so surface
    voxels of the object are covered)."""
    if margin is None:
        margin = 0.5 * float(min(spec.voxel_size))
    grid = np.zeros(spec.dims)
    if not boxes:
        return grid
    centers = spec.voxel_centers().reshape(-1, 3)
    flat = grid.reshape(-1)
    for b in boxes:
        inside = b.contains(centers, margin=margin)
        flat[inside] = np.maximum(flat[inside], b.confidence)
    return grid


__all__ = ["SegHead", "DetHead", "seg_loss", "det_loss", "train_seg", "train_det", "infer_seg", "infer_det",
           "decode_det", "save_checkpoint", "load_checkpoint", "TrainSample", "TrainConfig",
           "AugmentationSpec", "DetLossWeights"]
