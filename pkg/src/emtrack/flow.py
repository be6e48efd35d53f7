"""Dense optical flow by pyramidal block matching, and forward-backward
cycle-consistency filtering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class FlowField:
    vectors: np.ndarray  # (H, W, 2) as (du, dv)
    direction: str = "forward"
    frames: tuple[int, int] = (0, 1)
    valid: np.ndarray | None = None  # where the field is defined; None means everywhere

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.valid is None:
            self.valid = np.ones(self.vectors.shape[:2], dtype=bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]


@dataclass(frozen=True)
class FlowCheckConfig:
    alpha1: float = 0.01
    alpha2: float = 0.1

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("cycle-check slacks must be non-negative")


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 3:
        img = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    return img


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = ndimage.uniform_filter(img, 2, mode="nearest")
    return img[: h - h % 2: 2, : w - w % 2: 2]


def _match_level(i0, i1, init, radius, patch):
    """Block matching at one pyramid level around an integer initial flow."""
    h, w = i0.shape
    ys, xs = np.mgrid[0:h, 0:w]
    base_u = np.round(init[..., 0]).astype(int)
    base_v = np.round(init[..., 1]).astype(int)
    offs = np.arange(-radius, radius + 1)
    n = len(offs)
    cost = np.empty((n, n, h, w))
    for a, dv in enumerate(offs):
        yy = np.clip(ys + base_v + dv, 0, h - 1)
        for b, du in enumerate(offs):
            xx = np.clip(xs + base_u + du, 0, w - 1)
            cost[a, b] = ndimage.uniform_filter(np.abs(i0 - i1[yy, xx]), patch, mode="nearest")
    flat = cost.reshape(n * n, h, w)
    best = np.argmin(flat, axis=0)  # first minimum in scan order
    bv, bu = np.divmod(best, n)
    flow = np.stack([base_u + offs[bu], base_v + offs[bv]], axis=-1).astype(float)

    # quadratic subpixel refinement of the SAD minimum along each axis
    def refine(c_minus, c0, c_plus):
        den = c_minus - 2 * c0 + c_plus
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(den > 1e-12, 0.5 * (c_minus - c_plus) / den, 0.0)
        return np.clip(d, -0.5, 0.5)

    r, c = ys, xs
    inner_u = (bu > 0) & (bu < n - 1)
    inner_v = (bv > 0) & (bv < n - 1)
    c0 = cost[bv, bu, r, c]
    cu_m = cost[bv, np.clip(bu - 1, 0, n - 1), r, c]
    cu_p = cost[bv, np.clip(bu + 1, 0, n - 1), r, c]
    cv_m = cost[np.clip(bv - 1, 0, n - 1), bu, r, c]
    cv_p = cost[np.clip(bv + 1, 0, n - 1), bu, r, c]
    flow[..., 0] += np.where(inner_u, refine(cu_m, c0, cu_p), 0.0)
    flow[..., 1] += np.where(inner_v, refine(cv_m, c0, cv_p), 0.0)
    return flow


def estimate_flow(img0, img1, levels: int = 3, patch: int = 8, radius: int = 8,
                  frames: tuple[int, int] = (0, 1)) -> FlowField:
    """Coarse-to-fine SAD block matching on grayscale luminance."""
    g0, g1 = to_gray(img0), to_gray(img1)
    if g0.shape != g1.shape:
        raise ValueError("images must have equal size")
    pyr0, pyr1 = [g0], [g1]
    for _ in range(levels - 1):
        pyr0.append(_downsample(pyr0[-1]))
        pyr1.append(_downsample(pyr1[-1]))
    flow = np.zeros(pyr0[-1].shape + (2,))
    for lvl in range(levels - 1, -1, -1):
        i0, i1 = pyr0[lvl], pyr1[lvl]
        if flow.shape[:2] != i0.shape:
            up = np.zeros(i0.shape + (2,))
            big = np.repeat(np.repeat(flow, 2, axis=0), 2, axis=1) * 2.0
            hh, ww = min(big.shape[0], i0.shape[0]), min(big.shape[1], i0.shape[1])
            up[:hh, :ww] = big[:hh, :ww]
            if hh < i0.shape[0]:
                up[hh:, :ww] = big[hh - 1: hh, :ww]
            if ww < i0.shape[1]:
                up[:, ww:] = up[:, ww - 1: ww]
            flow = up
        flow = _match_level(i0, i1, flow, radius, patch)
    return FlowField(flow, "forward", frames)


def bilinear_sample(field: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear lookup of an (H, W, C) field at float pixel coordinates.

    Returns (values, inside) where samples outside [0, W-1] x [0, H-1] are
    marked as not inside and get value 0."""
    h, w = field.shape[:2]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    out = (field[y0, x0] * (1 - fx) * (1 - fy) + field[y0, x1] * fx * (1 - fy)
           + field[y1, x0] * (1 - fx) * fy + field[y1, x1] * fx * fy)
    out = np.where(inside[..., None], out, 0.0)
    return out, inside


def warp_backward(f_bw: FlowField, f_fw: FlowField) -> FlowField:
    """Sample the backward field at each pixel's forward-flow target."""
    if f_bw.shape != f_fw.shape:
        raise ValueError("flow fields must have the same shape")
    h, w = f_fw.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    tx = xs + f_fw.vectors[..., 0]
    ty = ys + f_fw.vectors[..., 1]
    warped, inside = bilinear_sample(f_bw.vectors, tx, ty)
    return FlowField(warped, "backward", (f_bw.frames[1], f_bw.frames[0]), inside & f_fw.valid)


def check_cycle(f_fw: FlowField, f_bw_warped: FlowField, cfg: FlowCheckConfig = FlowCheckConfig()) -> np.ndarray:
    """Accept pixels whose forward flow and warped backward flow cancel out.

    Pixels where either field is undefined are rejected."""
    a, b = f_fw.vectors, f_bw_warped.vectors
    resid = np.linalg.norm(a + b, axis=-1)
    bound = cfg.alpha1 * (np.linalg.norm(a, axis=-1) + np.linalg.norm(b, axis=-1)) + cfg.alpha2
    return (resid < bound) & f_fw.valid & f_bw_warped.valid


def consistency_masks(f_fw: FlowField, f_bw: FlowField, cfg: FlowCheckConfig = FlowCheckConfig()):
    """Masks for both directions: forward vectors in frame 0, backward vectors in frame 1."""
    fw_mask = check_cycle(f_fw, warp_backward(f_bw, f_fw), cfg)
    bw_mask = check_cycle(f_bw, warp_backward(f_fw, f_bw), cfg)
    return fw_mask, bw_mask


# ---------------------------------------------------------------------------
# raw little-endian float32 (H*W*2, row-major, (du, dv)) files

def write_flow(path, flow: FlowField | np.ndarray) -> None:
    vec = flow.vectors if isinstance(flow, FlowField) else np.asarray(flow)
    np.ascontiguousarray(vec, dtype="<f4").tofile(path)


def read_flow(path, height: int, width: int, direction: str = "forward",
              frames: tuple[int, int] = (0, 1)) -> FlowField:
    data = np.fromfile(path, dtype="<f4")
    if data.size != height * width * 2:
        raise ValueError(f"{path}: expected {height * width * 2} floats, found {data.size}")
    return FlowField(data.reshape(height, width, 2).astype(float), direction, frames)
