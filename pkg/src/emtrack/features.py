"""Fixed per-pixel and per-voxel feature stacks fed to the trainable heads."""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab

from .geometry import GridSpec, scatter_mean

N_FEAT_2D = 15
N_FEAT_3D = 7
HUE_BINS = 8


def features_2d(rgb: np.ndarray, window: int = 7) -> np.ndarray:
    """(15, H, W) stack: Lab color, gradient magnitude at three scales,
    a chroma-weighted local hue histogram and local color variance."""
    img = np.asarray(rgb, dtype=float)
    if img.max() > 1.0:
        img = img / 255.0
    lab = rgb2lab(np.clip(img, 0.0, 1.0))
    L, a, b = lab[..., 0] / 100.0, lab[..., 1] / 100.0, lab[..., 2] / 100.0
    grads = [ndimage.gaussian_gradient_magnitude(L, s, mode="nearest") * s for s in (1.0, 2.0, 4.0)]
    chroma = np.hypot(a, b)
    hue = np.arctan2(b, a)
    hbin = np.floor((hue + np.pi) / (2 * np.pi) * HUE_BINS).astype(int) % HUE_BINS
    hist = [ndimage.uniform_filter(np.where(hbin == k, chroma, 0.0), window, mode="nearest")
            for k in range(HUE_BINS)]
    var = 0.0
    for ch in (L, a, b):
        m = ndimage.uniform_filter(ch, window, mode="nearest")
        var = var + np.maximum(ndimage.uniform_filter(ch * ch, window, mode="nearest") - m * m, 0.0)
    stack = np.stack([L, a, b, *grads, *[h * 4.0 for h in hist], np.sqrt(var)])
    return stack.astype(np.float32)


def features_3d(points: np.ndarray, colors: np.ndarray, spec: GridSpec, ground_y: float) -> np.ndarray:
    """(7, X, Y, Z) stack: occupancy, height above ground on occupied voxels,
    occupancy density at two scales and smoothed mean color."""
    dims = spec.dims
    col = np.asarray(colors, float)
    if col.size and col.max() > 1.0:
        col = col / 255.0
    mean_col, count = scatter_mean(spec, points, col) if len(points) else (np.zeros(dims + (3,)), np.zeros(dims))
    occ = (count > 0).astype(float)
    centers_y = spec.origin[1] + (np.arange(dims[1]) + 0.5) * spec.voxel_size[1]
    height = occ * (centers_y[None, :, None] - ground_y)
    dens3 = ndimage.uniform_filter(occ, 3, mode="constant")
    dens5 = ndimage.uniform_filter(occ, 5, mode="constant")
    norm = ndimage.uniform_filter(occ, 3, mode="constant")
    smooth = []
    for c in range(3):
        num = ndimage.uniform_filter(mean_col[..., c] * occ, 3, mode="constant")
        smooth.append(np.divide(num, norm, out=np.zeros_like(num), where=norm > 1e-9))
    return np.stack([occ, height, dens3, dens5, *smooth]).astype(np.float32)


def point_colors(rgb: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    return np.asarray(rgb)[pixels[:, 1], pixels[:, 0]].astype(float) / 255.0


def unproject_heat(heat_2d: np.ndarray, points: np.ndarray, pixels: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Per-voxel mean of a pixel heatmap over the points that land in each voxel."""
    vals = np.asarray(heat_2d, float)[pixels[:, 1], pixels[:, 0]]
    mean, _ = scatter_mean(spec, points, vals)
    return mean
