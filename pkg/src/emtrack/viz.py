"""Perspective and bird's-eye renderings of frames with boxes drawn on top."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .geometry import Box3D, GridSpec, Intrinsics, RigidTransform, project

GT_COLOR = (40, 220, 60)
LABEL_COLOR = (235, 40, 40)
BOX_EDGES = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]


def _draw_box(draw: ImageDraw.ImageDraw, box: Box3D, intr: Intrinsics, cam_from_level: RigidTransform, color):
    corners = cam_from_level.apply(box.corners())
    if np.any(corners[:, 2] <= 0.05):
        return
    uv, _, _ = project(corners, intr)
    for a, b in BOX_EDGES:
        draw.line([tuple(uv[a]), tuple(uv[b])], fill=color, width=1)


def render_perspective(rgb: np.ndarray, intr: Intrinsics, cam_from_level: RigidTransform,
                       labels: list[Box3D] = (), gt: list[Box3D] = (), scale: int = 2) -> Image.Image:
    """Frame image with projected box wireframes, turned upright for display."""
    img = Image.fromarray(np.asarray(rgb, np.uint8)).resize((intr.width * scale, intr.height * scale),
                                                           Image.NEAREST)
    draw = ImageDraw.Draw(img)
    big = Intrinsics(intr.fx * scale, intr.fy * scale, intr.cx * scale, intr.cy * scale,
                     intr.width * scale, intr.height * scale)
    for b in gt:
        _draw_box(draw, b, big, cam_from_level, GT_COLOR)
    for b in labels:
        _draw_box(draw, b, big, cam_from_level, LABEL_COLOR)
    # image rows grow with +y (up), so the raw raster is upside down
    return img.rotate(180)


def render_bev(points: np.ndarray, spec: GridSpec, labels: list[Box3D] = (), gt: list[Box3D] = (),
               px_per_unit: int = 40) -> Image.Image:
    """Top-down view of the grid footprint: points in gray, far side at the top."""
    x0, z0 = spec.origin_arr[0], spec.origin_arr[2]
    ex, ez = spec.extent[0], spec.extent[2]
    w, h = int(ex * px_per_unit), int(ez * px_per_unit)
    img = Image.new("RGB", (w, h), (20, 20, 24))
    draw = ImageDraw.Draw(img)

    def to_px(xz):
        xz = np.atleast_2d(xz)
        return np.column_stack([(xz[:, 0] - x0) * px_per_unit, h - (xz[:, 1] - z0) * px_per_unit])

    if len(points):
        p = to_px(np.asarray(points)[:, [0, 2]]).astype(int)
        keep = (p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h)
        canvas = np.asarray(img).copy()
        canvas[p[keep, 1], p[keep, 0]] = (110, 110, 110)
        img = Image.fromarray(canvas)
        draw = ImageDraw.Draw(img)
    for boxes, color in ((gt, GT_COLOR), (labels, LABEL_COLOR)):
        for b in boxes:
            poly = [tuple(q) for q in to_px(b.bev_corners())]
            draw.polygon(poly, outline=color)
    return img


def save_frame_views(out_dir, name: str, rgb, points, intr, cam_from_level, spec, labels, gt) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    persp = out / f"{name}_persp.png"
    bev = out / f"{name}_bev.png"
    render_perspective(rgb, intr, cam_from_level, labels, gt).save(persp)
    render_bev(points, spec, labels, gt).save(bev)
    return [persp, bev]
