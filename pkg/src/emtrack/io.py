"""Dataset directory I/O.

Layout::

    DIR/manifest.json
    DIR/<sequence>/rgb_%04d.ppm      binary P6, 8-bit
    DIR/<sequence>/depth_%04d.pfm    little-endian PFM, 0 = no return
    DIR/<sequence>/gt_%04d.json      boxes, pose, intrinsics
    DIR/<sequence>/flow_%04d.bin     raw <f4, H*W*2, (du, dv), frame k -> k+1
    DIR/<sequence>/flowbw_%04d.bin   same layout, frame k+1 -> k
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .flow import FlowField, read_flow, write_flow
from .geometry import GridSpec, Intrinsics, RigidTransform
from .simulator import Frame, GTObject, SceneSpec, Sequence, default_grid

FORMAT_VERSION = 1


class DatasetError(Exception):
    """Raised for missing or malformed dataset files; carries the offending path."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DatasetError(path, "not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(data[pos + 1: pos + 1 + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise DatasetError(path, "truncated PPM")
    return raw.reshape(h, w, 3).copy()


def write_pfm(path, values: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    values = np.asarray(values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(values[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise DatasetError(path, "not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline().strip())
        chans = 3 if header == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * chans:
        raise DatasetError(path, "truncated PFM")
    shape = (h, w, 3) if chans == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(float)


def _frame_gt_dict(frame: Frame) -> dict:
    return {
        "frame": frame.index,
        "intrinsics": frame.intrinsics.to_dict(),
        "pose": frame.gt_pose.to_dict(),
        "objects": [g.to_dict() for g in frame.gt_objects],
    }


def write_sequence(root, seq: Sequence) -> None:
    d = Path(root) / seq.name
    d.mkdir(parents=True, exist_ok=True)
    for fr in seq.frames:
        k = fr.index
        write_ppm(d / f"rgb_{k:04d}.ppm", fr.rgb)
        write_pfm(d / f"depth_{k:04d}.pfm", fr.depth)
        (d / f"gt_{k:04d}.json").write_text(json.dumps(_frame_gt_dict(fr), indent=1, sort_keys=True))
        if fr.gt_flow is not None:
            write_flow(d / f"flow_{k:04d}.bin", fr.gt_flow)
            write_flow(d / f"flowbw_{k:04d}.bin", fr.gt_flow_bw)


def write_dataset(root, sequences: list[Sequence], grid: GridSpec | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    first = sequences[0]
    grid = grid or default_grid(first.spec)
    manifest = {
        "format_version": FORMAT_VERSION,
        "intrinsics": first.intrinsics.to_dict(),
        "camera_pitch": first.camera_pitch,
        "grid": grid.to_dict(),
        "sequences": [{"name": s.name, "frames": len(s.frames),
                       "spec": s.spec.to_dict() if s.spec is not None else None} for s in sequences],
    }
    for s in sequences:
        write_sequence(root, s)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DatasetError(path, "missing manifest")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(path, f"invalid JSON ({exc})") from exc
    for key in ("intrinsics", "grid", "sequences"):
        if key not in manifest:
            raise DatasetError(path, f"manifest lacks {key!r}")
    return manifest


def read_frame(root, seq_name: str, k: int, intr: Intrinsics, n_frames: int) -> Frame:
    d = Path(root) / seq_name
    try:
        rgb = read_ppm(d / f"rgb_{k:04d}.ppm")
        depth = read_pfm(d / f"depth_{k:04d}.pfm")
        gt = json.loads((d / f"gt_{k:04d}.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(exc.filename, "missing frame file") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(d / f"gt_{k:04d}.json", f"invalid JSON ({exc})") from exc
    if rgb.shape[:2] != (intr.height, intr.width) or depth.shape != (intr.height, intr.width):
        raise DatasetError(d / f"rgb_{k:04d}.ppm", "image size does not match manifest intrinsics")
    f_fw = f_bw = None
    if k + 1 < n_frames and (d / f"flow_{k:04d}.bin").is_file():
        try:
            f_fw = read_flow(d / f"flow_{k:04d}.bin", intr.height, intr.width, "forward", (k, k + 1))
            f_bw = read_flow(d / f"flowbw_{k:04d}.bin", intr.height, intr.width, "backward", (k + 1, k))
        except (ValueError, FileNotFoundError) as exc:
            raise DatasetError(d / f"flow_{k:04d}.bin", str(exc)) from exc
    objects = [GTObject.from_dict(o) for o in gt.get("objects", [])]
    return Frame(k, rgb, depth, intr, RigidTransform.from_dict(gt["pose"]), objects, f_fw, f_bw, None)


def read_dataset(root) -> tuple[list[Sequence], GridSpec, dict]:
    manifest = read_manifest(root)
    intr = Intrinsics.from_dict(manifest["intrinsics"])
    grid = GridSpec.from_dict(manifest["grid"])
    pitch = float(manifest.get("camera_pitch", 0.0))
    seqs = []
    for entry in manifest["sequences"]:
        n = int(entry["frames"])
        frames = [read_frame(root, entry["name"], k, intr, n) for k in range(n)]
        spec = SceneSpec.from_dict(entry["spec"]) if entry.get("spec") else None
        seqs.append(Sequence(entry["name"], frames, intr, pitch, spec))
    return seqs, grid, manifest


def frame_id(seq_name: str, k: int) -> str:
    return f"{seq_name}/{k:04d}"


def parse_frame_id(fid: str) -> tuple[str, int]:
    name, _, idx = fid.rpartition("/")
    return name, int(idx)


def write_jsonl(path, records, append: bool = False) -> None:
    with open(path, "a" if append else "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetError(path, f"line {i + 1}: invalid JSON ({exc})") from exc
    return out


__all__ = ["DatasetError", "FlowField", "read_dataset", "write_dataset", "read_ppm", "write_ppm",
           "read_pfm", "write_pfm", "frame_id", "parse_frame_id", "read_jsonl", "write_jsonl"]
