"""EM orchestration: per-frame motion analysis, pseudo-label rounds, model
training, trajectory-library construction and the evaluation report."""
from __future__ import annotations

import copy
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
import torch

from .config import PipelineConfig, RoundConfig
from .detectors import (DetHead, SegHead, TrainSample, infer_det, infer_seg, load_checkpoint, make_det_model,
                        make_seg_model, paint_boxes, save_checkpoint, train_det, train_seg)
from .discovery import (PseudoLabel, dedup_against, estimate_ground, fuse_ensemble, motion_heat,
                        motion_proposals)
from .egomotion import EgomotionEstimate, MotionField, estimate_egomotion, lift_flow, motion_field
from .evaluation import Detection, evaluate_tracking, map_table, precision_at
from .features import features_3d, point_colors, unproject_heat
from .flow import FlowField, consistency_masks, estimate_flow
from .geometry import (Box3D, DepthMap, GridSpec, Intrinsics, RigidTransform, apply_transform, iou_bev,
                       raycast_visibility, transform_box, unproject)
from .io import frame_id, read_dataset, write_jsonl
from .simulator import GTObject, Sequence, corrupt_flow
from .tracking import (CostVolume, FrameEvidence, Tracklet, TrajectoryLibrary, associate_iou, build_cost_volume,
                       track, tracklet_displacements, verify_tracklet)

log = logging.getLogger(__name__)


@dataclass
class FrameContext:
    """Everything the rounds need from one frame, computed once."""
    fid: str
    seq_index: int
    k: int
    rgb: np.ndarray
    depth: np.ndarray
    points: np.ndarray  # level frame
    pixels: np.ndarray
    ground_y: float
    intrinsics: Intrinsics
    cam_from_level: RigidTransform
    egomotion: EgomotionEstimate
    motion: MotionField
    moved_to: np.ndarray
    ego_next: RigidTransform | None  # level frame k -> k+1, when certified
    flow: FlowField | None  # forward flow to frame k+1
    features: np.ndarray
    gt_objects: list[GTObject] = field(default_factory=list)

    @property
    def gt_boxes(self) -> list[Box3D]:
        """Moving-type objects with at least one visible pixel."""
        return [g.box for g in self.gt_objects if g.moving_type and g.visible_pixels > 0]


@dataclass
class Models:
    seg: SegHead
    det: DetHead


# ---------------------------------------------------------------------------
# frame preparation

def frame_flows(seq: Sequence, k: int, cfg: PipelineConfig, seq_index: int = 0) -> tuple[FlowField, FlowField, int]:
    """Forward and backward flow between frame k and its partner (k+1, or k-1 for the last frame)."""
    last = k == len(seq) - 1
    j = k - 1 if last else k + 1
    if cfg.flow_source == "estimated":
        a, b = seq.frames[k].rgb, seq.frames[j].rgb
        return estimate_flow(a, b, frames=(k, j)), estimate_flow(b, a, frames=(j, k)), j
    src = seq.frames[j] if last else seq.frames[k]
    f_fw, f_bw = (src.gt_flow_bw, src.gt_flow) if last else (src.gt_flow, src.gt_flow_bw)
    if f_fw is None or f_bw is None:
        raise ValueError(f"{seq.name} frame {k}: ground-truth flow missing")
    if cfg.flow_noise > 0:
        f_fw, _ = corrupt_flow(f_fw, cfg.flow_noise, rng=[cfg.seed, seq_index, k, 0])
        f_bw, _ = corrupt_flow(f_bw, cfg.flow_noise, rng=[cfg.seed, seq_index, k, 1])
    return f_fw, f_bw, j


def prepare_frame(seq: Sequence, seq_index: int, k: int, grid: GridSpec, cfg: PipelineConfig) -> FrameContext:
    intr = seq.intrinsics
    lc = seq.level_from_cam
    a = seq.frames[k]
    f_fw, f_bw, j = frame_flows(seq, k, cfg, seq_index)
    b = seq.frames[j]
    m_fw, m_bw = consistency_masks(f_fw, f_bw, cfg.flow_check)
    fw = lift_flow(f_fw, m_fw, a.depth, b.depth, intr).transformed(lc)
    bw = lift_flow(f_bw, m_bw, b.depth, a.depth, intr).transformed(lc)
    eg = cfg.egomotion
    est = estimate_egomotion(fw, bw, eg.iters, eg.inlier_eps, eg.cycle_threshold, rng=[cfg.seed, seq_index, k])
    pc = apply_transform(lc, unproject(DepthMap(a.depth), intr))
    ground = estimate_ground(pc.points)
    feats = features_3d(pc.points, point_colors(a.rgb, pc.pixels), grid, ground)
    forward = j == k + 1
    return FrameContext(
        fid=frame_id(seq.name, k), seq_index=seq_index, k=k, rgb=a.rgb, depth=a.depth, points=pc.points,
        pixels=pc.pixels, ground_y=ground, intrinsics=intr, cam_from_level=seq.cam_from_level, egomotion=est,
        motion=motion_field(fw, est.T_fw), moved_to=fw.x1, ego_next=est.T_fw if (forward and est.accepted) else None,
        flow=f_fw if forward else None, features=feats, gt_objects=list(a.gt_objects))


def _prepare_one(item, grid, cfg):
    torch.set_num_threads(1)
    seq, si, k = item
    return prepare_frame(seq, si, k, grid, cfg)


def parallel_map(fn, items: list, jobs: int = 1) -> list:
    """Order-preserving map; with ``jobs > 1`` items run in worker processes."""
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def prepare_dataset(seqs: list[Sequence], grid: GridSpec, cfg: PipelineConfig, jobs: int = 1) -> list[FrameContext]:
    items = [(s, i, k) for i, s in enumerate(seqs) for k in range(len(s))]
    return parallel_map(partial(_prepare_one, grid=grid, cfg=cfg), items, jobs)


# ---------------------------------------------------------------------------
# E step

def handcrafted_labels(ctx: FrameContext, grid: GridSpec, cfg: PipelineConfig, round_index: int = 1) -> list[PseudoLabel]:
    """Motion-saliency labels; frames whose egomotion failed the cycle check give none."""
    if not ctx.egomotion.accepted:
        return []
    props = motion_proposals(ctx.motion, ctx.points, ctx.pixels, ctx.depth, grid, ctx.intrinsics,
                             moved_to=ctx.moved_to, cfg=cfg.saliency, promo=cfg.promotion, ground_y=ctx.ground_y)
    return [PseudoLabel(ctx.fid, box, round_index, ("motion",), 1.0) for box, _ in props]


def cue_grids(ctx: FrameContext, models: Models, grid: GridSpec, cfg: PipelineConfig):
    """(seg heat, objectness, detections) for one frame; objectness is the larger of the raw
    detector output and the painted decoded boxes."""
    seg_heat = unproject_heat(infer_seg(models.seg, ctx.rgb), ctx.points, ctx.pixels, grid)
    boxes, obj = infer_det(models.det, ctx.features, grid, cfg.det_threshold)
    return seg_heat, np.maximum(obj, paint_boxes(boxes, grid)), boxes


def ensemble_labels(ctx: FrameContext, models: Models, grid: GridSpec, cfg: PipelineConfig, rc: RoundConfig,
                    existing: list[Box3D]) -> list[PseudoLabel]:
    seg_heat, obj, _ = cue_grids(ctx, models, grid, cfg)
    if ctx.egomotion.accepted:
        mag, measured = ctx.motion.rasterize(grid)
        m = motion_heat(mag, measured, rc.fusion)
    else:
        m = np.zeros(grid.dims)
    _, props = fuse_ensemble(m, seg_heat, obj, rc.fusion, grid, ctx.points, ctx.ground_y, cfg.promotion)
    props = dedup_against(props, existing, cfg.label_dedup_iou)
    return [PseudoLabel(ctx.fid, box, rc.index, ("motion", "seg2d", "det3d"), conf) for box, conf in props]


def _ensemble_one(item, models, grid, cfg, rc):
    torch.set_num_threads(1)
    ctx, existing = item
    return ensemble_labels(ctx, models, grid, cfg, rc, existing)


def e_step(contexts: list[FrameContext], store: list[PseudoLabel], models: Models | None, grid: GridSpec,
           cfg: PipelineConfig, rc: RoundConfig, jobs: int = 1) -> list[PseudoLabel]:
    if rc.mode == "handcrafted":
        rejected = [c.fid for c in contexts if not c.egomotion.accepted]
        if rejected:
            log.info("round %d: %d frames skipped after egomotion rejection", rc.index, len(rejected))
        per_frame = [handcrafted_labels(c, grid, cfg, rc.index) for c in contexts]
    else:
        if models is None:
            raise ValueError("ensemble E step needs trained models")
        by_frame = labels_by_frame(store)
        items = [(c, by_frame.get(c.fid, [])) for c in contexts]
        per_frame = parallel_map(partial(_ensemble_one, models=models, grid=grid, cfg=cfg, rc=rc), items, jobs)
    return [lab for labs in per_frame for lab in labs]


def labels_by_frame(labels: list[PseudoLabel]) -> dict[str, list[Box3D]]:
    out: dict[str, list[Box3D]] = {}
    for lab in labels:
        out.setdefault(lab.frame_id, []).append(lab.box)
    return out


# ---------------------------------------------------------------------------
# M step

def train_samples(contexts: list[FrameContext], store: list[PseudoLabel]) -> list[TrainSample]:
    by_frame = labels_by_frame(store)
    return [TrainSample(c.rgb, c.points, c.pixels, by_frame[c.fid], c.intrinsics, c.cam_from_level, c.ground_y)
            for c in contexts if c.fid in by_frame]


def m_step(samples: list[TrainSample], grid: GridSpec, rc: RoundConfig, cfg: PipelineConfig,
           prior: Models | None = None) -> tuple[Models, dict]:
    """Train both heads on every label accumulated so far, warm-starting from ``prior``."""
    torch.set_num_threads(1)
    if prior is None:
        models = Models(make_seg_model(cfg.seed), make_det_model(cfg.seed))
    else:
        models = Models(copy.deepcopy(prior.seg), copy.deepcopy(prior.det))
    seg_hist = train_seg(models.seg, samples, rc.train)
    det_hist = train_det(models.det, samples, grid, rc.train, cfg.loss_weights)
    tail = max(1, len(seg_hist) // 10)
    return models, {"iters": rc.train.iters, "frames": len(samples),
                    "seg_loss": float(np.mean(seg_hist[-tail:])), "det_loss": float(np.mean(det_hist[-tail:]))}


# ---------------------------------------------------------------------------
# evaluation

def gt_by_frame(contexts: list[FrameContext]) -> dict[str, list[Box3D]]:
    return {c.fid: c.gt_boxes for c in contexts}


def _metrics(dets: list[Detection], contexts: list[FrameContext]) -> dict:
    gts = gt_by_frame(contexts)
    c0 = contexts[0]
    return map_table(dets, gts, c0.intrinsics, c0.cam_from_level)


def label_metrics(labels: list[PseudoLabel], contexts: list[FrameContext]) -> dict:
    return _metrics([Detection(lab.frame_id, lab.box, lab.confidence) for lab in labels], contexts)


def proposal_precision(labels: list[PseudoLabel], contexts: list[FrameContext]) -> dict:
    dets = [Detection(lab.frame_id, lab.box, lab.confidence) for lab in labels]
    gts = gt_by_frame(contexts)
    return {f"{t:.1f}": precision_at(dets, gts, t) for t in (0.3, 0.5)}


def detector_metrics(models: Models, contexts: list[FrameContext], grid: GridSpec, cfg: PipelineConfig) -> dict:
    dets = []
    for c in contexts:
        boxes, _ = infer_det(models.det, c.features, grid, cfg.det_threshold)
        dets.extend(Detection(c.fid, b, b.confidence) for b in boxes)
    return _metrics(dets, contexts)


# ---------------------------------------------------------------------------
# rounds

def run_round(contexts: list[FrameContext], grid: GridSpec, rc: RoundConfig, cfg: PipelineConfig,
              store: list[PseudoLabel], prior: Models | None, jobs: int = 1):
    """One E step and one M step.  Returns (new labels, trained models, round report)."""
    new = e_step(contexts, store, prior, grid, cfg, rc, jobs)
    accumulated = store + new
    report = {
        "round": rc.index,
        "mode": rc.mode,
        "new_labels": len(new),
        "total_labels": len(accumulated),
        "proposal_precision": proposal_precision(new, contexts),
        "labels_map": label_metrics(accumulated, contexts),
    }
    samples = train_samples(contexts, accumulated)
    if not samples:
        log.warning("round %d: no labelled frames, models left unchanged", rc.index)
        return new, prior, report
    models, train_info = m_step(samples, grid, rc, cfg, prior)
    report["training"] = train_info
    report["detector_map"] = detector_metrics(models, contexts, grid, cfg)
    return new, models, report


# ---------------------------------------------------------------------------
# tracking

def sequence_groups(contexts: list[FrameContext]) -> list[list[FrameContext]]:
    groups: dict[int, list[FrameContext]] = {}
    for c in contexts:
        groups.setdefault(c.seq_index, []).append(c)
    return [sorted(g, key=lambda c: c.k) for _, g in sorted(groups.items())]


@dataclass
class SequenceEvidence:
    evidence: list[FrameEvidence]
    cost: CostVolume
    ego: list[RigidTransform | None]


def sequence_evidence(seq_ctx: list[FrameContext], models: Models, grid: GridSpec,
                      cfg: PipelineConfig) -> SequenceEvidence:
    evidence, costs = [], []
    for c in seq_ctx:
        seg_heat, obj, boxes = cue_grids(c, models, grid, cfg)
        vis = raycast_visibility(c.points, grid, c.intrinsics, c.cam_from_level).values
        costs.append(build_cost_volume(seg_heat, obj, vis))
        evidence.append(FrameEvidence(c.features, boxes))
    ego = [None] + [c.ego_next for c in seq_ctx[:-1]]
    return SequenceEvidence(evidence, CostVolume(grid, np.stack(costs)), ego)


def link_labels(seq_ctx: list[FrameContext], by_frame: dict[str, list[Box3D]], gate: float = 0.1,
                min_length: int = 3) -> list[Tracklet]:
    """Chain labels of consecutive frames by Hungarian IoU matching."""
    done: list[Tracklet] = []
    open_: dict[int, Tracklet] = {}  # index of the box in the previous frame -> tracklet
    prev: list[Box3D] = []
    for n, c in enumerate(seq_ctx):
        cur = by_frame.get(c.fid, [])
        pairs = []
        if n > 0 and prev:
            ego = seq_ctx[n - 1].ego_next
            moved = [b if ego is None else transform_box(b, ego) for b in prev]
            pairs = associate_iou(moved, cur, gate)
        nxt: dict[int, Tracklet] = {}
        for i, j in pairs:
            tr = open_.pop(i)
            tr.append(c.k, cur[j], "detected", cur[j].confidence)
            nxt[j] = tr
        done.extend(open_.values())
        for j, b in enumerate(cur):
            if j not in nxt:
                tr = Tracklet(len(done) + len(nxt) + 1000 * c.k)
                tr.append(c.k, b, "detected", b.confidence)
                nxt[j] = tr
        open_, prev = nxt, cur
    done.extend(open_.values())
    return [t for t in done if len(t) >= min_length]


def _common_frame_track(tr: Tracklet, seq_ctx: list[FrameContext]) -> Tracklet | None:
    """Tracklet re-expressed in the level frame of its first timestep, or None if an egomotion link is missing."""
    out = Tracklet(tr.object_id, sources=list(tr.sources), scores=list(tr.scores))
    T = RigidTransform.identity()  # maps first-frame coordinates into the current frame
    out.frames = list(tr.frames)
    for n, t in enumerate(tr.frames):
        if n > 0:
            for s in range(tr.frames[n - 1], t):
                step = seq_ctx[s].ego_next
                if step is None:
                    return None
                T = step.compose(T)
        out.boxes.append(transform_box(tr.boxes[n], T.inverse()))
    return out


def build_library(contexts: list[FrameContext], store: list[PseudoLabel], models: Models, grid: GridSpec,
                  cfg: PipelineConfig, evidence: dict[int, SequenceEvidence] | None = None):
    """Verified label tracklets, turned into a trajectory library (straightest entries first).

    Returns (library, number of candidate tracklets, number verified)."""
    by_frame = labels_by_frame(store)
    lib = TrajectoryLibrary()
    n_cand = n_ok = 0
    for seq_ctx in sequence_groups(contexts):
        cands = link_labels(seq_ctx, by_frame, cfg.track.gate, cfg.verify.min_length)
        if not cands:
            continue
        si = seq_ctx[0].seq_index
        ev = evidence.get(si) if evidence is not None else None
        if ev is None:
            ev = sequence_evidence(seq_ctx, models, grid, cfg)
            if evidence is not None:
                evidence[si] = ev
        flows = {c.k: c.flow for c in seq_ctx if c.flow is not None}
        clouds = {c.k: (c.points, c.pixels) for c in seq_ctx}
        for tr in cands:
            n_cand += 1
            ok, _, _ = verify_tracklet(tr, flows, clouds, seq_ctx[0].intrinsics, seq_ctx[0].cam_from_level,
                                       ev.cost, cfg.verify)
            if not ok:
                continue
            common = _common_frame_track(tr, seq_ctx)
            if common is None:
                continue
            d = tracklet_displacements(common)
            if np.min(np.hypot(d[:, 0], d[:, 2])) < cfg.verify.min_speed:
                continue
            tr.verified = True
            n_ok += 1
            lib.add(d)
    return lib.sorted(), n_cand, n_ok


def gt_tracks(seq_ctx: list[FrameContext]):
    """Frame-0 moving-type objects and their per-frame ground-truth boxes."""
    out = []
    for g in seq_ctx[0].gt_objects:
        if not g.moving_type or g.visible_pixels == 0:
            continue
        boxes = []
        for c in seq_ctx:
            match = [o for o in c.gt_objects if o.object_id == g.object_id]
            boxes.append(match[0].box if match else None)
        out.append((g.object_id, boxes))
    return out


def _overlapped_object(box: Box3D | None, ctx: FrameContext) -> int | None:
    if box is None:
        return None
    best, best_id = 0.0, None
    for o in ctx.gt_objects:
        v = iou_bev(box, o.box)
        if v > best:
            best, best_id = v, o.object_id
    return best_id


def track_sequence(seq_ctx: list[FrameContext], ev: SequenceEvidence, init: list[tuple[int, Box3D]],
                   grid: GridSpec, cfg: PipelineConfig, lib: TrajectoryLibrary | None) -> list[Tracklet]:
    cost = ev.cost if lib is not None else None
    return [track(ev.evidence, box, grid, lib, cost, oid, cfg.track, ev.ego) for oid, box in init]


def tracking_benchmark(contexts: list[FrameContext], models: Models, grid: GridSpec, cfg: PipelineConfig,
                       lib: TrajectoryLibrary | None, evidence: dict[int, SequenceEvidence] | None = None):
    """Track every frame-0 moving-type object from its ground-truth box.

    Returns (metrics, tracklets with their frame-id lists)."""
    preds, gts, ids, out = [], [], [], []
    for seq_ctx in sequence_groups(contexts):
        si = seq_ctx[0].seq_index
        ev = evidence.get(si) if evidence is not None else None
        if ev is None:
            ev = sequence_evidence(seq_ctx, models, grid, cfg)
            if evidence is not None:
                evidence[si] = ev
        objs = gt_tracks(seq_ctx)
        trs = track_sequence(seq_ctx, ev, [(oid, boxes[0]) for oid, boxes in objs], grid, cfg, lib)
        for (oid, boxes), tr in zip(objs, trs):
            pred = [tr.box_at(c.k) for c in seq_ctx]
            preds.append(pred)
            gts.append(boxes)
            ids.append([_overlapped_object(p, c) for p, c in zip(pred, seq_ctx)])
            out.append((tr, [c.fid for c in seq_ctx]))
    return evaluate_tracking(preds, gts, ids), out


# ---------------------------------------------------------------------------
# full run

def _save_models(models: Models, out: Path, k: int, cfg: PipelineConfig) -> dict:
    d = out / f"round_{k}"
    d.mkdir(parents=True, exist_ok=True)
    meta = {"round": k, "seed": cfg.seed}
    save_checkpoint(d / "seg.ckpt", models.seg, "seg", meta)
    save_checkpoint(d / "det.ckpt", models.det, "det", meta)
    return {"seg": f"round_{k}/seg.ckpt", "det": f"round_{k}/det.ckpt"}


def load_models(directory) -> Models:
    d = Path(directory)
    seg, kind_s, _ = load_checkpoint(d / "seg.ckpt")
    det, kind_d, _ = load_checkpoint(d / "det.ckpt")
    if kind_s != "seg" or kind_d != "det":
        raise ValueError(f"{d}: checkpoint kinds {kind_s}/{kind_d} do not match seg/det")
    return Models(seg, det)


def run(data_dir, out_dir, cfg: PipelineConfig = PipelineConfig(), jobs: int = 1) -> dict:
    """Run ``cfg.rounds`` EM rounds on a dataset directory and write labels,
    checkpoints, the trajectory library, tracks and ``report.json`` to ``out_dir``."""
    torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seqs, grid, _ = read_dataset(data_dir)
    contexts = prepare_dataset(seqs, grid, cfg, jobs)
    accepted = sum(c.egomotion.accepted for c in contexts)
    report: dict = {
        "config": cfg.to_dict(),
        "dataset": {"sequences": len(seqs), "frames": len(contexts),
                    "gt_boxes": sum(len(c.gt_boxes) for c in contexts)},
        "egomotion": {"accepted": accepted, "frames": len(contexts), "rate": accepted / len(contexts)},
        "rounds": [],
    }
    labels_path = out / "labels.jsonl"
    labels_path.write_text("")
    store: list[PseudoLabel] = []
    models: Models | None = None
    for k in range(1, cfg.rounds + 1):
        rc = cfg.round_config(k)
        new, models, rep = run_round(contexts, grid, rc, cfg, store, models, jobs)
        store.extend(new)
        write_jsonl(labels_path, [lab.to_dict() for lab in new], append=True)
        if models is not None:
            rep["checkpoints"] = _save_models(models, out, k, cfg)
        report["rounds"].append(rep)
        log.info("round %d: %d new labels, BEV mAP@0.5 %.3f", k, len(new), rep["labels_map"]["bev"]["0.5"])
    first, last = report["rounds"][0]["labels_map"], report["rounds"][-1]["labels_map"]
    report["deltas"] = {view: {t: last[view][t] - first[view][t] for t in first[view]} for view in first}
    if models is not None and (cfg.build_library or cfg.evaluate_tracking):
        evidence: dict[int, SequenceEvidence] = {}
        lib = None
        if cfg.build_library:
            lib, n_cand, n_ok = build_library(contexts, store, models, grid, cfg, evidence)
            (out / "library.json").write_text(lib.to_json())
            report["library"] = {"candidates": n_cand, "verified": n_ok, "path": "library.json"}
        if cfg.evaluate_tracking:
            metrics, tracks = tracking_benchmark(contexts, models, grid, cfg, lib if lib else None, evidence)
            report["tracking"] = metrics
            write_jsonl(out / "tracks.jsonl", [r for tr, fids in tracks for r in tr.records(fids)])
    write_report(out / "report.json", report)
    return report


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
