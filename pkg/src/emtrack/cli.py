"""Command-line entry point: ``emtrack {simulate,run,eval,track,viz}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .discovery import PseudoLabel
from .evaluation import Detection, map_table, precision_at
from .geometry import Box3D
from .io import DatasetError, frame_id, parse_frame_id, read_dataset, read_jsonl, write_dataset, write_jsonl

log = logging.getLogger("emtrack")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="override the random seed")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="worker processes for per-frame work (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emtrack", description="Self-supervised 3D object discovery and tracking on RGB-D sequences.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="render a synthetic dataset")
    p.add_argument("--spec", required=True, help="scene/suite JSON")
    p.add_argument("--out", required=True)
    _global_flags(p, suppress=True)

    p = sub.add_parser("run", help="EM rounds on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _global_flags(p, suppress=True)

    p = sub.add_parser("eval", help="score labels or detections against dataset ground truth")
    p.add_argument("--pred", required=True, help="run output directory, JSONL file or dataset directory")
    p.add_argument("--gt", required=True, help="dataset directory")
    p.add_argument("--report", required=True)
    p.add_argument("--round", type=int, default=None, help="only labels up to this round")
    _global_flags(p, suppress=True)

    p = sub.add_parser("track", help="track objects through a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="directory with seg.ckpt and det.ckpt")
    p.add_argument("--init", default="gt", help="'gt' or a JSON/JSONL file of frame-0 boxes")
    p.add_argument("--library", default=None, help="library JSON (default: models dir or its parent)")
    p.add_argument("--no-library", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _global_flags(p, suppress=True)

    p = sub.add_parser("viz", help="render perspective and bird's-eye PNGs")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--max-frames", type=int, default=None)
    _global_flags(p, suppress=True)
    return parser


# ---------------------------------------------------------------------------
# subcommands

def _scene_specs(spec_json, seed: int | None):
    from .simulator import SceneSpec, occlusion_suite, reference_suite
    if isinstance(spec_json, list):
        specs = [SceneSpec.from_dict(d) for d in spec_json]
    elif "suite" in spec_json:
        kw = {k: v for k, v in spec_json.items() if k != "suite"}
        if seed is not None:
            kw["seed"] = seed
        suites = {"reference": reference_suite, "occlusion": occlusion_suite}
        if spec_json["suite"] not in suites:
            raise ValueError(f"unknown suite {spec_json['suite']!r}")
        specs = suites[spec_json["suite"]](**kw)
    elif "sequences" in spec_json:
        specs = [SceneSpec.from_dict(d) for d in spec_json["sequences"]]
    else:
        specs = [SceneSpec.from_dict(spec_json)]
    if seed is not None and not (isinstance(spec_json, dict) and "suite" in spec_json):
        specs = [dataclasses.replace(s, seed=seed + i) for i, s in enumerate(specs)]
    return specs


def cmd_simulate(args) -> int:
    from .simulator import generate
    spec_json = json.loads(Path(args.spec).read_text())
    specs = _scene_specs(spec_json, args.seed)
    seqs = [generate(s, f"seq{i:03d}") for i, s in enumerate(specs)]
    write_dataset(args.out, seqs)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return EXIT_OK


def _config(args):
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "rounds", None) is not None:
        over["rounds"] = args.rounds
    if args.seed is not None:
        over["seed"] = args.seed
    return dataclasses.replace(cfg, **over) if over else cfg


def cmd_run(args) -> int:
    from .pipeline import run
    report = run(args.data, args.out, _config(args), jobs=args.jobs)
    for r in report["rounds"]:
        m = r["labels_map"]["bev"]
        print(f"round {r['round']}: {r['new_labels']} new labels, BEV mAP@0.3 {m['0.3']:.3f} @0.5 {m['0.5']:.3f}")
    return EXIT_OK


def _read_predictions(pred: Path, max_round: int | None) -> list[Detection]:
    if pred.is_dir() and (pred / "labels.jsonl").is_file():
        pred = pred / "labels.jsonl"
    elif pred.is_dir() and (pred / "manifest.json").is_file():
        seqs, _, _ = read_dataset(pred)
        return [Detection(frame_id(s.name, f.index), g.box, 1.0)
                for s in seqs for f in s.frames for g in f.gt_objects if g.moving_type and g.visible_pixels > 0]
    if not pred.is_file():
        raise DatasetError(pred, "no labels.jsonl, detections or dataset found")
    dets = []
    for rec in read_jsonl(pred):
        try:
            if "box" in rec:
                box = Box3D.from_dict(rec["box"])
                conf, rnd = float(rec.get("confidence", rec.get("score", box.confidence))), rec.get("round")
            else:
                lab = PseudoLabel.from_dict(rec)
                box, conf, rnd = lab.box, lab.confidence, lab.round
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(pred, f"malformed record ({exc})") from exc
        if max_round is not None and rnd is not None and int(rnd) > max_round:
            continue
        dets.append(Detection(rec["frame_id"], box, conf))
    return dets


def cmd_eval(args) -> int:
    seqs, _, _ = read_dataset(args.gt)
    gts = {frame_id(s.name, f.index): [g.box for g in f.gt_objects if g.moving_type and g.visible_pixels > 0]
           for s in seqs for f in s.frames}
    dets = _read_predictions(Path(args.pred), args.round)
    s0 = seqs[0]
    report = {"map": map_table(dets, gts, s0.intrinsics, s0.cam_from_level),
              "precision": {f"{t:.1f}": precision_at(dets, gts, t) for t in (0.3, 0.5)},
              "detections": len(dets), "gt_boxes": sum(len(v) for v in gts.values())}
    Path(args.report).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"BEV mAP@0.5 {report['map']['bev']['0.5']:.3f} over {len(dets)} predictions")
    return EXIT_OK


def _read_init(path: str, seqs) -> dict[str, list[tuple[int, Box3D]]]:
    """Frame-0 boxes per sequence name from ``gt`` or a JSON/JSONL box file."""
    if path == "gt":
        return {s.name: [(g.object_id, g.box) for g in s.frames[0].gt_objects
                         if g.moving_type and g.visible_pixels > 0] for s in seqs}
    p = Path(path)
    if not p.is_file():
        raise DatasetError(p, "init file not found")
    text = p.read_text()
    try:
        recs = json.loads(text)
        recs = recs if isinstance(recs, list) else [recs]
    except json.JSONDecodeError:
        recs = read_jsonl(p)
    out: dict[str, list[tuple[int, Box3D]]] = {}
    for i, r in enumerate(recs):
        try:
            name, k = parse_frame_id(r["frame_id"])
            box = Box3D.from_dict(r["box"]) if "box" in r else PseudoLabel.from_dict({**r, "round": 0}).box
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(p, f"record {i}: {exc}") from exc
        if k != 0:
            continue
        out.setdefault(name, []).append((int(r.get("object_id", i)), box))
    return out


def cmd_track(args) -> int:
    from .pipeline import load_models, prepare_dataset, sequence_evidence, sequence_groups, track_sequence
    from .tracking import TrajectoryLibrary
    cfg = _config(args)
    seqs, grid, _ = read_dataset(args.data)
    models = load_models(args.models)
    lib = None
    if not args.no_library:
        cands = [Path(args.library)] if args.library else [Path(args.models) / "library.json",
                                                           Path(args.models).parent / "library.json"]
        for c in cands:
            if c.is_file():
                lib = TrajectoryLibrary.from_json(c.read_text())
                break
        if args.library and lib is None:
            raise DatasetError(args.library, "library file not found")
    init = _read_init(args.init, seqs)
    contexts = prepare_dataset(seqs, grid, cfg, args.jobs)
    records = []
    for seq_ctx in sequence_groups(contexts):
        name = seqs[seq_ctx[0].seq_index].name
        if not init.get(name):
            continue
        ev = sequence_evidence(seq_ctx, models, grid, cfg)
        for tr in track_sequence(seq_ctx, ev, init[name], grid, cfg, lib if lib else None):
            records.extend(tr.records([c.fid for c in seq_ctx]))
    write_jsonl(args.out, records)
    print(f"wrote {len(records)} tracked boxes to {args.out}")
    return EXIT_OK


def cmd_viz(args) -> int:
    from .geometry import DepthMap, apply_transform, unproject
    from .viz import save_frame_views
    seqs, grid, _ = read_dataset(args.data)
    labels: dict[str, list[Box3D]] = {}
    if args.labels:
        for d in _read_predictions(Path(args.labels), None):
            labels.setdefault(d.frame_id, []).append(d.box)
    n = 0
    for s in seqs:
        for f in s.frames:
            if args.max_frames is not None and n >= args.max_frames:
                break
            fid = frame_id(s.name, f.index)
            pc = apply_transform(s.level_from_cam, unproject(DepthMap(f.depth), s.intrinsics))
            gt = [g.box for g in f.gt_objects if g.moving_type]
            save_frame_views(args.out, fid.replace("/", "_"), f.rgb, pc.points, s.intrinsics, s.cam_from_level,
                             grid, labels.get(fid, []), gt)
            n += 1
    print(f"rendered {n} frames to {args.out}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval, "track": cmd_track, "viz": cmd_viz}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\nemtrack: error: a command is required")
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        return COMMANDS[args.command](args)
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
