import numpy as np
import pytest

from emtrack.evaluation import (
    Detection, average_precision, evaluate_map, evaluate_tracking, map_table, match_detections, precision_at,
)
from emtrack.geometry import Box2D, Box3D, Intrinsics, RigidTransform, iou_bev

from oracles import brute_force_ap, monte_carlo_iou_bev, random_micro_instance

GT = Box3D([0, 0, 5], [2, 1, 1])


def shifted(dx, conf=0.9):
    return Box3D([dx, 0, 5], [2, 1, 1], 0.0, conf)


def test_single_match_at_iou_point_six():
    det = shifted(0.5)  # overlap 1.5 / 2.5 = 0.6
    assert iou_bev(det, GT) == pytest.approx(0.6)
    dets = [Detection("f", det, 0.9)]
    assert evaluate_map(dets, {"f": [GT]}, 0.5) == 1.0
    assert evaluate_map(dets, {"f": [GT]}, 0.7) == 0.0


def test_duplicate_detection_is_false_positive():
    dets = [Detection("f", shifted(0.0), 0.9), Detection("f", shifted(0.1), 0.8)]
    tp, n = match_detections(dets, {"f": [GT]}, 0.5)
    assert list(tp) == [True, False] and n == 1
    assert evaluate_map(dets, {"f": [GT]}, 0.5) == 1.0


def test_low_ranked_hit_lowers_ap():
    dets = [Detection("f", shifted(5.0), 0.9), Detection("f", shifted(0.0), 0.5)]
    assert evaluate_map(dets, {"f": [GT]}, 0.5) == pytest.approx(0.5)


def test_average_precision_edge_cases():
    assert average_precision(np.array([], bool), 3) == 0.0
    assert average_precision(np.array([True]), 0) == 0.0


def test_map_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(300):
        dets, gts = random_micro_instance(rng)
        for thr in (0.3, 0.5):
            assert evaluate_map(dets, gts, thr) == pytest.approx(brute_force_ap(dets, gts, thr), abs=1e-12)


def test_map_table_layout_and_identity():
    intr = Intrinsics(100, 100, 64, 48, 128, 96)
    gts = {"f": [GT], "g": [Box3D([1, 0, 6], [1, 1, 1], 0.3)]}
    dets = [Detection(f, b, 1.0) for f, bs in gts.items() for b in bs]
    table = map_table(dets, gts, intr, RigidTransform.identity())
    assert set(table) == {"bev", "2d"}
    assert list(table["bev"]) == ["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7"]
    assert all(v == 1.0 for view in table.values() for v in view.values())


def test_2d_view_uses_rectangles():
    dets = [Detection("f", Box2D(0, 0, 10, 10), 0.5)]
    assert evaluate_map(dets, {"f": [Box2D(0, 0, 10, 10)]}, 0.7, "2d") == 1.0
    with pytest.raises(ValueError):
        evaluate_map(dets, {"f": [Box2D(0, 0, 10, 10)]}, 0.7, "side")


def test_precision_at_counts_hits():
    dets = [Detection("f", shifted(0.0), 0.9), Detection("f", shifted(5.0), 0.9)]
    assert precision_at(dets, {"f": [GT]}, 0.3) == 0.5
    assert precision_at([], {"f": [GT]}, 0.3) == 1.0


def test_rotated_iou_matches_monte_carlo():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = Box3D([0, 0, 0], rng.uniform(0.5, 2, 3), rng.uniform(-np.pi, np.pi))
        b = Box3D([rng.uniform(-1, 1), 0, rng.uniform(-1, 1)], rng.uniform(0.5, 2, 3), rng.uniform(-np.pi, np.pi))
        assert iou_bev(a, b) == pytest.approx(monte_carlo_iou_bev(a, b), abs=0.01)


# tracking metrics --------------------------------------------------------------------

def _trajectory(n=10, step=0.4):
    return [Box3D([t * step, 0, 5], [1, 1, 1]) for t in range(n)]


def test_perfect_tracklets():
    gt = [_trajectory(), _trajectory(step=-0.3)]
    r = evaluate_tracking(gt, gt, [[0] * 10, [1] * 10])
    assert np.allclose(r["iou_curve"], 1.0) and r["recall"] == 1.0 and r["precision"] == 1.0


def test_zero_motion_tracker_decays():
    gt = _trajectory()
    still = [gt[0]] * 10
    curve = evaluate_tracking([still], [gt])["iou_curve"]
    assert curve[0] == pytest.approx(1.0) and curve[-1] == 0.0
    assert all(a >= b for a, b in zip(curve, curve[1:]))


def test_tracklet_ending_on_other_object_is_imprecise():
    gt = _trajectory()
    r = evaluate_tracking([gt], [gt], [[0] * 9 + [1]])
    assert r["recall"] == 1.0 and r["precision"] == 0.0


def test_lost_tracklet_counts_against_recall_only():
    gt = _trajectory()
    r = evaluate_tracking([gt[:5] + [None] * 5], [gt])
    assert r["recall"] == 0.0 and r["precision"] == 1.0
