import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emtrack.config import PipelineConfig
from emtrack.detectors import paint_boxes
from emtrack.geometry import Box3D, GridSpec, iou_bev, raycast_visibility
from emtrack.pipeline import prepare_frame
from emtrack.simulator import default_grid
from emtrack.tracking import (CostVolume, EmptyLibraryError, FrameEvidence, Tracklet, TrajectoryLibrary,
                              associate_iou, build_cost_volume, correlate_template, crop_template,
                              library_link, normalize_trajectory, orient_trajectory, track, verify_tracklet)

SPEC = GridSpec((0.0, 0.0, 0.0), (0.25, 0.25, 0.25), (40, 8, 40))


def _strip(x0, x1, z=5.0, w=1.0):
    return Box3D([(x0 + x1) / 2, 0.5, z], [x1 - x0, 1.0, w], 0.0)


# ---------------------------------------------------------------------------
# association

def test_identical_lists_match_identity(rng):
    boxes = [Box3D([3.0 * i, 0.5, 0.0], [1, 1, 1], rng.uniform(-1, 1)) for i in range(4)]
    assert associate_iou(boxes, boxes) == [(i, i) for i in range(4)]


def test_disjoint_sets_do_not_match():
    a = [Box3D([0, 0.5, 0], [1, 1, 1], 0.0)]
    b = [Box3D([5, 0.5, 5], [1, 1, 1], 0.0)]
    assert associate_iou(a, b) == []


def test_hungarian_beats_greedy_trap():
    a = [_strip(0.0, 2.0), _strip(0.6, 2.6)]
    b = [_strip(0.2, 2.2), _strip(-0.6, 1.4)]
    iou = np.array([[iou_bev(x, y) for y in b] for x in a])
    greedy_total = iou[0, 0] + iou[1, 1]  # the single best pair first
    assert iou[0, 0] == iou.max()
    assert iou[0, 1] + iou[1, 0] > greedy_total
    assert sorted(associate_iou(a, b)) == [(0, 1), (1, 0)]


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_hungarian_total_matches_permutation_oracle(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(5):
        a = [Box3D([rng.uniform(0, 3), 0.5, rng.uniform(0, 3)], rng.uniform(0.5, 2, 3), rng.uniform(-np.pi, np.pi))
             for _ in range(n)]
        b = [Box3D([rng.uniform(0, 3), 0.5, rng.uniform(0, 3)], rng.uniform(0.5, 2, 3), rng.uniform(-np.pi, np.pi))
             for _ in range(n)]
        cost = np.array([[1 - iou_bev(x, y) for y in b] for x in a])
        best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        pairs = associate_iou(a, b, gate=-1.0)
        assert len(pairs) == n
        assert sum(cost[i, j] for i, j in pairs) == pytest.approx(best, abs=1e-9)


def test_gate_drops_weak_pairs():
    a = [_strip(0.0, 1.0)]
    b = [_strip(0.9, 1.9)]  # IoU 0.1/1.9
    assert associate_iou(a, b, gate=0.1) == []
    assert associate_iou(a, b, gate=0.0) == [(0, 0)]


# ---------------------------------------------------------------------------
# template correlation

def _planted(rng, shift, scene_shape=(2, 20, 10, 20), tshape=(2, 5, 4, 5)):
    template = rng.normal(size=tshape)
    scene = np.zeros(scene_shape)
    anchor = np.array([7, 3, 7])
    at = anchor + np.asarray(shift)
    scene[:, at[0]:at[0] + tshape[1], at[1]:at[1] + tshape[2], at[2]:at[2] + tshape[3]] = template
    return template, scene, anchor


@pytest.mark.parametrize("shift", [(0, 0, 0), (2, -1, 3), (-3, 1, -2)])
def test_template_in_zeros_recovered_exactly(rng, shift):
    template, scene, anchor = _planted(rng, shift)
    off, score = correlate_template(template, scene, anchor, (4, 2, 4))
    assert np.array_equal(off, shift)
    assert score == pytest.approx(1.0, abs=1e-9)


def test_flat_template_signals_failure():
    off, score = correlate_template(np.ones((1, 3, 3, 3)), np.zeros((1, 10, 10, 10)), (3, 3, 3), (2, 2, 2))
    assert off is None and score == -1.0


@given(scale=st.floats(0.1, 10.0), offset=st.floats(-5.0, 5.0), seed=st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_ncc_invariant_to_affine_brightness(scale, offset, seed):
    rng = np.random.default_rng(seed)
    template = rng.normal(size=(2, 3, 3, 3))
    scene = rng.normal(size=(2, 12, 8, 12))
    off_a, score_a = correlate_template(template, scene, (4, 2, 4), (3, 2, 3))
    off_b, score_b = correlate_template(template, scene * scale + offset, (4, 2, 4), (3, 2, 3))
    assert score_b == pytest.approx(score_a, abs=1e-6)
    assert np.allclose(off_a, off_b, atol=1e-6)


def test_pure_noise_peak_below_handoff():
    peaks = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        template = rng.normal(size=(3, 7, 4, 7))
        scene = rng.normal(size=(3, 30, 8, 30))
        peaks.append(correlate_template(template, scene, (11, 2, 11), (6, 2, 6))[1])
    assert max(peaks) < 0.5


def test_planted_shift_in_simulator_features(moving_scene):
    grid = default_grid(moving_scene.spec)
    ctx = prepare_frame(moving_scene, 0, 0, grid, PipelineConfig())
    box = max(ctx.gt_boxes, key=lambda b: b.size.prod())
    template, lo = crop_template(ctx.features, grid, box)
    shift = np.array([3, 0, -2])
    moved = np.roll(ctx.features, tuple(shift), axis=(1, 2, 3))
    off, score = correlate_template(template, moved, lo, (6, 1, 6))
    assert np.all(np.abs(off - shift) <= 1.0)
    assert score > 0.9


# ---------------------------------------------------------------------------
# cost volume

@pytest.mark.parametrize("so, v, expected", [(1.0, 1.0, 1.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (0.5, 1.0, 0.5),
                                              (0.5, 0.5, 1.0), (0.2, 0.6, 0.6)])
def test_cost_volume_examples(so, v, expected):
    one = np.ones((2, 2, 2))
    p = build_cost_volume(so * one, one, v * one)
    assert np.allclose(p, expected)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_cost_volume_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    s, o, v = rng.uniform(size=(3, 4, 3, 4))
    p = build_cost_volume(s, o, v)
    assert p.min() >= 0.0 and p.max() <= 1.0


def test_cost_volume_rejects_mismatched_grids():
    with pytest.raises(ValueError):
        build_cost_volume(np.ones((2, 2, 2)), np.ones((2, 2, 3)), np.ones((2, 2, 2)))


# ---------------------------------------------------------------------------
# verification

@pytest.fixture(scope="module")
def verify_setup(moving_scene):
    """Ground-truth tracklet of the most visible mover with a cost volume built from true boxes."""
    grid = default_grid(moving_scene.spec)
    cfg = PipelineConfig()
    ctxs = [prepare_frame(moving_scene, 0, k, grid, cfg) for k in range(len(moving_scene))]
    first = ctxs[0].gt_objects
    oid = max((g for g in first if g.moving_type), key=lambda g: g.visible_pixels).object_id
    tr = Tracklet(oid)
    costs = []
    for c in ctxs:
        g = next(o for o in c.gt_objects if o.object_id == oid)
        tr.append(c.k, g.box, "detected")
        objectness = paint_boxes([o.box for o in c.gt_objects], grid)
        vis = raycast_visibility(c.points, grid, c.intrinsics, c.cam_from_level).values
        costs.append(build_cost_volume(objectness, np.ones_like(objectness), vis))
    flows = {c.k: c.flow for c in ctxs if c.flow is not None}
    clouds = {c.k: (c.points, c.pixels) for c in ctxs}
    return tr, flows, clouds, ctxs[0].intrinsics, ctxs[0].cam_from_level, CostVolume(grid, np.stack(costs))


def test_gt_trajectory_accepted(verify_setup):
    tr, flows, clouds, intr, cfl, cost = verify_setup
    ok, ferr, c = verify_tracklet(tr, flows, clouds, intr, cfl, cost)
    assert ok, (ferr, c)
    assert ferr < 0.5


def test_trajectory_through_empty_space_rejected(verify_setup):
    tr, flows, clouds, intr, cfl, cost = verify_setup
    visible_empty = np.argwhere(cost.values[0] == 0.0)
    assert len(visible_empty)
    target = cost.spec.origin_arr + (visible_empty[len(visible_empty) // 2] + 0.5) * cost.spec.size_arr
    dragged = Tracklet(tr.object_id)
    for k, b in zip(tr.frames, tr.boxes):
        dragged.append(k, Box3D(target + [0.1 * k, 0, 0], b.size, b.yaw), "detected")
    ok, _, c = verify_tracklet(dragged, flows, clouds, intr, cfl, cost)
    assert not ok
    assert c < 0.5


def test_short_tracklet_not_eligible(verify_setup):
    tr, flows, clouds, intr, cfl, cost = verify_setup
    short = Tracklet(0)
    for k in range(2):
        short.append(k, tr.boxes[k], "detected")
    assert verify_tracklet(short, flows, clouds, intr, cfl, cost)[0] is False


def test_verify_monotone_in_cost(verify_setup):
    tr, flows, clouds, intr, cfl, cost = verify_setup
    rng = np.random.default_rng(3)
    for _ in range(5):
        low = CostVolume(cost.spec, cost.values * rng.uniform(0.9, 1.0, cost.values.shape))
        high = CostVolume(cost.spec, np.maximum(low.values, rng.uniform(size=cost.values.shape)))
        ok_lo, f_lo, c_lo = verify_tracklet(tr, flows, clouds, intr, cfl, low)
        ok_hi, f_hi, c_hi = verify_tracklet(tr, flows, clouds, intr, cfl, high)
        assert f_hi == f_lo
        assert c_hi >= c_lo
        assert ok_hi or not ok_lo


# ---------------------------------------------------------------------------
# library

@given(seed=st.integers(0, 10_000), angle=st.floats(-np.pi, np.pi), speed=st.floats(0.01, 5.0))
@settings(max_examples=50, deadline=None)
def test_normalize_orient_round_trip(seed, angle, speed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(6, 3))
    raw[0, [0, 2]] += 0.3 * np.sign(raw[0, [0, 2]])
    entry = normalize_trajectory(raw)
    d = np.array([speed * np.cos(angle), rng.normal(), speed * np.sin(angle)])
    assert np.allclose(normalize_trajectory(orient_trajectory(entry, d)), entry, atol=1e-9)


def test_normalized_entry_starts_along_x(rng):
    entry = normalize_trajectory(rng.normal(size=(5, 3)))
    assert entry[0, 0] == pytest.approx(1.0)
    assert entry[0, 2] == pytest.approx(0.0, abs=1e-12)


def test_library_json_round_trip(rng):
    lib = TrajectoryLibrary()
    for _ in range(3):
        lib.add(rng.normal(size=(4, 3)))
    back = TrajectoryLibrary.from_json(lib.to_json())
    assert len(back) == 3
    assert all(np.allclose(a, b, atol=1e-8) for a, b in zip(lib.entries, back.entries))


def test_sorted_puts_straight_entries_first():
    straight = np.tile([1.0, 0.0, 0.0], (5, 1))
    turn = np.array([[1, 0, 0], [1, 0, 0.5], [0.5, 0, 1], [0, 0, 1], [0, 0, 1.0]])
    lib = TrajectoryLibrary([turn, straight]).sorted()
    assert np.array_equal(lib.entries[0], straight)


def _corridor_cost(path_cells: list[np.ndarray], T: int) -> CostVolume:
    """Cost volume that is 1 only around the given per-frame centers."""
    values = np.zeros((T, *SPEC.dims))
    centers = SPEC.voxel_centers()
    for t, p in enumerate(path_cells):
        near = np.linalg.norm((centers - p)[..., [0, 2]], axis=-1) < 0.5
        values[t][near] = 1.0
    return CostVolume(SPEC, values)


def test_library_prefers_planted_turn_over_straight():
    straight = np.tile([1.0, 0.0, 0.0], (6, 1))
    turn = np.array([[1, 0, 0], [0.7, 0, 0.7], [0, 0, 1], [0, 0, 1], [0, 0, 1], [0, 0, 1.0]])
    speed = 0.5
    start = np.array([3.0, 0.5, 3.0])
    truth = start + np.cumsum(turn * speed, axis=0)
    T = 1 + len(truth)
    cost = _corridor_cost([start] + list(truth), T)
    lib = TrajectoryLibrary([straight, turn])
    path, like, idx = library_link([speed, 0, 0], Box3D(start, [1, 1, 1], 0.0), 0, lib, cost, len(truth))
    assert idx == 1
    assert like == pytest.approx(1.0)
    assert np.allclose(path[:, [0, 2]], truth[:, [0, 2]])
    straight_like = cost.path_likelihood(1, start + np.cumsum(straight * speed, axis=0))
    assert straight_like < like


def test_library_link_orients_to_motion():
    lib = TrajectoryLibrary([np.tile([1.0, 0.0, 0.0], (3, 1))])
    cost = CostVolume(SPEC, np.ones((4, *SPEC.dims)))
    path, _, idx = library_link([0, 0, 0.25], Box3D([5, 0.5, 5], [1, 1, 1], 0.0), 0, lib, cost, 3)
    assert idx == 0
    assert np.allclose(path, [[5, 0.5, 5.25], [5, 0.5, 5.5], [5, 0.5, 5.75]])


def test_empty_library_raises():
    cost = CostVolume(SPEC, np.ones((2, *SPEC.dims)))
    with pytest.raises(EmptyLibraryError):
        library_link([1, 0, 0], Box3D([5, 0.5, 5], [1, 1, 1], 0.0), 0, TrajectoryLibrary(), cost, 1)


def test_zero_motion_falls_back_to_standing_still():
    lib = TrajectoryLibrary([np.tile([1.0, 0.0, 0.0], (3, 1))])
    cost = CostVolume(SPEC, np.ones((4, *SPEC.dims)))
    path, _, idx = library_link([0, 0, 0], Box3D([5, 0.5, 5], [1, 1, 1], 0.0), 0, lib, cost, 3)
    assert idx == -1
    assert np.allclose(path, [5, 0.5, 5])


# ---------------------------------------------------------------------------
# tracking on constructed evidence

def _scene(T=14, speed_vox=2, hidden=(), static=False, seed=0):
    """Textured cube sliding along +x over a noisy background; frames in
    ``hidden`` carry no object features and no detection."""
    rng = np.random.default_rng(seed)
    pattern = rng.uniform(1.0, 3.0, size=(2, 4, 4, 4))
    start = np.array([4, 1, 18])
    evidence, boxes, path = [], [], []
    for t in range(T):
        feats = 0.05 * rng.normal(size=(2, *SPEC.dims))
        lo = start + (0 if static else t * speed_vox) * np.array([1, 0, 0])
        box = Box3D(SPEC.origin_arr + (lo + 2) * SPEC.size_arr, [1.0, 1.0, 1.0], 0.0)
        if t not in hidden:
            feats[:, lo[0]:lo[0] + 4, lo[1]:lo[1] + 4, lo[2]:lo[2] + 4] += pattern
        evidence.append(FrameEvidence(feats, [] if t in hidden else [box]))
        boxes.append(box)
        path.append(box.center)
    return evidence, boxes, path


def test_fully_visible_object_followed():
    evidence, boxes, _ = _scene()
    tr = track(evidence, boxes[0], SPEC)
    assert tr.frames == list(range(len(boxes)))
    ious = [iou_bev(tr.box_at(t), boxes[t]) for t in range(len(boxes))]
    assert sum(v > 0.5 for v in ious) >= 0.75 * len(boxes)
    assert min(ious) > 0.9


def test_static_object_keeps_its_box():
    evidence, boxes, _ = _scene(static=True)
    tr = track(evidence, boxes[0], SPEC)
    assert len(tr) == len(boxes)
    assert all(np.allclose(b.center, boxes[0].center, atol=1e-6) for b in tr.boxes)


def test_occlusion_bridged_only_with_library():
    hidden = set(range(5, 10))
    evidence, boxes, path = _scene(hidden=hidden)
    cost = _corridor_cost(path, len(boxes))
    lib = TrajectoryLibrary([np.tile([1.0, 0.0, 0.0], (4, 1))])

    lost = track(evidence, boxes[0], SPEC)
    assert max(lost.frames) < min(hidden)

    bridged = track(evidence, boxes[0], SPEC, lib, cost)
    assert bridged.frames == list(range(len(boxes)))
    assert {bridged.sources[t] for t in hidden} == {"library"}
    after = [t for t in range(max(hidden) + 1, len(boxes))]
    assert all(iou_bev(bridged.box_at(t), boxes[t]) > 0.5 for t in after)
    assert bridged.sources[after[0]] == "detected"


def test_track_records_carry_frame_ids():
    evidence, boxes, _ = _scene(T=4)
    tr = track(evidence, boxes[0], SPEC, object_id=7)
    recs = tr.records([f"s/{k:04d}" for k in range(4)])
    assert [r["frame_id"] for r in recs] == ["s/0000", "s/0001", "s/0002", "s/0003"]
    assert {r["object_id"] for r in recs} == {7}
    assert set(recs[0]) == {"object_id", "frame_id", "box", "source", "score"}


def test_tracklet_timesteps_strictly_increase():
    tr = Tracklet(0)
    tr.append(2, Box3D([0, 0, 0], [1, 1, 1], 0.0), "detected")
    with pytest.raises(ValueError):
        tr.append(2, Box3D([0, 0, 0], [1, 1, 1], 0.0), "detected")
