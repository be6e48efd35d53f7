import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from emtrack.egomotion import (
    DegenerateConfigurationError, EgomotionFailure, Flow3D, check_egomotion_cycle, estimate_egomotion, kabsch,
    lift_flow, motion_field, ransac_rigid,
)
from emtrack.flow import FlowField, consistency_masks
from emtrack.geometry import DepthMap, Intrinsics, RigidTransform
from emtrack.simulator import ObjectSpec, SceneSpec, generate


def random_transform(rng, angle_scale=1.0):
    rot = Rotation.from_rotvec(rng.normal(size=3) * angle_scale).as_matrix()
    return RigidTransform(rot, rng.normal(size=3))


def cam_motion(seq, k):
    return seq.frames[k + 1].gt_pose.compose(seq.frames[k].gt_pose.inverse())


def lifted(seq, k, checked=False):
    f0, f1 = seq.frames[k], seq.frames[k + 1]
    mask = consistency_masks(f0.gt_flow, f0.gt_flow_bw)[0] if checked else None
    return lift_flow(f0.gt_flow, mask, f0.depth, f1.depth, seq.intrinsics)


# lifting ---------------------------------------------------------------------

def test_lift_flow_all_invalid_depth_is_empty():
    intr = Intrinsics(10, 10, 4, 4, 8, 8)
    out = lift_flow(FlowField(np.zeros((8, 8, 2))), None, np.zeros((8, 8)), np.zeros((8, 8)), intr)
    assert len(out) == 0


def test_lift_flow_drops_vectors_leaving_the_image():
    intr = Intrinsics(10, 10, 4, 4, 8, 8)
    vec = np.zeros((8, 8, 2))
    vec[2, 3] = (20.0, 0.0)
    out = lift_flow(FlowField(vec), None, DepthMap(np.ones((8, 8))), DepthMap(np.ones((8, 8))), intr)
    assert len(out) == 63 and not any((p == [3, 2]).all() for p in out.pixels)


def test_lift_flow_respects_mask():
    intr = Intrinsics(10, 10, 4, 4, 8, 8)
    mask = np.zeros((8, 8), bool)
    mask[1, 1] = True
    out = lift_flow(FlowField(np.zeros((8, 8, 2))), mask, np.ones((8, 8)), np.ones((8, 8)), intr)
    assert len(out) == 1 and list(out.pixels[0]) == [1, 1]


def test_lifted_static_scene_follows_camera_motion(static_scene):
    fl = lifted(static_scene, 0)
    T = cam_motion(static_scene, 0)
    err = np.linalg.norm(T.apply(fl.x0) - fl.x1, axis=1)
    assert len(fl) > 1000
    assert np.median(err) < 1e-3 and np.quantile(err, 0.95) < 1e-2


# Kabsch ----------------------------------------------------------------------

def test_kabsch_identity():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    T = kabsch(pts, pts)
    assert np.allclose(T.rotation, np.eye(3), atol=1e-9) and np.allclose(T.translation, 0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kabsch_recovers_known_transform(seed):
    rng = np.random.default_rng(seed)
    T = random_transform(rng)
    src = rng.normal(size=(int(rng.integers(3, 40)), 3))
    got = kabsch(src, T.apply(src))
    assert np.linalg.norm(got.rotation - T.rotation) < 1e-9
    assert np.linalg.norm(got.translation - T.translation) < 1e-9
    assert np.allclose(got.rotation.T @ got.rotation, np.eye(3), atol=1e-12)
    assert np.linalg.det(got.rotation) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("pts", [np.zeros((2, 3)), np.outer(np.arange(3.0), [1, 2, 3])])
def test_kabsch_degenerate_inputs(pts):
    with pytest.raises(DegenerateConfigurationError):
        kabsch(pts, pts)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kabsch_is_a_least_squares_minimum(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(20, 3))
    dst = random_transform(rng).apply(src) + rng.normal(scale=0.1, size=(20, 3))
    T = kabsch(src, dst)
    best = np.sum((T.apply(src) - dst) ** 2)
    for _ in range(20):
        dR = Rotation.from_rotvec(rng.normal(scale=1e-3, size=3)).as_matrix()
        P = RigidTransform(dR @ T.rotation, T.translation + rng.normal(scale=1e-3, size=3))
        assert np.sum((P.apply(src) - dst) ** 2) >= best - 1e-12


# RANSAC ----------------------------------------------------------------------

def synthetic_flows(rng, n=500, outlier_frac=0.0, noise=0.0):
    T = random_transform(rng, 0.05)
    x0 = rng.uniform(-5, 5, (n, 3)) + [0, 0, 10]
    x1 = T.apply(x0)
    n_out = int(outlier_frac * n)
    obj = random_transform(rng, 0.3)
    x1[:n_out] = obj.apply(x0[:n_out])
    x1 += rng.normal(scale=noise, size=x1.shape)
    labels = np.zeros(n, bool)
    labels[:n_out] = True
    return Flow3D(x0, x1, np.zeros((n, 2), int)), T, labels


def test_ransac_recovers_noiseless_motion():
    fl, T, _ = synthetic_flows(np.random.default_rng(1))
    got, inl = ransac_rigid(fl)
    assert inl.all()
    assert np.abs(got.matrix() - T.matrix()).max() < 1e-6


def test_ransac_ignores_moving_object_points():
    fl, T, obj = synthetic_flows(np.random.default_rng(2), outlier_frac=0.2, noise=0.005)
    got, inl = ransac_rigid(fl)
    assert inl[obj].mean() <= 0.05
    ang = np.degrees(Rotation.from_matrix(got.rotation @ T.rotation.T).magnitude())
    assert ang < 0.5 and np.linalg.norm(got.translation - T.translation) < 0.02


def test_ransac_three_points_is_exact_fit():
    rng = np.random.default_rng(3)
    fl, T, _ = synthetic_flows(rng, n=3)
    got, inl = ransac_rigid(fl)
    ref = kabsch(fl.x0, fl.x1)
    assert inl.all() and np.allclose(got.matrix(), ref.matrix())


def test_ransac_deterministic_under_seed():
    fl, _, _ = synthetic_flows(np.random.default_rng(4), outlier_frac=0.3, noise=0.01)
    a, ia = ransac_rigid(fl, rng=9)
    b, ib = ransac_rigid(fl, rng=9)
    assert np.array_equal(a.matrix(), b.matrix()) and np.array_equal(ia, ib)


def test_ransac_failure_signal():
    rng = np.random.default_rng(5)
    fl = Flow3D(rng.normal(size=(50, 3)) * 10, rng.normal(size=(50, 3)) * 10, np.zeros((50, 2), int))
    with pytest.raises(EgomotionFailure):
        ransac_rigid(fl, inlier_eps=1e-9)


# cycle check -------------------------------------------------------------------

def test_cycle_check_exact_inverse_accepted():
    rng = np.random.default_rng(6)
    T = random_transform(rng)
    err, ok = check_egomotion_cycle(T, T.inverse(), rng.normal(size=(100, 3)))
    assert err < 1e-9 and ok


def test_cycle_check_one_metre_drift_rejected():
    rng = np.random.default_rng(7)
    T = random_transform(rng)
    bad = RigidTransform(np.eye(3), [1.0, 0, 0]).compose(T.inverse())
    err, ok = check_egomotion_cycle(T, bad, rng.normal(size=(100, 3)), 0.25)
    assert err == pytest.approx(1.0) and not ok


def test_cycle_check_needs_points():
    with pytest.raises(ValueError):
        check_egomotion_cycle(RigidTransform.identity(), RigidTransform.identity(), np.zeros((0, 3)))


def test_estimate_egomotion_on_simulator(static_scene):
    f0, f1 = static_scene.frames[0], static_scene.frames[1]
    fw = lifted(static_scene, 0)
    bw = lift_flow(f0.gt_flow_bw, None, f1.depth, f0.depth, static_scene.intrinsics)
    est = estimate_egomotion(fw, bw)
    T = cam_motion(static_scene, 0)
    assert est.accepted and est.cycle_error < 0.01
    assert np.abs(est.T_fw.matrix() - T.matrix()).max() < 1e-3


# motion field ------------------------------------------------------------------

def test_motion_field_zero_for_static_camera_and_scene():
    pts = np.random.default_rng(8).normal(size=(30, 3))
    m = motion_field(Flow3D(pts, pts.copy(), np.zeros((30, 2), int)), RigidTransform.identity())
    assert np.all(m.magnitude == 0)


def test_motion_field_small_on_static_scene(static_scene):
    fl = lifted(static_scene, 0, checked=True)
    m = motion_field(fl, cam_motion(static_scene, 0))
    assert m.magnitude.max() < 0.05


def test_motion_field_measures_object_displacement():
    mover = ObjectSpec("cuboid", (1.0, 0.8, 0.8), (0.9, 0.1, 0.1), (-1.0, 0.0), 0.0, "linear", 5.0)
    still = ObjectSpec("cuboid", (0.8, 0.8, 0.8), (0.1, 0.1, 0.9), (1.5, 1.5))
    seq = generate(SceneSpec(n_frames=2, objects=[mover, still], seed=3))
    fl = lifted(seq, 0, checked=True)
    m = motion_field(fl, cam_motion(seq, 0))
    inst = seq.frames[0].instance[fl.pixels[:, 1], fl.pixels[:, 0]]
    assert np.median(m.magnitude[inst == 0]) == pytest.approx(0.5, abs=0.02)
    assert m.magnitude[inst != 0].max() < 0.05
