import numpy as np
import pytest

from emtrack.flow import FlowField
from emtrack.geometry import pixel_rays, rot_yaw
from emtrack.simulator import (
    GROUND, SceneSpec, corrupt_flow, default_grid, generate, gt_egomotion, occlusion_suite, reference_suite,
)


def reprojected_flow(seq, k):
    """Where each surface pixel of frame k lands in frame k+1, computed from the box poses."""
    f0 = seq.frames[k]
    intr, lc, cl = seq.intrinsics, seq.level_from_cam, seq.cam_from_level
    vs, us = np.nonzero(f0.depth_valid)
    pts = lc.apply(pixel_rays(intr, us, vs) * f0.depth[vs, us][:, None])
    ego = gt_egomotion(seq, k)
    out = ego.apply(pts)
    inst = f0.instance[vs, us]
    for g0, g1 in zip(f0.gt_objects, seq.frames[k + 1].gt_objects):
        sel = inst == g0.object_id
        local = (pts[sel] - g0.box.center) @ rot_yaw(g0.box.yaw)
        out[sel] = g1.box.center + local @ rot_yaw(g1.box.yaw).T
    cam = cl.apply(out)
    u = intr.fx * cam[:, 0] / cam[:, 2] + intr.cx
    v = intr.fy * cam[:, 1] / cam[:, 2] + intr.cy
    return vs, us, np.column_stack([u - us, v - vs])


def test_static_object_static_camera_has_zero_flow():
    seq = generate(SceneSpec(n_objects=1, n_frames=3, stationary_fraction=1.0, seed=4))
    for f in seq.frames[:-1]:
        assert np.all(f.gt_flow.vectors[f.gt_flow.valid] == 0.0)


def test_static_scene_flow_matches_reprojection(static_scene):
    vs, us, expect = reprojected_flow(static_scene, 0)
    got = static_scene.frames[0].gt_flow.vectors[vs, us]
    assert np.max(np.abs(got - expect)) < 1e-6
    assert np.median(np.abs(expect[:, 1])) > 0.5  # the camera really moved


def test_moving_scene_flow_within_half_pixel(moving_scene):
    for k in range(len(moving_scene) - 1):
        vs, us, expect = reprojected_flow(moving_scene, k)
        got = moving_scene.frames[k].gt_flow.vectors[vs, us]
        assert np.all(np.linalg.norm(got - expect, axis=1) < 0.5)


def _ray_box_hit(origin, d, box):
    """Slab test in the box frame; returns the ray parameter of the entry point or inf."""
    R = rot_yaw(box.yaw)
    o, dl = (origin - box.center) @ R, d @ R
    half = box.size / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1, t2 = (-half - o) / dl, (half - o) / dl
    lo = np.nanmax(np.minimum(t1, t2))
    hi = np.nanmin(np.maximum(t1, t2))
    return lo if hi >= lo > 0 else np.inf


def test_depth_is_nearest_primitive_along_ray(moving_scene):
    seq, k = moving_scene, 1
    f = seq.frames[k]
    lc = seq.level_from_cam
    rng = np.random.default_rng(0)
    vs, us = np.nonzero(f.instance >= 0)
    pick = rng.choice(len(vs), 150, replace=False)
    origin = np.zeros(3)
    for v, u in zip(vs[pick], us[pick]):
        d = lc.rotation @ pixel_rays(seq.intrinsics, u, v)
        hits = [_ray_box_hit(origin, d, g.box) for g in f.gt_objects]
        j = int(np.argmin(hits))
        assert j == f.instance[v, u]
        assert hits[j] == pytest.approx(f.depth[v, u], abs=1e-6)


def test_ground_pixels_lie_on_ground_plane(moving_scene):
    f = moving_scene.frames[0]
    vs, us = np.nonzero(f.instance == GROUND)
    pts = moving_scene.level_from_cam.apply(pixel_rays(f.intrinsics, us, vs) * f.depth[vs, us][:, None])
    assert np.allclose(pts[:, 1], -moving_scene.spec.camera_height, atol=1e-6)


def test_generation_is_deterministic():
    spec = SceneSpec(n_objects=6, n_frames=3, seed=21, camera="arc")
    a, b = generate(spec), generate(spec)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.rgb.tobytes() == fb.rgb.tobytes()
        assert fa.depth.tobytes() == fb.depth.tobytes()
        assert fa.gt_flow is None or fa.gt_flow.vectors.tobytes() == fb.gt_flow.vectors.tobytes()


@pytest.mark.parametrize("bad", [dict(n_objects=0), dict(n_objects=11), dict(n_frames=1),
                                 dict(camera="orbit"), dict(shapes=("torus",))])
def test_invalid_spec_rejected(bad):
    with pytest.raises(ValueError):
        generate(SceneSpec(**bad))


def test_spec_dict_round_trip_and_unknown_keys():
    spec = occlusion_suite(1)[0]
    assert SceneSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        SceneSpec.from_dict({"n_objects": 2, "colour": 1})


def test_stationary_fraction_holds_moving_type_objects_still():
    seq = generate(SceneSpec(n_objects=6, n_frames=3, seed=2, stationary_fraction=0.5))
    still = [g for g in seq.frames[0].gt_objects if g.moving_type and not g.is_moving]
    assert len(still) == 3


def test_reference_suite_is_seed_pinned():
    assert reference_suite() == reference_suite()
    assert len(reference_suite()) == 10


def test_occlusion_suite_hides_every_mover_for_five_frames():
    for i, spec in enumerate(occlusion_suite()):
        seq = generate(spec)
        for oid, g in enumerate(seq.frames[0].gt_objects):
            if g.is_moving:
                hidden = sum(f.gt_objects[oid].visible_pixels == 0 for f in seq.frames)
                assert hidden >= 5, (i, oid)


def test_default_grid_spans_eight_by_four_by_eight():
    assert np.allclose(default_grid().extent, [8, 4, 8])


# flow corruption -------------------------------------------------------------

def _field(h=64, w=80, seed=0):
    vec = np.random.default_rng(seed).normal(size=(h, w, 2))
    return FlowField(vec, "forward", (0, 1))


def test_corrupt_flow_identity_without_noise():
    f = _field()
    g, mask = corrupt_flow(f, 0.0, 0.0, 1)
    assert np.array_equal(g.vectors, f.vectors) and not mask.any()


def test_corrupt_flow_exact_corruption_count():
    f = _field(37, 53)
    g, mask = corrupt_flow(f, 0.0, 0.1, 1)
    assert mask.sum() == int(np.floor(0.1 * 37 * 53))
    changed = np.any(g.vectors != f.vectors, axis=-1)
    assert np.array_equal(changed, mask)
    assert np.all(np.abs(g.vectors[mask]) <= 20.0)


def test_corrupt_flow_noise_magnitude_is_rayleigh():
    f = FlowField(np.zeros((256, 256, 2)), "forward", (0, 1))
    g, _ = corrupt_flow(f, 0.2, 0.0, 3)
    mags = np.linalg.norm(g.vectors, axis=-1)
    assert mags.mean() == pytest.approx(0.2 * np.sqrt(np.pi / 2), rel=0.01)
    assert np.abs(g.vectors).mean() == pytest.approx(0.2 * np.sqrt(2 / np.pi), rel=0.01)
