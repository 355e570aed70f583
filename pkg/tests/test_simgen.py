import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modblend import simgen
from modblend.simgen import (ARM_COLOR, BASE_COLOR, OBJECT_COLOR, KinematicsError, SceneState, centroid,
                             color_mask, forward_kinematics, inverse_kinematics, plan_action, render_frame)


# --- kinematics ---------------------------------------------------------------

@pytest.mark.parametrize("theta, tip", [((0, 0), (2, 0)), ((math.pi / 2, 0), (0, 2)),
                                        ((math.pi / 2, -math.pi / 2), (1, 1))])
def test_forward_kinematics_cases(theta, tip):
    _, got = forward_kinematics(*theta)
    np.testing.assert_allclose(got, tip, atol=1e-12)


def test_forward_kinematics_elbow():
    elbow, _ = forward_kinematics(math.pi / 2, -math.pi / 2)
    np.testing.assert_allclose(elbow, (0, 1), atol=1e-12)


def test_forward_kinematics_base_pose():
    # heading pi/2 turns the arm's x axis onto world +y
    _, tip = forward_kinematics(0.0, 0.0, base=(1.0, -1.0, math.pi / 2))
    np.testing.assert_allclose(tip, (1.0, 1.0), atol=1e-12)


def test_inverse_kinematics_full_extension():
    np.testing.assert_allclose(inverse_kinematics((2 - 1e-6, 0)), (0, 0), atol=5e-3)


def test_inverse_kinematics_right_angle():
    np.testing.assert_allclose(inverse_kinematics((math.sqrt(2), 0)), (math.pi / 4, -math.pi / 2), atol=1e-12)


@pytest.mark.parametrize("target", [(3.0, 0.0), (0.0, 0.0), (2.0, 0.0)])
def test_inverse_kinematics_unreachable(target):
    with pytest.raises(KinematicsError, match="annulus"):
        inverse_kinematics(target)


@settings(max_examples=200, deadline=None)
@given(r=st.floats(0.01, 1.99), a=st.floats(-math.pi, math.pi))
def test_fk_ik_round_trip(r, a):
    target = (r * math.cos(a), r * math.sin(a))
    th1, th2 = inverse_kinematics(target)
    assert th2 <= 0
    _, tip = forward_kinematics(th1, th2)
    np.testing.assert_allclose(tip, target, atol=1e-9)


def test_round_trip_with_base_pose():
    base = (0.3, -1.2, 1.1)
    th = inverse_kinematics((0.1, 0.2), base=base)
    np.testing.assert_allclose(forward_kinematics(*th, base=base)[1], (0.1, 0.2), atol=1e-9)


# --- planning -----------------------------------------------------------------

def test_push_displacement_phi_zero():
    scenes = plan_action("push", 0.0)
    moved = np.array([scenes[-1].obj_x - scenes[0].obj_x, scenes[-1].obj_y - scenes[0].obj_y])
    np.testing.assert_allclose(moved, 0.3 * simgen.push_direction(0.0), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(phi=st.floats(0, 2 * math.pi, exclude_max=True))
def test_push_invariants(phi):
    scenes = plan_action("push", phi)
    assert len(scenes) == simgen.T_STEPS
    assert all(s.aperture == 1.0 for s in scenes)
    moved = np.array([scenes[-1].obj_x - scenes[0].obj_x, scenes[-1].obj_y - scenes[0].obj_y])
    np.testing.assert_allclose(moved, 0.3 * simgen.push_direction(phi), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(phi=st.floats(0, 2 * math.pi, exclude_max=True))
def test_grasp_attaches_and_retracts(phi):
    scenes = plan_action("grasp", phi)
    last = scenes[-1]
    assert last.aperture == 0.0
    _, tip = forward_kinematics(last.theta1, last.theta2, base=last.base_pose)
    np.testing.assert_allclose(tip, (last.obj_x, last.obj_y), atol=1e-9)
    start = np.array([scenes[0].obj_x, scenes[0].obj_y])
    base = np.array(simgen.OWN_BASE[:2])
    moved = np.array([last.obj_x, last.obj_y]) - start
    assert np.linalg.norm(moved) == pytest.approx(0.3, abs=1e-6)
    assert np.linalg.norm(start + moved - base) < np.linalg.norm(start - base)


def test_object_still_before_contact():
    scenes = plan_action("push", 1.0)
    pre = simgen.pre_contact_index()
    assert all((s.obj_x, s.obj_y) == (0.0, 0.0) for s in scenes[:pre + 1])


def test_unknown_action():
    with pytest.raises(ValueError):
        plan_action("throw", 0.0)


def test_scene_state_bounds():
    assert SceneState(0, 0, 3.0).aperture == 1.0
    assert SceneState(0, 0, -1.0).aperture == 0.0
    with pytest.raises(ValueError):
        SceneState(0, 0, 1, obj_x=2.0)


# --- rendering ----------------------------------------------------------------

def test_render_shape_range_and_determinism():
    scene = plan_action("grasp", 2.0)[20]
    a, b = render_frame(scene), render_frame(scene)
    assert a.shape == (3, 32, 32) and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1
    assert a.tobytes() == b.tobytes()


def test_object_centroid_at_image_center():
    c = centroid(color_mask(render_frame(plan_action("push", 0.0)[0]), OBJECT_COLOR))
    np.testing.assert_allclose(c, (16, 16), atol=0.5)


def test_hide_arm_removes_arm_pixels():
    scene = plan_action("push", 0.0)[10]
    assert color_mask(render_frame(scene), ARM_COLOR).sum() > 0
    assert color_mask(render_frame(scene, occlusion="hide-arm"), ARM_COLOR).sum() == 0


def test_hide_base_removes_base_pixels():
    scene = plan_action("push", 0.0)[10]
    assert color_mask(render_frame(scene), BASE_COLOR).sum() > 0
    assert color_mask(render_frame(scene, occlusion="hide-base"), BASE_COLOR).sum() == 0


@pytest.mark.parametrize("color", [OBJECT_COLOR, ARM_COLOR, BASE_COLOR])
def test_opposite_view_is_half_turn(color):
    scene = plan_action("grasp", 1.3)[35]
    own = render_frame(scene)
    opp = render_frame(scene, "opposite")
    rotated = np.rot90(own, 2, axes=(1, 2))
    a, b = centroid(color_mask(opp, color)), centroid(color_mask(rotated, color))
    assert np.linalg.norm(a - b) <= 1.0


def test_left_view_places_base_at_left_edge():
    c = centroid(color_mask(render_frame(plan_action("push", 0.0)[0], "left"), BASE_COLOR))
    assert c[0] < 8 and abs(c[1] - 16) < 1


def test_world_to_pixel_matches_render():
    scene = SceneState(0, 0, 1, obj_x=0.6, obj_y=0.3)
    for view in simgen.VIEWPOINTS:
        c = centroid(color_mask(render_frame(scene, view), OBJECT_COLOR))
        np.testing.assert_allclose(c, simgen.world_to_pixel((0.6, 0.3), view), atol=0.5)


def test_variant_color_keeps_geometry():
    scene = plan_action("push", 0.0)[0]
    blue = simgen.variant_scene(scene, color=simgen.BLUE)
    assert blue.obj_color == simgen.BLUE
    assert (blue.obj_x, blue.obj_y, blue.obj_radius) == (scene.obj_x, scene.obj_y, scene.obj_radius)
    img = render_frame(blue)
    assert color_mask(img, OBJECT_COLOR).sum() == 0
    assert color_mask(img, simgen.BLUE).sum() > 0


def test_variant_radius_quadruples_area():
    scene = SceneState(0.3, -0.3, 1, obj_x=0.5, obj_y=0.6)  # arm clear of the disk
    scene = simgen.variant_scene(scene, radius=0.15)
    big = simgen.variant_scene(scene, radius=0.3)
    m_small = color_mask(render_frame(scene, occlusion="hide-arm"), OBJECT_COLOR)
    m_big = color_mask(render_frame(big, occlusion="hide-arm"), OBJECT_COLOR)
    assert m_big.sum() / m_small.sum() == pytest.approx(4.0, rel=0.15)
    np.testing.assert_allclose(centroid(m_big), centroid(m_small), atol=0.5)


def test_variant_no_override_is_identity():
    scene = plan_action("push", 0.0)[0]
    assert simgen.variant_scene(scene) is scene


# --- datasets -----------------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    return simgen.generate_dataset(3, 2, seed=4)


def test_generate_counts_and_split(small):
    assert len(small.interactions) == 5
    assert small.split == 4 and len(small.train) == 4 and len(small.test) == 1
    assert sorted(it.label for it in small.interactions) == ["grasp", "grasp", "push", "push", "push"]


def test_generated_trajectories_valid(small):
    for it in small.interactions:
        assert it.times[0] == 0 and it.times[-1] == 1 and (np.diff(it.times) > 0).all()
        assert it.states["image"].shape == (50, 3, 32, 32)
        assert it.states["joint"].shape == (50, 3)
        assert np.isfinite(it.states["joint"]).all()
        assert it.states["image"].min() >= 0 and it.states["image"].max() <= 1
        assert 0 <= it.phi < 2 * math.pi


def test_single_push():
    ds = simgen.generate_dataset(1, 0, seed=9)
    assert [it.label for it in ds.interactions] == ["push"]
    assert ds.split == 1


def test_generation_bitwise_reproducible(small):
    again = simgen.generate_dataset(3, 2, seed=4)
    assert simgen.dataset_bytes(again) == simgen.dataset_bytes(small)


def test_dataset_round_trip(tmp_path, small):
    path = tmp_path / "d.mmds"
    simgen.save_dataset(small, path)
    loaded = simgen.load_dataset(path)
    assert simgen.dataset_bytes(loaded) == path.read_bytes()
    assert loaded.split == small.split
    for a, b in zip(loaded.interactions, small.interactions):
        assert a.label == b.label and a.phi == b.phi
        for k in ("image", "joint"):
            assert a.states[k].tobytes() == b.states[k].tobytes()


def test_dataset_bad_magic(tmp_path, small):
    path = tmp_path / "d.mmds"
    path.write_bytes(b"XXXX" + simgen.dataset_bytes(small)[4:])
    with pytest.raises(simgen.DatasetFormatError, match="MMDS"):
        simgen.load_dataset(path)


@pytest.mark.parametrize("cut", [10, 1000])
def test_dataset_truncated(tmp_path, small, cut):
    path = tmp_path / "d.mmds"
    path.write_bytes(simgen.dataset_bytes(small)[:-cut])
    with pytest.raises(simgen.DatasetFormatError):
        simgen.load_dataset(path)


def test_dataset_trailing_bytes(tmp_path, small):
    path = tmp_path / "d.mmds"
    path.write_bytes(simgen.dataset_bytes(small) + b"\0")
    with pytest.raises(simgen.DatasetFormatError):
        simgen.load_dataset(path)
