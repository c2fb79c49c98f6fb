import numpy as np
import pytest

from cageloop.errors import BadParams, CollinearLoop, NoValidOrigin
from cageloop.grid import Label, VoxelGrid, build_grid
from cageloop.implicit import fit_rbf
from cageloop.morse import CagingLoop
from cageloop.pipeline import PipelineConfig, run
from cageloop.pose import (GraspPose, GripperSpec, check_interference, fit_plane, gripper_samples, make_pose,
                           opening_angle, pose_at, vertex_frames)
from cageloop.shapes import generate_shape
from conftest import TORUS, open_grid
from oracles import circle


def _loop(v):
    v = np.asarray(v, dtype=float)
    return CagingLoop(v, v[0])


def test_plane_of_a_horizontal_circle():
    n, b = fit_plane(circle((0.1, -0.2, 0.3), 0.5))
    np.testing.assert_allclose(n, [0, 0, 1], atol=1e-12)
    assert b == pytest.approx(0.3)
    n, b = fit_plane(circle((0, 0, -0.3), 0.5))
    assert b == pytest.approx(-0.3)


def test_jittered_circle_plane():
    rng = np.random.default_rng(0)
    v = circle((0, 0, 0), 0.1, n=80)
    v[:, 2] += rng.choice([-1, 0, 1], size=80) * 0.005
    n, _ = fit_plane(v)
    # least-squares oracle: smallest singular vector of the centered points
    want = np.linalg.svd(v - v.mean(axis=0))[2][2]
    assert abs(np.dot(n, want)) == pytest.approx(1.0, abs=1e-12)
    assert np.degrees(np.arccos(n[2])) < 5.0


def test_plane_through_three_points():
    p = np.array([[0.0, 0, 1], [1, 0, 2], [0, 1, 3]])
    n, b = fit_plane(p)
    np.testing.assert_allclose(p @ n, b, atol=1e-12)
    assert n[2] > 0
    with pytest.raises(CollinearLoop):
        fit_plane(np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]]))
    with pytest.raises(CollinearLoop):
        fit_plane(np.zeros((2, 3)))


def test_vertical_plane_sign_is_canonical():
    n, _ = fit_plane(circle((0, 0, 0), 1.0, (-1, 0, 0)))
    np.testing.assert_allclose(n, [1, 0, 0], atol=1e-12)


def test_open_cone_is_flat():
    g = open_grid(21, 0.01)
    assert opening_angle(g.center(g.flat([10, 10, 10])), [0, 0, 1], g, 0.03) == pytest.approx(np.pi / 2)


def test_cone_apex_in_band_is_closed():
    g = open_grid(9, 0.01)
    lab = g.labels.copy()
    lab[g.flat([4, 4, 4])] = Label.BAND
    g = VoxelGrid(g.origin, g.spacing, g.dims, lab)
    assert opening_angle(g.center(g.flat([4, 4, 4])), [0, 0, 1], g, 0.03) == 0.0


def _wall_grid(n=41, wall_i=25, spacing=0.01):
    """OBJECT slab at i >= wall_i; the face sits at x = wall_i * spacing."""
    lab = np.full((n, n, n), Label.GRASPING, dtype=np.uint8)
    lab[wall_i:] = Label.OBJECT
    return VoxelGrid(np.zeros(3), spacing, (n, n, n), lab.transpose(2, 1, 0).ravel())


@pytest.mark.parametrize("d,depth", [(0.02, 0.1), (0.05, 0.1), (0.035, 0.2), (0.1, 0.05)])
def test_cone_against_wall_matches_tangency(d, depth):
    g = _wall_grid()
    apex = np.array([0.25 - d, 0.2, 0.05])
    theta = opening_angle(apex, [0, 0, 1], g, depth)
    want = min(np.arctan(d / depth), np.pi / 2)
    assert theta == pytest.approx(want, abs=0.011)


def test_cone_angle_shrinks_with_depth():
    g = _wall_grid()
    apex = np.array([0.22, 0.2, 0.05])
    angles = [opening_angle(apex, [0, 0, 1], g, h) for h in (0.01, 0.03, 0.06, 0.12, 0.24)]
    assert all(a >= b for a, b in zip(angles, angles[1:]))
    with pytest.raises(BadParams):
        opening_angle(apex, [0, 0, 1], g, 0.0)


def _xy_circle(radius, n=48, z=0.0):
    t = 2 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(t), radius * np.sin(t), np.full(n, z)], axis=1)


def test_frame_formulas_on_a_planar_circle():
    pose = pose_at(_loop(_xy_circle(0.3)), 0, np.array([1.0, 0, 0]), np.array([0.0, 0, 1]), 1.0)
    np.testing.assert_allclose(pose.origin, [0.3, 0, 0], atol=1e-15)
    np.testing.assert_allclose(pose.dir1, [1, 0, 0])
    np.testing.assert_allclose(pose.dir2, [0, -1, 0])
    assert pose_at(_loop(_xy_circle(0.3)), 0, np.array([0.0, 0, 1]), np.array([0.0, 0, 1]), 1.0) is None


@pytest.fixture(scope="module")
def rod():
    cloud = generate_shape("cylinder", {"radius": 0.03, "height": 0.3}, 2000, 2)
    return build_grid(fit_rbf(cloud, 0.01), cloud)


def test_make_pose_on_a_circle_around_a_rod(rod):
    g = rod
    v = _xy_circle(0.04 + 0.5 * g.spacing)
    assert g.is_free(v).all()
    loop = _loop(v)
    axis, dir1, n, on = vertex_frames(loop, g)
    assert on.all()
    pose = make_pose(loop, g, GripperSpec(h=0.08, r=0.005))
    o = pose.origin
    c = v.mean(axis=0)
    k = pose.vertex
    np.testing.assert_array_equal(o, v[k])
    np.testing.assert_allclose(pose.plane_normal, [0, 0, 1], atol=1e-9)
    want1 = (o - c) / np.linalg.norm(o - c)
    want2 = np.cross(want1, [0, 0, 1])
    np.testing.assert_allclose(pose.dir1, want1, atol=1e-6)
    np.testing.assert_allclose(pose.dir2, want2 / np.linalg.norm(want2), atol=1e-6)
    assert pose.opening_angle >= 0.15


def test_tube_loop_origin_on_outer_side(torus_grid):
    g = torus_grid
    v = circle((0.08, 0.0, 0.0), 0.025 + 0.01 + g.spacing, (0.0, 1.0, 0.0), n=60)
    pose = make_pose(_loop(v), g)
    angles = [opening_angle(p, a, g, 4 * g.spacing) for p, a in zip(v, vertex_frames(_loop(v), g)[0])]
    rho = np.hypot(v[:, 0], v[:, 1])
    assert np.max(np.array(angles)[rho > 0.08]) >= np.max(np.array(angles)[rho < 0.08])
    assert np.hypot(*pose.origin[:2]) > 0.08


def test_narrow_slot_has_no_origin():
    g = open_grid(15, 0.01, Label.BAND)
    lab = g.labels.copy()
    ring = [[4 + i, 4, 7] for i in range(6)] + [[10, 4 + i, 7] for i in range(6)]
    ring += [[10 - i, 10, 7] for i in range(6)] + [[4, 10 - i, 7] for i in range(6)]
    idx = g.flat(np.array(ring))
    lab[idx] = Label.GRASPING
    g = VoxelGrid(g.origin, g.spacing, g.dims, lab)
    with pytest.raises(NoValidOrigin):
        make_pose(_loop(g.center(idx)), g)


def _frame(origin, dir1, dir2):
    n = np.cross(dir2, dir1)
    return GraspPose(np.asarray(origin, float), np.asarray(dir1, float), np.asarray(dir2, float), n, 1.0, False)


def test_gripper_in_open_space_is_clear():
    g = open_grid(41, 0.01)
    pose = _frame([0.2, 0.2, 0.2], [1, 0, 0], [0, 1, 0])
    assert check_interference(pose, None, GripperSpec(h=0.1, r=0.01), g)
    samples = gripper_samples(pose, GripperSpec(h=0.1, r=0.01), g.spacing)
    assert set(samples) == {"finger1", "finger2", "thumb", "palm", "wrist"}
    for name in ("finger1", "finger2", "thumb"):
        seg = samples[name]
        assert np.linalg.norm(seg[-1] - seg[0]) == pytest.approx(0.1, abs=g.spacing / 2)


def test_finger_aimed_at_object_interferes():
    n = 41
    g = open_grid(n, 0.01)
    c = np.array([0.2, 0.2, 0.2])
    lab = np.where(np.linalg.norm(g.center(np.arange(g.n_voxels)) - c, axis=1) < 0.03, Label.OBJECT,
                   Label.GRASPING).astype(np.uint8)
    g = VoxelGrid(g.origin, g.spacing, g.dims, lab)
    grip = GripperSpec(h=0.1, r=0.005)
    palm = c - [0.0, 0.05, 0.0]
    pose = _frame(palm - grip.palm_offset * grip.h * np.array([1.0, 0, 0]), [1, 0, 0], [0, 1, 0])
    assert not check_interference(pose, None, grip, g)
    away = _frame(pose.origin - [0, 0.2, 0], [1, 0, 0], [0, -1, 0])
    assert check_interference(away, None, grip, g)


def test_emitted_frames_are_orthonormal(torus_report):
    for rank, pose in torus_report.poses:
        if pose is None:
            continue
        f = pose.frame()
        np.testing.assert_allclose(f @ f.T, np.eye(3), atol=1e-6)
        np.testing.assert_array_equal(pose.origin, torus_report.loops[rank].vertices[pose.vertex])


def test_valid_gripper_stays_off_the_offset_surface(torus_report, torus_cloud, torus_grid):
    surf = fit_rbf(torus_cloud, 0.01)
    grip = PipelineConfig.from_dict({"gripper": {"h": 0.12, "r": 0.01}}).gripper_spec()
    diag = np.sqrt(3) * torus_grid.spacing
    checked = 0
    for _, pose in torus_report.poses:
        if pose is not None and pose.valid:
            pts = np.vstack(list(gripper_samples(pose, grip, torus_grid.spacing).values()))
            inside = torus_grid.index_of(pts) >= 0
            # outside the hull the fit is unconstrained, so test where voxels exist
            f = surf(pts[inside & (torus_grid.hull_distance(pts) < 0)])
            assert np.all(f >= 0.01 - diag)
            checked += 1
    assert checked >= 1


@pytest.fixture(scope="module")
def blocky_run():
    cloud = generate_shape("blocky-L", None, 2000, 3)
    report = run(PipelineConfig.from_dict({"gripper": {"h": 0.12, "r": 0.01}}), cloud, write=False)
    grid = build_grid(fit_rbf(cloud, 0.01), cloud)
    return cloud, grid, report


def test_raw_surface_loop_interferes_but_embedded_loop_does_not(blocky_run):
    cloud, grid, report = blocky_run
    grip = GripperSpec(h=0.12, r=0.01)
    rank, pose = next((i, p) for i, p in report.poses if p is not None and p.valid)
    loop = report.loops[rank]
    assert check_interference(pose, loop, grip, grid)
    # the same loop pulled onto the raw surface, gripper frame unchanged
    _, k = grid.surface_tree.query(loop.vertices)
    raw = cloud.points[k]
    flat = GraspPose(raw[pose.vertex], pose.dir1, pose.dir2, pose.plane_normal, pose.opening_angle, False)
    assert not check_interference(flat, _loop(raw), grip, grid)


def test_gripper_spec_validation():
    with pytest.raises(BadParams):
        GripperSpec(h=0.0, r=0.01)
    with pytest.raises(BadParams):
        GripperSpec(h=0.1, r=0.01, spread_deg=180)
    assert GripperSpec(h=0.1, r=0.01).approach_depth == 0.1
