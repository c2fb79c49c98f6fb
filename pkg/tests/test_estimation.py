import numpy as np
import pytest

from cageloop.errors import BadParams
from cageloop.estimation import estimate_curvatures, estimate_normals, principal_curvatures, smooth_points
from cageloop.shapes import PointCloud, add_noise, generate_shape, torus_implicit
from oracles import torus_curvatures


def test_sphere_curvatures_match_analytic():
    R = 0.1
    cloud = generate_shape("sphere", {"radius": R}, 2000, 7)
    k = principal_curvatures(cloud.points, cloud.normals, k=20)
    assert np.all(k[:, 0] >= k[:, 1])
    np.testing.assert_allclose(k, -1 / R, rtol=0.2)
    # sign test from the module contract
    assert np.mean((k[:, 0] < 0) & (k[:, 1] < 0)) >= 0.95


def test_plane_curvatures_vanish():
    g = np.linspace(-0.1, 0.1, 30)
    x, y = np.meshgrid(g, g)
    pts = np.stack([x.ravel(), y.ravel(), np.zeros(x.size)], axis=1)
    nrm = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    k = principal_curvatures(pts, nrm, k=20)
    assert np.abs(k).max() < 1e-3 / 0.2


@pytest.mark.parametrize("theta", [0.0, np.pi / 2, np.pi])
def test_torus_curvatures_match_analytic(theta):
    R, r = 0.08, 0.025
    cloud = generate_shape("torus", {"major": R, "minor": r}, 4000, 7)
    p = np.array([(R + r * np.cos(theta)), 0.0, r * np.sin(theta)])
    n = np.array([np.cos(theta), 0.0, np.sin(theta)])
    k = principal_curvatures(cloud.points, cloud.normals, p[None], n[None], k=20)[0]
    expected = sorted(torus_curvatures(R, r, theta), reverse=True)
    np.testing.assert_allclose(k, expected, rtol=0.2, atol=2.0)
    if theta == np.pi:
        # inner equator: saddle-shaped
        assert k[0] > 0 > k[1]


def test_estimate_curvatures_returns_samples():
    cloud = generate_shape("sphere", None, 300, 0)
    out = estimate_curvatures(cloud, k=12)
    assert len(out) == 300
    assert all(s.k1 >= s.k2 for s in out)
    with pytest.raises(BadParams):
        estimate_curvatures(cloud, k=4)


def test_degenerate_neighborhood_gives_zero():
    # collinear neighbors cannot support a quadric fit
    pts = np.stack([np.linspace(0, 1, 40), np.zeros(40), np.zeros(40)], axis=1)
    nrm = np.tile([0.0, 0.0, 1.0], (40, 1))
    k = principal_curvatures(pts, nrm, k=10)
    np.testing.assert_array_equal(k, 0.0)


def test_estimated_normals_are_oriented_outward_on_torus():
    cloud = generate_shape("torus", None, 2000, 1)
    n = estimate_normals(cloud.points)
    assert np.mean(np.einsum("ij,ij->i", n, cloud.normals) > 0.9) > 0.98


def test_smoothing_pulls_noisy_points_to_surface():
    cloud = generate_shape("torus", {"major": 0.08, "minor": 0.025}, 2000, 7)
    noisy = add_noise(cloud, 0.01, 3)
    smooth = smooth_points(noisy, k=20, iters=3)
    def dev(p):
        return np.abs(np.sqrt(torus_implicit(p, 0.08, 0.025) + 0.025 ** 2) - 0.025).mean()
    assert dev(smooth.points) < 0.5 * dev(noisy.points)
    assert smooth_points(noisy, iters=0) is noisy
    with pytest.raises(BadParams):
        smooth_points(noisy, k=5)


def test_smoothing_keeps_a_plane_fixed():
    g = np.linspace(0, 1, 12)
    x, y = np.meshgrid(g, g)
    pts = np.stack([x.ravel(), y.ravel(), np.zeros(x.size)], axis=1)
    cloud = PointCloud(pts, np.tile([0.0, 0.0, 1.0], (len(pts), 1)))
    out = smooth_points(cloud, k=9, iters=2)
    np.testing.assert_allclose(out.points[:, 2], 0.0, atol=1e-12)
