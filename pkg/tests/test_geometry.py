import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from ripnerf import geometry as geo
from oracles import mc_frustum_moments


def ray(o=(0, 0, 0), d=(0, 0, 1), r=0.1):
    return geo.Ray(np.array(o, float), np.array(d, float), r)


# ---------------------------------------------------------------------------
# types


def test_ray_validation():
    with pytest.raises(geo.GeometryError):
        ray(d=(0, 0, 0))
    with pytest.raises(geo.GeometryError):
        ray(r=0.0)


@pytest.mark.parametrize("t0,t1", [(0.0, 1.0), (-1.0, 1.0), (2.0, 1.0), (1.0, 1.0),
                                   (1.0, 1.0 + 1e-10)])
def test_interval_rejects_bad_bounds(t0, t1):
    with pytest.raises(geo.GeometryError):
        geo.FrustumInterval(t0, t1)


# ---------------------------------------------------------------------------
# cone casting


def test_mean_on_axis_example():
    g = geo.cone_cast_gaussian(ray(), geo.FrustumInterval(1.0, 2.0))
    assert g.mean[0] == 0.0 and g.mean[1] == 0.0
    mu_t, _, _ = geo.frustum_moments(1.0, 2.0, 0.1)
    assert g.mean[2] == pytest.approx(mu_t, abs=1e-15)


def test_moments_match_monte_carlo_example():
    mu_t, var_t, var_r = geo.frustum_moments(1.0, 2.0, 0.1)
    ref = mc_frustum_moments(1.0, 2.0, 0.1)
    for a, b in zip((mu_t, var_t, var_r), ref):
        assert abs(a - b) / abs(b) < 0.01


def test_stable_moments_equal_power_sum_form(rng):
    t0 = rng.uniform(0.1, 5.0, 200)
    t1 = t0 + rng.uniform(0.05, 3.0, 200)
    r = rng.uniform(1e-3, 0.1, 200)
    for a, b in zip(geo.frustum_moments(t0, t1, r), geo.frustum_moments_raw(t0, t1, r)):
        np.testing.assert_allclose(a, b, rtol=1e-9)


def test_stable_moments_thin_interval():
    # the power-sum form loses most digits here; the stable form keeps var_t = hw^2/3
    t0, hw = 1000.0, 1e-4
    _, var_t, _ = geo.frustum_moments(t0, t0 + 2 * hw, 1e-3)
    assert var_t == pytest.approx(hw * hw / 3.0, rel=1e-6)


def test_direction_is_eigenvector(rng):
    for _ in range(20):
        d = rng.normal(size=3) * rng.uniform(0.2, 3.0)
        t0 = rng.uniform(0.5, 3.0)
        g = geo.cone_cast_gaussian(ray(rng.normal(size=3), d, 0.01),
                                   geo.FrustumInterval(t0, t0 + 0.3))
        _, var_t, _ = geo.frustum_moments(t0, t0 + 0.3, 0.01)
        dd = d @ d
        assert d @ g.cov @ d / dd == pytest.approx(var_t * dd, rel=1e-10)
        np.testing.assert_allclose(g.cov @ d, var_t * dd * d, rtol=1e-9, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(o=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       d=st.lists(st.floats(-3, 3), min_size=3, max_size=3).filter(
           lambda v: np.linalg.norm(v) > 0.1),
       r=st.floats(1e-4, 0.2), t0=st.floats(0.01, 10.0), w=st.floats(1e-3, 5.0))
def test_gaussian_invariants(o, d, r, t0, w):
    o, d = np.array(o), np.array(d)
    g = geo.cone_cast_gaussian(geo.Ray(o, d, r), geo.FrustumInterval(t0, t0 + w))
    np.testing.assert_allclose(g.cov, g.cov.T, atol=1e-12)
    assert np.linalg.eigvalsh(g.cov).min() >= -1e-10
    off = g.mean - o
    # mean lies on the ray axis
    assert np.linalg.norm(np.cross(off, d)) <= 1e-10 * max(1.0, np.linalg.norm(off)) * np.linalg.norm(d)


# ---------------------------------------------------------------------------
# plane sets


@pytest.mark.parametrize("solid,count", [("tetrahedron", 4), ("cube", 3), ("octahedron", 4),
                                         ("dodecahedron", 6), ("icosahedron", 10)])
def test_plane_counts_and_bases(solid, count):
    ps = geo.platonic_plane_set(solid)
    assert len(ps) == count
    for p in ps:
        for v in (p.normal, p.axis_x, p.axis_y):
            assert abs(np.linalg.norm(v) - 1.0) < 1e-12
        assert abs(p.axis_x @ p.normal) < 1e-12
        assert abs(p.axis_y @ p.normal) < 1e-12
        assert abs(p.axis_x @ p.axis_y) < 1e-12
    n = ps.normals
    for a, b in itertools.combinations(range(count), 2):
        assert abs(n[a] @ n[b]) < 1 - 1e-9


@pytest.mark.parametrize("solid", ["tetrahedron", "cube", "octahedron",
                                   "dodecahedron", "icosahedron"])
def test_face_normals_match_convex_hull(solid):
    """Every hull facet normal of the solid's vertices is one of our face normals."""
    verts = geo.solid_vertices(solid)
    hull = ConvexHull(verts)
    ours = geo.face_normals(solid)
    hull_normals = np.unique(np.round(hull.equations[:, :3], 9), axis=0)
    assert len(hull_normals) == len(ours)
    for hn in hull_normals:
        assert np.max(ours @ hn) > 1 - 1e-9


def test_cube_is_triplane():
    ps = geo.platonic_plane_set("cube")
    np.testing.assert_array_equal(ps.normals, np.eye(3))


def test_tetrahedron_normals_sum_to_zero():
    ps = geo.platonic_plane_set("tetrahedron")
    assert np.abs(ps.normals.sum(axis=0)).max() < 1e-12


def test_plane_axes_examples():
    x, y = geo.plane_axes([0, 0, 1])
    np.testing.assert_array_equal(x, [1, 0, 0])
    np.testing.assert_array_equal(y, [0, 1, 0])
    x, y = geo.plane_axes([1, 0, 0])
    np.testing.assert_allclose(x, [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(y, [0, 0, -1], atol=1e-15)
    x, y = geo.plane_axes([0, 0, -1])
    np.testing.assert_array_equal(x, [1, 0, 0])
    np.testing.assert_array_equal(y, [0, -1, 0])
    assert np.linalg.det(np.stack([x, y, [0, 0, -1]], axis=1)) == pytest.approx(1.0)


def test_plane_axes_rejects_non_unit():
    with pytest.raises(geo.GeometryError):
        geo.plane_axes([0, 0, 2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(
    lambda v: np.linalg.norm(v) > 1e-3))
def test_plane_axes_handedness(v):
    """The cross-product branch gives det[x y n] = -1; the two polar branches +1."""
    n = np.array(v) / np.linalg.norm(v)
    x, y = geo.plane_axes(n)
    det = np.linalg.det(np.stack([x, y, n], axis=1))
    polar = np.linalg.norm(np.cross([0, 0, 1], n)) < 1e-9
    assert abs(det - (1.0 if polar else -1.0)) < 1e-9
    assert abs(x @ n) < 1e-12 and abs(y @ n) < 1e-12 and abs(x @ y) < 1e-12


# ---------------------------------------------------------------------------
# projection


def test_isotropic_projection_exact(rng):
    for solid in ("cube", "icosahedron", "dodecahedron"):
        for p in geo.platonic_plane_set(solid):
            g2 = geo.project_gaussian(geo.Gaussian3(np.zeros(3), 0.09 * np.eye(3)), p)
            np.testing.assert_allclose(g2.cov, 0.09 * np.eye(2), atol=1e-15)


def test_axis_aligned_mean_projection():
    p = geo.PlaneBasis.from_normal([0, 0, 1])
    g2 = geo.project_gaussian(geo.Gaussian3(np.array([1.0, 2.0, 3.0]), np.eye(3)), p)
    np.testing.assert_array_equal(g2.mean, [1.0, 2.0])


def _diag_aligned(axis):
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    # orthonormal frame whose first column is the major axis
    q, _ = np.linalg.qr(np.column_stack([a, np.eye(3)[:, :2]]))
    q[:, 0] = a
    return q @ np.diag([4.0, 0.04, 0.04]) @ q.T


def test_body_diagonal_pair_footprints():
    c1 = _diag_aligned([1, 1, 1])
    c2 = _diag_aligned([1, -1, 1])
    for p in geo.platonic_plane_set("cube"):
        a = np.diag(geo.project_gaussian(geo.Gaussian3(np.zeros(3), c1), p).cov)
        b = np.diag(geo.project_gaussian(geo.Gaussian3(np.zeros(3), c2), p).cov)
        np.testing.assert_allclose(a, b, atol=1e-12)
    gaps = []
    for p in geo.platonic_plane_set("icosahedron"):
        a = np.diag(geo.project_gaussian(geo.Gaussian3(np.zeros(3), c1), p).cov)
        b = np.diag(geo.project_gaussian(geo.Gaussian3(np.zeros(3), c2), p).cov)
        gaps.append(np.abs(a - b).max())
    assert max(gaps) > 0.1


def _random_spd(rng):
    a = rng.normal(size=(3, 3))
    return a @ a.T


def test_projection_linear_in_covariance(rng):
    for p in geo.platonic_plane_set("icosahedron"):
        s1, s2 = _random_spd(rng), _random_spd(rng)
        a, b = rng.uniform(0, 3, 2)
        lhs = geo.project_gaussian(geo.Gaussian3(np.zeros(3), a * s1 + b * s2), p).cov
        rhs = (a * geo.project_gaussian(geo.Gaussian3(np.zeros(3), s1), p).cov
               + b * geo.project_gaussian(geo.Gaussian3(np.zeros(3), s2), p).cov)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_projection_trace_bound_and_psd(rng):
    for solid in ("tetrahedron", "icosahedron"):
        for p in geo.platonic_plane_set(solid):
            s = _random_spd(rng)
            c2 = geo.project_gaussian(geo.Gaussian3(np.zeros(3), s), p).cov
            assert np.trace(c2) <= np.trace(s) + 1e-10
            assert np.linalg.eigvalsh(c2).min() >= -1e-10


def test_cube_projection_is_coordinate_pairs(rng):
    ps = geo.platonic_plane_set("cube")
    mean = rng.normal(size=3)
    var = rng.uniform(0.1, 1.0, 3)
    g = geo.Gaussian3(mean, np.diag(var))
    # plane normal X -> axes (Y, -Z); normal Y -> (-X, -Z); normal Z -> (X, Y)
    expect = [((mean[1], -mean[2]), (var[1], var[2])),
              ((-mean[0], -mean[2]), (var[0], var[2])),
              ((mean[0], mean[1]), (var[0], var[1]))]
    for p, (m2, v2) in zip(ps, expect):
        g2 = geo.project_gaussian(g, p)
        np.testing.assert_allclose(g2.mean, m2, atol=1e-15)
        np.testing.assert_allclose(np.diag(g2.cov), v2, atol=1e-15)
        assert abs(g2.cov[0, 1]) < 1e-15


def test_batch_projection_matches_single(rng):
    ps = geo.platonic_plane_set("icosahedron")
    means = rng.normal(size=(5, 3))
    covs = np.stack([_random_spd(rng) for _ in range(5)])
    mu, var = geo.project_batch(means, covs, ps.projection_matrix)
    for n in range(5):
        for k, p in enumerate(ps):
            g2 = geo.project_gaussian(geo.Gaussian3(means[n], covs[n]), p)
            np.testing.assert_allclose(mu[n, k], g2.mean, atol=1e-12)
            np.testing.assert_allclose(var[n, k], np.diag(g2.cov), atol=1e-12)

