import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ripnerf import field as fd
from ripnerf import geometry as geo
from ripnerf import ripmap as rp
from oracles import central_difference, real_sh_scipy, rel_err

SMALL = dict(grid_h=8, grid_w=8, channels=2, mlp_width=16)


def small_model(rng, **kw):
    cfg = fd.FieldConfig(**{**SMALL, **kw})
    return fd.FieldModel(cfg, rng, dtype=np.float64)


def random_gaussians(rng, n):
    means = rng.uniform(-0.8, 0.8, (n, 3))
    a = rng.normal(size=(n, 3, 3)) * 0.05
    covs = a @ np.transpose(a, (0, 2, 1)) + 1e-4 * np.eye(3)
    dirs = rng.normal(size=(n, 3))
    return means, covs, dirs


# ---------------------------------------------------------------------------
# config


@pytest.mark.parametrize("solid,planes", [("cube", 3), ("tetrahedron", 4), ("icosahedron", 10)])
def test_feature_dimension(solid, planes):
    assert fd.FieldConfig(solid=solid, channels=16).feature_dim == 16 * planes


def test_paper_default_feature_dimension():
    assert fd.FieldConfig(channels=16).feature_dim == 160


def test_config_validation():
    with pytest.raises(ValueError):
        fd.FieldConfig(solid="sphere")
    with pytest.raises(ValueError):
        fd.FieldConfig(encoding_mode="hash")
    with pytest.raises(ValueError):
        fd.FieldConfig(grid_w=48)


# ---------------------------------------------------------------------------
# spherical harmonics


def test_sh_constant_term(rng):
    for d in rng.normal(size=(20, 3)):
        assert fd.sh_encode(d)[0] == pytest.approx(0.28209479177387814, abs=1e-15)


def test_sh_pole_has_only_zonal_terms():
    sh = fd.sh_encode(np.array([0.0, 0.0, 1.0]))
    zonal = [0, 2, 6, 12]
    for k in range(16):
        if k not in zonal:
            assert sh[k] == 0.0


def test_sh_matches_scipy(rng):
    for d in rng.normal(size=(50, 3)):
        np.testing.assert_allclose(fd.sh_encode(d), real_sh_scipy(d), atol=1e-12)


def test_sh_rejects_zero():
    with pytest.raises(ValueError):
        fd.sh_encode(np.zeros(3))


# ---------------------------------------------------------------------------
# decode


def test_zero_network_decode():
    cfg = fd.FieldConfig(**SMALL)
    params = {k: np.zeros_like(v) for k, v in fd.init_mlp(cfg, np.random.default_rng(0),
                                                            np.float64).items()}
    s = fd.decode(np.ones(cfg.feature_dim), np.array([0.0, 1.0, 0.0]), params, cfg)
    assert s.density == 1.0
    np.testing.assert_array_equal(s.color, [0.5, 0.5, 0.5])
    assert s.geo_feature.shape == (15,)


def test_density_clamp_saturates():
    cfg = fd.FieldConfig(**SMALL)
    params = {k: np.zeros_like(v) for k, v in fd.init_mlp(cfg, np.random.default_rng(0),
                                                            np.float64).items()}
    params["density1.b"][0] = cfg.density_clamp + 100.0
    s = fd.decode(np.zeros(cfg.feature_dim), np.array([1.0, 0.0, 0.0]), params, cfg)
    assert s.density == np.exp(cfg.density_clamp)


def test_decode_rejects_wrong_dimension():
    cfg = fd.FieldConfig(**SMALL)
    params = fd.init_mlp(cfg, np.random.default_rng(0), np.float64)
    with pytest.raises(ValueError):
        fd.decode(np.zeros(cfg.feature_dim + 1), np.array([1.0, 0, 0]), params, cfg)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sample_invariants(seed):
    rng = np.random.default_rng(seed)
    m = small_model(rng)
    m.ripmaps = rng.normal(size=m.ripmaps.shape) * 3
    m.mark_dirty()
    dens, col, _ = m.forward(*random_gaussians(rng, 32))
    assert np.all(dens > 0)
    assert np.all((col >= 0) & (col <= 1))


def test_mlp_gradients_match_finite_differences(rng):
    cfg = fd.FieldConfig(**SMALL)
    params = fd.init_mlp(cfg, rng, np.float64)
    for k in params:
        params[k] = params[k] + 0.1 * rng.normal(size=params[k].shape)
    feats = rng.normal(size=(6, cfg.feature_dim))
    sh = fd.sh_encode(rng.normal(size=(6, 3)))
    gd = rng.normal(size=6)
    gc = rng.normal(size=(6, 3))

    def loss():
        d, c, _ = fd.mlp_forward(params, feats, sh, cfg.density_clamp)
        return float(gd @ d + np.sum(gc * c))

    _, _, cache = fd.mlp_forward(params, feats, sh, cfg.density_clamp)
    grads, g_feats = fd.mlp_backward(params, cache, gd, gc)
    for name, p in params.items():
        for _ in range(4):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            num = central_difference(loss, p, idx, 1e-6)
            assert rel_err(grads[name][idx], num) < 1e-5, name
    for _ in range(10):
        idx = tuple(rng.integers(0, s) for s in feats.shape)
        num = central_difference(loss, feats, idx, 1e-6)
        assert rel_err(g_feats[idx], num) < 1e-5


def test_density_gradient_zero_when_clamped(rng):
    cfg = fd.FieldConfig(**SMALL)
    params = fd.init_mlp(cfg, rng, np.float64)
    params["density1.b"][0] = 100.0
    feats = np.zeros((2, cfg.feature_dim))
    _, _, cache = fd.mlp_forward(params, feats, None, cfg.density_clamp, need_color=False)
    grads, _ = fd.mlp_backward(params, cache, np.ones(2))
    assert np.all(grads["density1.b"] == 0)


# ---------------------------------------------------------------------------
# featurization


def test_constant_ripmaps_give_constant_features(rng):
    cfg = fd.FieldConfig(**SMALL)
    planes = geo.platonic_plane_set(cfg.solid)
    rms = [rp.build_pyramid(np.full((8, 8, 2), 0.3)) for _ in planes]
    means, covs, _ = random_gaussians(rng, 5)
    for n in range(5):
        f = fd.featurize(geo.Gaussian3(means[n], covs[n]), planes, rms, cfg)
        assert f.shape == (20,)
        np.testing.assert_allclose(f, 0.3, atol=1e-15)


def test_cube_single_channel_feature_length(rng):
    cfg = fd.FieldConfig(solid="cube", grid_h=8, grid_w=8, channels=1)
    planes = geo.platonic_plane_set("cube")
    rms = [rp.build_pyramid(rng.normal(size=(8, 8, 1))) for _ in planes]
    f = fd.featurize(geo.Gaussian3(np.zeros(3), 0.01 * np.eye(3)), planes, rms, cfg)
    assert f.shape == (3,)


def test_featurize_matches_batched_model(rng):
    m = small_model(rng)
    means, covs, _ = random_gaussians(rng, 4)
    batch, _ = m.features(means, covs)
    rms = m.plane_ripmaps()
    for n in range(4):
        single = fd.featurize(geo.Gaussian3(means[n], covs[n]), m.planes, rms, m.cfg)
        np.testing.assert_allclose(single, batch[n], atol=1e-12)


def test_isotropic_mode_uses_equal_levels(rng):
    for solid in ("cube", "icosahedron"):
        cfg = fd.FieldConfig(solid=solid, encoding_mode="isotropic_mipmap", **SMALL)
        means, covs, _ = random_gaussians(rng, 50)
        q = fd.query_coords(means, covs, geo.platonic_plane_set(solid), cfg)
        np.testing.assert_array_equal(q[..., 2], q[..., 3])


def _ellipsoid(axis):
    v = np.asarray(axis, float) / np.linalg.norm(axis)
    return 0.04 * np.eye(3) + (4.0 - 0.04) * np.outer(v, v)


def test_body_diagonal_pair_features():
    """Same query tuples on the cube planes, different features on the icosahedron."""
    means = np.zeros((2, 3))
    covs = np.stack([_ellipsoid([1, 1, 1]), _ellipsoid([1, -1, 1])])
    cube = fd.FieldConfig(solid="cube", **SMALL)
    q = fd.query_coords(means, covs, geo.platonic_plane_set("cube"), cube)
    np.testing.assert_array_equal(q[0], q[1])
    rng = np.random.default_rng(7)
    m = small_model(rng, solid="icosahedron", level_offset=0.0)
    m.ripmaps = rng.normal(size=m.ripmaps.shape)
    m.mark_dirty()
    f, _ = m.features(means, covs)
    assert np.abs(f[0] - f[1]).max() > 1e-6


# ---------------------------------------------------------------------------
# full field gradients


def test_field_gradients_match_finite_differences(rng):
    m = small_model(rng, level_offset=None)
    m.ripmaps = rng.normal(size=m.ripmaps.shape) * 0.5
    m.mark_dirty()
    means, covs, dirs = random_gaussians(rng, 3)
    target = rng.uniform(0, 1, (3, 3))

    def loss():
        m.mark_dirty()
        d, c, _ = m.forward(means, covs, dirs)
        return float(np.sum((c - target) ** 2) + 0.1 * np.sum(np.log(d)))

    d, c, cache = m.forward(means, covs, dirs)
    grads = m.backward(cache, 0.1 / d, 2 * (c - target))
    params = m.parameters()
    checked = 0
    for name in ["ripmaps"] * 10 + [f"mlp.{k}" for k in m.mlp]:
        p = params[name]
        g = grads[name]
        if name == "ripmaps":
            nz = np.argwhere(g != 0)
            idx = tuple(nz[rng.integers(len(nz))])
        else:
            idx = tuple(rng.integers(0, s) for s in p.shape)
        num = central_difference(loss, p, idx, 1e-6)
        assert rel_err(g[idx], num) < 1e-4, name
        checked += 1
    assert checked >= 20


def test_constant_loss_gives_zero_gradients(rng):
    m = small_model(rng)
    means, covs, dirs = random_gaussians(rng, 4)
    _, _, cache = m.forward(means, covs, dirs)
    grads = m.backward(cache, np.zeros(4), np.zeros((4, 3)))
    for g in grads.values():
        assert not np.any(g)


def test_duplicate_gaussians_add(rng):
    m = small_model(rng)
    means, covs, dirs = random_gaussians(rng, 1)
    gd, gc = np.array([0.3]), np.array([[0.1, -0.2, 0.5]])
    _, _, c1 = m.forward(means, covs, dirs)
    one = m.backward(c1, gd, gc)
    _, _, c2 = m.forward(np.repeat(means, 2, 0), np.repeat(covs, 2, 0), np.repeat(dirs, 2, 0))
    two = m.backward(c2, np.repeat(gd, 2), np.repeat(gc, 2, 0))
    for k in one:
        np.testing.assert_allclose(two[k], 2 * one[k], rtol=1e-12, atol=1e-15)


def test_gradients_deterministic(rng):
    m = small_model(rng)
    means, covs, dirs = random_gaussians(rng, 64)
    out = []
    for _ in range(2):
        m.mark_dirty()
        d, c, cache = m.forward(means, covs, dirs)
        out.append(m.backward(cache, np.ones_like(d), np.ones_like(c)))
    for k in out[0]:
        np.testing.assert_array_equal(out[0][k], out[1][k])
