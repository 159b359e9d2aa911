"""Radiance field: Platonic-solid projection + ripmap features + tiny MLP.

Forward and reverse-mode passes are written out by hand.  All functions are
dtype-generic; the model's parameter dtype decides the compute precision.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry, ripmap

GEO_DIM = 15
SH_DIM = 16


class EncodingMode(str, enum.Enum):
    RIPMAP = "ripmap"
    ISOTROPIC_MIPMAP = "isotropic_mipmap"


@dataclass
class FieldConfig:
    solid: str = "icosahedron"
    grid_h: int = 64
    grid_w: int = 64
    channels: int = 8
    mlp_width: int = 128
    sh_degree: int = 4
    density_clamp: float = 15.0
    mass_factor: float = 2.0
    scene_radius: float = 1.5
    encoding_mode: str = "ripmap"
    # None -> log2 of the grid size along each axis; 0 reproduces the bare formula
    level_offset: float | None = None

    def __post_init__(self):
        geometry.Solid(self.solid)
        EncodingMode(self.encoding_mode)
        if self.sh_degree != 4:
            raise ValueError("only sh_degree=4 (16 coefficients) is supported")
        ripmap.RipmapLayout(self.grid_h, self.grid_w, self.channels)

    @property
    def plane_count(self):
        return geometry.PLANE_COUNTS[geometry.Solid(self.solid)]

    @property
    def feature_dim(self):
        return self.channels * self.plane_count

    @property
    def level_offsets(self):
        if self.level_offset is None:
            return math.log2(self.grid_w), math.log2(self.grid_h)
        return float(self.level_offset), float(self.level_offset)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_encode(directions):
    """Real spherical harmonics of bands 0-3 (16 values) for ``(..., 3)`` directions."""
    d = np.asarray(directions)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot encode a zero direction")
    d = d / norm
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    x2, y2, z2 = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty(d.shape[:-1] + (SH_DIM,), dtype=d.dtype)
    out[..., 0] = 0.28209479177387814
    out[..., 1] = -0.48860251190291987 * y
    out[..., 2] = 0.48860251190291987 * z
    out[..., 3] = -0.48860251190291987 * x
    out[..., 4] = 1.0925484305920792 * xy
    out[..., 5] = -1.0925484305920792 * yz
    out[..., 6] = 0.94617469575755997 * z2 - 0.31539156525251999
    out[..., 7] = -1.0925484305920792 * xz
    out[..., 8] = 0.54627421529603959 * (x2 - y2)
    out[..., 9] = 0.59004358992664352 * y * (y2 - 3.0 * x2)
    out[..., 10] = 2.8906114426405538 * xy * z
    out[..., 11] = 0.45704579946446572 * y * (1.0 - 5.0 * z2)
    out[..., 12] = 0.3731763325901154 * z * (5.0 * z2 - 3.0)
    out[..., 13] = 0.45704579946446572 * x * (1.0 - 5.0 * z2)
    out[..., 14] = 1.4453057213202769 * z * (x2 - y2)
    out[..., 15] = 0.59004358992664352 * x * (3.0 * y2 - x2)
    return out


# ---------------------------------------------------------------------------
# tiny MLP

MLP_LAYERS = ("density0", "density1", "color0", "color1", "color2")


def mlp_shapes(cfg: FieldConfig):
    w = cfg.mlp_width
    return {
        "density0": (cfg.feature_dim, w),
        "density1": (w, 1 + GEO_DIM),
        "color0": (GEO_DIM + SH_DIM, w),
        "color1": (w, w),
        "color2": (w, 3),
    }


def init_mlp(cfg: FieldConfig, rng, dtype=np.float32):
    """Glorot-uniform weights, zero biases. Keys are ``<layer>.w`` / ``<layer>.b``."""
    params = {}
    for name, (fan_in, fan_out) in mlp_shapes(cfg).items():
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.w"] = rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)
        params[f"{name}.b"] = np.zeros(fan_out, dtype=dtype)
    return params


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def mlp_forward(params, feats, sh, density_clamp, need_color=True):
    """Decode features to ``(density, color, cache)``; color is None if not needed."""
    h0 = feats @ params["density0.w"] + params["density0.b"]
    a0 = np.maximum(h0, 0)
    o1 = a0 @ params["density1.w"] + params["density1.b"]
    raw = o1[:, 0]
    density = np.exp(np.clip(raw, -density_clamp, density_clamp))
    cache = {"feats": feats, "h0": h0, "a0": a0, "raw": raw, "density": density,
             "clamp": density_clamp}
    if not need_color:
        return density, None, cache
    xc = np.concatenate([o1[:, 1:], sh.astype(o1.dtype, copy=False)], axis=1)
    h2 = xc @ params["color0.w"] + params["color0.b"]
    a2 = np.maximum(h2, 0)
    h3 = a2 @ params["color1.w"] + params["color1.b"]
    a3 = np.maximum(h3, 0)
    h4 = a3 @ params["color2.w"] + params["color2.b"]
    color = _sigmoid(h4)
    cache.update(xc=xc, h2=h2, a2=a2, h3=h3, a3=a3, color=color)
    return density, color, cache


def mlp_backward(params, cache, grad_density, grad_color=None):
    """Return ``(param_grads, grad_feats)`` for the upstream gradients."""
    grads = {}
    n = cache["feats"].shape[0]
    dtype = cache["a0"].dtype
    g_o1 = np.zeros((n, 1 + GEO_DIM), dtype=dtype)
    if grad_color is not None and "color" in cache:
        c = cache["color"]
        g_h4 = grad_color * c * (1 - c)
        grads["color2.w"] = cache["a3"].T @ g_h4
        grads["color2.b"] = g_h4.sum(0)
        g_h3 = (g_h4 @ params["color2.w"].T) * (cache["h3"] > 0)
        grads["color1.w"] = cache["a2"].T @ g_h3
        grads["color1.b"] = g_h3.sum(0)
        g_h2 = (g_h3 @ params["color1.w"].T) * (cache["h2"] > 0)
        grads["color0.w"] = cache["xc"].T @ g_h2
        grads["color0.b"] = g_h2.sum(0)
        g_o1[:, 1:] = (g_h2 @ params["color0.w"].T)[:, :GEO_DIM]
    else:
        for name in ("color0", "color1", "color2"):
            grads[f"{name}.w"] = np.zeros_like(params[f"{name}.w"])
            grads[f"{name}.b"] = np.zeros_like(params[f"{name}.b"])
    raw = cache["raw"]
    inside = (raw > -cache["clamp"]) & (raw < cache["clamp"])
    g_o1[:, 0] = grad_density * cache["density"] * inside
    grads["density1.w"] = cache["a0"].T @ g_o1
    grads["density1.b"] = g_o1.sum(0)
    g_h0 = (g_o1 @ params["density1.w"].T) * (cache["h0"] > 0)
    grads["density0.w"] = cache["feats"].T @ g_h0
    grads["density0.b"] = g_h0.sum(0)
    g_feats = g_h0 @ params["density0.w"].T
    return grads, g_feats


@dataclass
class FieldSample:
    density: float
    color: np.ndarray
    geo_feature: np.ndarray


def decode(feature, direction, params, cfg: FieldConfig) -> FieldSample:
    """Decode one feature vector and view direction."""
    feats = np.asarray(feature)[None]
    if feats.shape[1] != cfg.feature_dim:
        raise ValueError(f"feature dimension {feats.shape[1]} != {cfg.feature_dim}")
    sh = sh_encode(np.asarray(direction, dtype=feats.dtype))[None]
    density, color, cache = mlp_forward(params, feats, sh, cfg.density_clamp)
    return FieldSample(float(density[0]), color[0], cache["xc"][0, :GEO_DIM].copy())


# ---------------------------------------------------------------------------
# featurization


def query_coords(means, covs, planes: geometry.PlaneSet, cfg: FieldConfig):
    """Ripmap query coordinates ``(N, P, 4)`` for ``N`` Gaussians on every plane."""
    mu, var = geometry.project_batch(means, covs, planes.projection_matrix)
    levels = (int(math.log2(cfg.grid_w)) + 1, int(math.log2(cfg.grid_h)) + 1)
    off_x, off_y = cfg.level_offsets
    r, w = cfg.scene_radius, cfg.mass_factor
    if EncodingMode(cfg.encoding_mode) is EncodingMode.ISOTROPIC_MIPMAP:
        var = np.repeat(var.mean(axis=-1, keepdims=True), 2, axis=-1)
    return ripmap.derive_query(mu, var, r, w, levels, level_offset=np.array([off_x, off_y]))


def featurize(g: geometry.Gaussian3, planes: geometry.PlaneSet, ripmaps, cfg: FieldConfig):
    """Concatenated per-plane features of one Gaussian from a list of :class:`Ripmap`."""
    if len(ripmaps) != len(planes):
        raise ValueError("need one ripmap per plane")
    coords = query_coords(g.mean[None], g.cov[None], planes, cfg)[0]
    out = []
    for rm, c in zip(ripmaps, coords):
        out.append(rm.query(ripmap.RipmapQuery(c[:2], c[2:])))
    return np.concatenate(out)


class FieldModel:
    """Parameter bundle (per-plane ripmap bases + MLP) with batched forward/backward."""

    def __init__(self, cfg: FieldConfig, rng=None, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.planes = geometry.platonic_plane_set(cfg.solid)
        self.layout = ripmap.RipmapLayout(cfg.grid_h, cfg.grid_w, cfg.channels)
        rng = np.random.default_rng(0) if rng is None else rng
        shape = (len(self.planes), cfg.grid_h, cfg.grid_w, cfg.channels)
        self.ripmaps = rng.uniform(-0.01, 0.01, shape).astype(self.dtype)
        self.mlp = init_mlp(cfg, rng, self.dtype)
        self._packed = None

    # parameters -----------------------------------------------------------

    def parameters(self):
        """Name -> array, in a fixed order (ripmaps first)."""
        out = {"ripmaps": self.ripmaps}
        out.update((f"mlp.{k}", v) for k, v in self.mlp.items())
        return out

    def set_parameters(self, params):
        self.ripmaps = np.ascontiguousarray(params["ripmaps"], dtype=self.dtype)
        for k in self.mlp:
            self.mlp[k] = np.ascontiguousarray(params[f"mlp.{k}"], dtype=self.dtype)
        self.mark_dirty()

    def parameter_count(self):
        return sum(v.size for v in self.parameters().values())

    def mark_dirty(self):
        self._packed = None

    @property
    def packed(self):
        if self._packed is None:
            self._packed = ripmap.pack_pyramid(self.ripmaps)
        return self._packed

    def plane_ripmaps(self):
        return [ripmap.build_pyramid(b) for b in self.ripmaps]

    # forward / backward ---------------------------------------------------

    def features(self, means, covs):
        coords = query_coords(means, covs, self.planes, self.cfg)
        feats = ripmap.query_packed(self.packed, self.layout, coords)
        return feats.reshape(feats.shape[0], -1), coords

    def forward(self, means, covs, directions=None, need_color=True):
        """Evaluate ``N`` Gaussians. Returns ``(density, color, cache)``."""
        feats, coords = self.features(means, covs)
        sh = sh_encode(directions).astype(self.dtype) if need_color else None
        density, color, cache = mlp_forward(self.mlp, feats, sh, self.cfg.density_clamp,
                                            need_color=need_color)
        cache["coords"] = coords
        return density, color, cache

    def backward(self, cache, grad_density, grad_color=None):
        """Gradients for every parameter, keyed like :meth:`parameters`."""
        grad_density = np.asarray(grad_density, dtype=self.dtype)
        if grad_color is not None:
            grad_color = np.asarray(grad_color, dtype=self.dtype)
        mlp_grads, g_feats = mlp_backward(self.mlp, cache, grad_density, grad_color)
        n = g_feats.shape[0]
        g_packed = np.zeros((len(self.planes), self.layout.total), dtype=self.dtype)
        ripmap.query_packed_backward(
            self.layout, cache["coords"],
            g_feats.reshape(n, len(self.planes), self.cfg.channels), g_packed,
        )
        grads = {"ripmaps": ripmap.pyramid_backward(g_packed, self.layout)}
        grads.update((f"mlp.{k}", v) for k, v in mlp_grads.items())
        return grads

    def density(self, means, covs):
        return self.forward(means, covs, need_color=False)[0]
