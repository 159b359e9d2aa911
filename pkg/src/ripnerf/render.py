"""Ray generation, occupancy-grid marching and differentiable compositing.

Cameras use the OpenCV convention (x right, y down, looking along +z) with
a camera-to-world pose.  Ray directions are not normalised: their camera
frame z component is 1, so ``t`` is depth and the cone radius at parameter
``t`` is ``pixel_radius * t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Ray, cone_cast_batch

TRANSMITTANCE_CUTOFF = 1e-4
OCCUPANCY_THRESHOLD = 0.005


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if (np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(rot) - 1.0) > 1e-9):
            raise ValueError("camera rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))

    def scaled(self, s):
        """The same camera at ``1/s`` resolution."""
        if self.width % s or self.height % s:
            raise ValueError(f"scale {s} does not divide {self.width}x{self.height}")
        return replace(self, fx=self.fx / s, fy=self.fy / s, cx=self.cx / s, cy=self.cy / s,
                       width=self.width // s, height=self.height // s)

    @property
    def pixel_radius(self):
        """Cone radius at unit depth: a pixel's width scaled by ``2 / sqrt(12)``."""
        return 2.0 / math.sqrt(12.0) / self.fx

    @property
    def c2w(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    radii: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Ray(self.origins[i], self.directions[i], float(self.radii[i]))
        return RayBatch(self.origins[i], self.directions[i], self.radii[i])

    @staticmethod
    def concat(batches):
        return RayBatch(*(np.concatenate([getattr(b, k) for b in batches])
                          for k in ("origins", "directions", "radii")))


def generate_rays(camera: Camera, pixels=None, scale=1) -> RayBatch:
    """Rays through pixel centres of ``camera`` downscaled by ``scale``.

    ``pixels`` is ``(M, 2)`` of ``(row, col)``; ``None`` means every pixel in
    row-major order.
    """
    cam = camera.scaled(scale) if scale != 1 else camera
    if pixels is None:
        rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
    pixels = np.asarray(pixels)
    if pixels.size and (pixels.min() < 0 or np.any(pixels.max(0) >= (cam.height, cam.width))):
        raise ValueError("pixel out of range")
    d_cam = np.stack([
        (pixels[:, 1] + 0.5 - cam.cx) / cam.fx,
        (pixels[:, 0] + 0.5 - cam.cy) / cam.fy,
        np.ones(len(pixels)),
    ], axis=1)
    dirs = d_cam @ cam.rotation.T
    origins = np.broadcast_to(cam.translation, dirs.shape).copy()
    radii = np.full(len(pixels), cam.pixel_radius)
    return RayBatch(origins, dirs, radii)


# ---------------------------------------------------------------------------
# occupancy grid


class OccupancyGrid:
    """Binary occupancy over ``[-r, r]^3`` with a decaying density cache."""

    def __init__(self, resolution=64, half_extent=1.5, threshold=OCCUPANCY_THRESHOLD,
                 decay=0.95):
        self.resolution = int(resolution)
        self.half_extent = float(half_extent)
        self.threshold = threshold
        self.decay = decay
        r = self.resolution
        self.cell_size = 2.0 * self.half_extent / r
        idx = np.arange(r)
        lo = -self.half_extent + idx * self.cell_size
        hi = lo + self.cell_size
        # squared distance from the origin to the nearest point of each cell, per axis
        near = np.where(lo > 0, lo, np.where(hi < 0, hi, 0.0)) ** 2
        dist2 = near[:, None, None] + near[None, :, None] + near[None, None, :]
        self.in_sphere = dist2 < self.half_extent ** 2
        self.density = np.zeros((r, r, r))
        self.occupied = self.in_sphere.copy()

    def cell_index(self, points):
        ijk = np.floor((points + self.half_extent) / self.cell_size).astype(np.int64)
        return ijk

    def query(self, points):
        """Occupancy flag for ``(N, 3)`` points; points outside the grid are empty."""
        ijk = self.cell_index(points)
        inside = np.all((ijk >= 0) & (ijk < self.resolution), axis=-1)
        out = np.zeros(points.shape[:-1], dtype=bool)
        sel = ijk[inside]
        out[inside] = self.occupied[sel[:, 0], sel[:, 1], sel[:, 2]]
        return out

    def cell_centers(self):
        c = -self.half_extent + (np.arange(self.resolution) + 0.5) * self.cell_size
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)

    def fill(self, occupied=True):
        self.occupied = self.in_sphere & bool(occupied)

    def refresh(self, density_fn, rng, chunk=65536):
        """One full sweep: cache <- max(cache * decay, density at a jittered point)."""
        ijk = np.argwhere(self.in_sphere)
        jitter = rng.uniform(0.0, 1.0, ijk.shape)
        pts = -self.half_extent + (ijk + jitter) * self.cell_size
        new = np.empty(len(pts))
        for s in range(0, len(pts), chunk):
            new[s:s + chunk] = density_fn(pts[s:s + chunk])
        cache = self.density[self.in_sphere] * self.decay
        self.density[self.in_sphere] = np.maximum(cache, new)
        self.occupied = self.in_sphere & (self.density > self.threshold)

    def state(self):
        return {"density": self.density, "occupied": self.occupied}


@dataclass
class OccupancySchedule:
    every: int = 16
    warmup: int = 256


def update_occupancy(grid: OccupancyGrid, density_fn, step, rng,
                     schedule: OccupancySchedule = OccupancySchedule()):
    """Apply the update cadence: all in-sphere cells occupied during warmup,
    then a full refresh every ``schedule.every`` steps."""
    if step < schedule.warmup:
        grid.fill(True)
        return False
    if (step - schedule.warmup) % schedule.every:
        return False
    grid.refresh(density_fn, rng)
    return True


def field_density_fn(model, grid: OccupancyGrid):
    """Density of ``model`` at points, using a cell-sized isotropic Gaussian."""
    var = grid.cell_size ** 2 / 12.0

    def fn(points):
        covs = np.broadcast_to(np.eye(3) * var, (len(points), 3, 3))
        return model.density(points, covs)

    return fn


# ---------------------------------------------------------------------------
# marching


@dataclass
class MarchResult:
    """Dense per-ray samples; ``mask`` marks real intervals, left-packed."""

    t0: np.ndarray
    t1: np.ndarray
    mask: np.ndarray

    @property
    def counts(self):
        return self.mask.sum(axis=1)

    def intervals(self, ray_index):
        from .geometry import FrustumInterval

        m = self.mask[ray_index]
        return [FrustumInterval(float(a), float(b))
                for a, b in zip(self.t0[ray_index][m], self.t1[ray_index][m])]


def default_step(radius, steps=1024):
    """World-space step so the grid diagonal ``2 sqrt(3) r`` spans ``steps`` samples."""
    return 2.0 * math.sqrt(3.0) * radius / steps


def sphere_interval(origins, directions, radius, near=1e-3):
    """Ray parameters where each ray is inside the sphere; ``t_exit <= t_enter`` means a miss."""
    a = np.sum(directions * directions, axis=1)
    b = 2.0 * np.sum(origins * directions, axis=1)
    c = np.sum(origins * origins, axis=1) - radius ** 2
    disc = b * b - 4 * a * c
    ok = disc > 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_enter = np.where(ok, (-b - sq) / (2 * a), np.inf)
    t_exit = np.where(ok, (-b + sq) / (2 * a), -np.inf)
    return np.maximum(t_enter, near), t_exit


def march(rays: RayBatch, grid: OccupancyGrid | None, step, max_samples=1024,
          radius=None) -> MarchResult:
    """Uniform intervals of world length ``step`` across the bounding sphere,
    dropping those whose midpoint lies in an unoccupied cell."""
    radius = grid.half_extent if radius is None else radius
    o, d = rays.origins, rays.directions
    norm = np.linalg.norm(d, axis=1)
    t_enter, t_exit = sphere_interval(o, d, radius)
    hit = t_exit > t_enter
    t_enter = np.where(hit, t_enter, 0.0)
    t_exit = np.where(hit, t_exit, 0.0)
    dt = step / norm
    span = t_exit - t_enter
    n = np.minimum(np.ceil(span / dt - 1e-9).astype(np.int64), max_samples)
    n = np.maximum(n, 0)
    k_max = int(n.max()) if len(n) else 0
    if k_max == 0:
        z = np.zeros((len(rays), 0))
        return MarchResult(z, z.copy(), z.astype(bool))
    k = np.arange(k_max + 1)
    edges = np.minimum(t_enter[:, None] + k[None, :] * dt[:, None], t_exit[:, None])
    t0, t1 = edges[:, :-1], edges[:, 1:]
    k = k[:-1]
    mask = k[None, :] < n[:, None]
    if grid is not None:
        mid = 0.5 * (t0 + t1)
        pts = o[:, None, :] + mid[..., None] * d[:, None, :]
        mask &= grid.query(pts.reshape(-1, 3)).reshape(mask.shape)
    mask &= t1 > t0
    return _compact(t0, t1, mask)


def _compact(t0, t1, mask):
    counts = mask.sum(axis=1)
    k_new = int(counts.max()) if len(counts) else 0
    order = np.argsort(~mask, axis=1, kind="stable")[:, :k_new]
    t0 = np.take_along_axis(t0, order, axis=1)
    t1 = np.take_along_axis(t1, order, axis=1)
    mask = np.arange(k_new)[None, :] < counts[:, None]
    return MarchResult(np.where(mask, t0, 0.0), np.where(mask, t1, 0.0), mask)


def sample_gaussians(rays: RayBatch, samples: MarchResult):
    """Cone-cast every valid interval. Returns ``(ray_idx, means, covs, deltas)``."""
    ray_idx, _ = np.nonzero(samples.mask)
    t0 = samples.t0[samples.mask]
    t1 = samples.t1[samples.mask]
    d = rays.directions[ray_idx]
    means, covs = cone_cast_batch(rays.origins[ray_idx], d, rays.radii[ray_idx], t0, t1)
    deltas = (t1 - t0) * np.linalg.norm(d, axis=1)
    return ray_idx, means, covs, deltas


# ---------------------------------------------------------------------------
# compositing


@dataclass
class CompositeCache:
    optical: np.ndarray   # tau * delta, (R, K)
    trans: np.ndarray     # transmittance before each sample, (R, K)
    weights: np.ndarray   # T_k * alpha_k, (R, K)
    t_final: np.ndarray   # (R,)
    colors: np.ndarray    # (R, K, 3)
    background: np.ndarray


def composite(density, delta, colors, background):
    """Alpha-composite ``R`` rays of ``K`` samples. Returns ``(rgb, opacity, cache)``."""
    x = density * delta
    excl = np.cumsum(x, axis=1) - x
    trans = np.exp(-excl)
    alpha = -np.expm1(-x)
    weights = trans * alpha
    total = excl[:, -1] + x[:, -1] if x.shape[1] else np.zeros(x.shape[0])
    t_final = np.exp(-total)
    bg = np.asarray(background, dtype=colors.dtype)
    rgb = np.einsum("rk,rkc->rc", weights, colors) + t_final[:, None] * bg
    cache = CompositeCache(x, trans, weights, t_final, colors, bg)
    return rgb, 1.0 - t_final, cache


def composite_backward(cache: CompositeCache, delta, grad_rgb, grad_opacity=None):
    """Gradients of a scalar loss w.r.t. per-sample density and color."""
    w = cache.weights
    grad_colors = w[..., None] * grad_rgb[:, None, :]
    # S_k = sum_{j>k} w_j c_j + T_final * bg, projected on the upstream gradient
    wc = np.einsum("rk,rkc,rc->rk", w, cache.colors, grad_rgb)
    suffix = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
    suffix = suffix + cache.t_final[:, None] * (grad_rgb @ cache.background)[:, None]
    trans_next = cache.trans * np.exp(-cache.optical)
    own = trans_next * np.einsum("rkc,rc->rk", cache.colors, grad_rgb)
    g_x = own - suffix
    if grad_opacity is not None:
        g_x = g_x + (cache.t_final * grad_opacity)[:, None]
    return g_x * delta, grad_colors


# ---------------------------------------------------------------------------
# forward-only rendering


@dataclass
class RenderOptions:
    step: float = default_step(1.5)
    max_samples: int = 1024
    background: tuple = (1.0, 1.0, 1.0)
    cutoff: float = TRANSMITTANCE_CUTOFF
    chunk_rays: int = 8192
    chunk_samples: int = 64


def render_rays(model, rays: RayBatch, grid: OccupancyGrid | None, opts: RenderOptions):
    """Render colors ``(R, 3)`` and opacity ``(R,)`` with early ray termination."""
    rgb = np.zeros((len(rays), 3))
    opacity = np.zeros(len(rays))
    for s in range(0, len(rays), opts.chunk_rays):
        sub = rays[s:s + opts.chunk_rays]
        c, a = _render_chunk(model, sub, grid, opts)
        rgb[s:s + len(sub)] = c
        opacity[s:s + len(sub)] = a
    return rgb, opacity


def _render_chunk(model, rays, grid, opts):
    samples = march(rays, grid, opts.step, opts.max_samples, radius=model.cfg.scene_radius)
    n_rays = len(rays)
    acc = np.zeros((n_rays, 3))
    trans = np.ones(n_rays)
    k_total = samples.mask.shape[1]
    unit_dirs = rays.directions / np.linalg.norm(rays.directions, axis=1, keepdims=True)
    for k0 in range(0, k_total, opts.chunk_samples):
        live = trans > opts.cutoff
        if not live.any():
            break
        block = samples.mask[:, k0:k0 + opts.chunk_samples] & live[:, None]
        r_idx, k_idx = np.nonzero(block)
        if len(r_idx) == 0:
            continue
        t0 = samples.t0[:, k0:][r_idx, k_idx]
        t1 = samples.t1[:, k0:][r_idx, k_idx]
        d = rays.directions[r_idx]
        means, covs = cone_cast_batch(rays.origins[r_idx], d, rays.radii[r_idx], t0, t1)
        dens, col, _ = model.forward(means, covs, unit_dirs[r_idx])
        kb = block.shape[1]
        dense_tau = np.zeros((n_rays, kb))
        dense_delta = np.zeros((n_rays, kb))
        dense_col = np.zeros((n_rays, kb, 3))
        dense_tau[r_idx, k_idx] = dens
        dense_delta[r_idx, k_idx] = (t1 - t0) * np.linalg.norm(d, axis=1)
        dense_col[r_idx, k_idx] = col
        rgb_b, _, cache = composite(dense_tau, dense_delta, dense_col, np.zeros(3))
        acc += trans[:, None] * rgb_b
        trans = trans * cache.t_final
    bg = np.asarray(opts.background, dtype=np.float64)
    return acc + trans[:, None] * bg, 1.0 - trans
