"""Cone casting, Platonic-solid plane sets and Gaussian projection.

Conical frustums are approximated by 3D Gaussians whose moments are the
exact first/second moments of the frustum volume.  The Gaussians are then
orthogonally projected onto the face planes of a Platonic solid, one plane
per pair of parallel faces.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

_GOLDEN = (1.0 + 5.0 ** 0.5) / 2.0

X_AXIS = np.array([1.0, 0.0, 0.0])
Y_AXIS = np.array([0.0, 1.0, 0.0])
Z_AXIS = np.array([0.0, 0.0, 1.0])


class GeometryError(ValueError):
    """Raised for invalid rays, intervals or degenerate geometry."""


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel_radius: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not np.linalg.norm(d) > 0.0:
            raise GeometryError("ray direction must have positive norm")
        if not self.pixel_radius > 0.0:
            raise GeometryError("pixel_radius must be positive")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class FrustumInterval:
    t_near: float
    t_far: float

    def __post_init__(self):
        check_interval(self.t_near, self.t_far)


@dataclass(frozen=True)
class Gaussian3:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class Gaussian2:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def std(self) -> np.ndarray:
        """Per-axis standard deviations (square root of the diagonal)."""
        return np.sqrt(np.maximum(np.diagonal(self.cov), 0.0))


def check_interval(t0, t1):
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    if np.any(~(t0 > 0.0)):
        raise GeometryError("frustum interval requires t0 > 0")
    if np.any(~(t1 - t0 > 1e-8 * t0)):
        raise GeometryError("frustum interval requires t1 > t0 (width > 1e-8 * t0)")


def frustum_moments_raw(t0, t1, pixel_radius):
    """Frustum moments straight from the power-sum formulas.

    Loses precision for thin frustums; kept as a cross-check for
    :func:`frustum_moments`.
    """
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    d3 = t1 ** 3 - t0 ** 3
    d4 = t1 ** 4 - t0 ** 4
    d5 = t1 ** 5 - t0 ** 5
    mu_t = 3.0 * d4 / (4.0 * d3)
    var_t = 3.0 * d5 / (5.0 * d3) - mu_t ** 2
    var_r = np.asarray(pixel_radius) ** 2 * (3.0 * d5 / (20.0 * d3))
    return mu_t, var_t, var_r


def frustum_moments(t0, t1, pixel_radius):
    """Return ``(mu_t, var_t, var_r)`` of the conical frustum ``[t0, t1]``.

    Algebraically identical to :func:`frustum_moments_raw`, rewritten in
    terms of the interval midpoint and half-width so thin frustums do not
    cancel catastrophically.
    """
    t0 = np.asarray(t0)
    t1 = np.asarray(t1)
    mid = 0.5 * (t0 + t1)
    hw = 0.5 * (t1 - t0)
    mid2 = mid * mid
    hw2 = hw * hw
    denom = 3.0 * mid2 + hw2
    mu_t = mid + 2.0 * mid * hw2 / denom
    var_t = hw2 / 3.0 - (4.0 / 15.0) * (hw2 * hw2 * (12.0 * mid2 - hw2)) / (denom * denom)
    var_r = np.asarray(pixel_radius) ** 2 * (
        mid2 / 4.0 + (5.0 / 12.0) * hw2 - (4.0 / 15.0) * hw2 * hw2 / denom
    )
    return mu_t, var_t, var_r


def cone_cast_batch(origins, directions, radii, t0, t1):
    """Vectorised cone casting.

    ``origins``/``directions`` are ``(N, 3)``, ``radii``/``t0``/``t1`` are
    ``(N,)``.  Returns ``(means (N, 3), covs (N, 3, 3))``.
    """
    mu_t, var_t, var_r = frustum_moments(t0, t1, radii)
    d = directions
    means = origins + mu_t[:, None] * d
    dd = d[:, :, None] * d[:, None, :]
    d_sq = np.sum(d * d, axis=-1)
    eye = np.eye(3, dtype=d.dtype)
    covs = var_t[:, None, None] * dd + var_r[:, None, None] * (eye - dd / d_sq[:, None, None])
    return means, covs


def cone_cast_gaussian(ray: Ray, interval: FrustumInterval) -> Gaussian3:
    mean, cov = cone_cast_batch(
        ray.origin[None],
        ray.direction[None],
        np.array([ray.pixel_radius]),
        np.array([interval.t_near], dtype=np.float64),
        np.array([interval.t_far], dtype=np.float64),
    )
    cov = 0.5 * (cov[0] + cov[0].T)
    return Gaussian3(mean[0], cov)


class Solid(str, enum.Enum):
    TETRAHEDRON = "tetrahedron"
    CUBE = "cube"
    OCTAHEDRON = "octahedron"
    DODECAHEDRON = "dodecahedron"
    ICOSAHEDRON = "icosahedron"


PLANE_COUNTS = {
    Solid.TETRAHEDRON: 4,
    Solid.CUBE: 3,
    Solid.OCTAHEDRON: 4,
    Solid.DODECAHEDRON: 6,
    Solid.ICOSAHEDRON: 10,
}


def _signed_perms(base):
    """All sign choices of the nonzero entries of ``base`` (deduplicated)."""
    out = []
    base = np.asarray(base, dtype=np.float64)
    nz = np.flatnonzero(base)
    for mask in range(1 << len(nz)):
        v = base.copy()
        for bit, idx in enumerate(nz):
            if mask >> bit & 1:
                v[idx] = -v[idx]
        out.append(v)
    return out


def _cyclic(v):
    a, b, c = v
    return [np.array([a, b, c]), np.array([c, a, b]), np.array([b, c, a])]


def solid_vertices(solid) -> np.ndarray:
    """Vertices of the canonical (unit-circumradius) Platonic solid."""
    solid = Solid(solid)
    g = _GOLDEN
    if solid is Solid.TETRAHEDRON:
        v = [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]
    elif solid is Solid.CUBE:
        v = _signed_perms([1, 1, 1])
    elif solid is Solid.OCTAHEDRON:
        v = [s for e in np.eye(3) for s in _signed_perms(e)]
    elif solid is Solid.ICOSAHEDRON:
        v = [p for s in _signed_perms([0, 1, g]) for p in _cyclic(s)]
    else:
        v = _signed_perms([1, 1, 1]) + [
            p for s in _signed_perms([0, g, 1 / g]) for p in _cyclic(s)
        ]
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# Face normals of a Platonic solid are the vertex directions of its dual.
_DUAL = {
    Solid.TETRAHEDRON: Solid.TETRAHEDRON,
    Solid.CUBE: Solid.OCTAHEDRON,
    Solid.OCTAHEDRON: Solid.CUBE,
    Solid.DODECAHEDRON: Solid.ICOSAHEDRON,
    Solid.ICOSAHEDRON: Solid.DODECAHEDRON,
}


def face_normals(solid) -> np.ndarray:
    """Outward unit normals of every face of ``solid``."""
    solid = Solid(solid)
    if solid is Solid.TETRAHEDRON:
        # the face opposite vertex v has outward normal -v
        return -solid_vertices(solid)
    return solid_vertices(_DUAL[solid])


def _canonical_sign(n):
    nz = np.flatnonzero(np.abs(n) > 1e-12)
    return n if n[nz[-1]] > 0 else -n


def unparalleled_normals(solid) -> np.ndarray:
    normals = face_normals(solid)
    keep = []
    for n in normals:
        if any(abs(float(n @ k)) > 1.0 - 1e-9 for k in keep):
            continue
        keep.append(n)
    if Solid(solid) is not Solid.TETRAHEDRON:
        keep = [_canonical_sign(n) for n in keep]
    return np.array(keep)


def plane_axes(normal):
    """In-plane axes ``(x, y)`` for a unit plane normal.

    ``x = X, y = Y`` for the +Z normal, ``x = X, y = -Y`` for -Z, otherwise
    ``x = normalize(Z x n)`` and ``y = x x n``.
    """
    n = np.asarray(normal, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise GeometryError("plane normal must be unit length")
    x = np.cross(Z_AXIS, n)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        if n[2] > 0:
            return X_AXIS.copy(), Y_AXIS.copy()
        return X_AXIS.copy(), -Y_AXIS
    x = x / nx
    y = np.cross(x, n)
    return x, y / np.linalg.norm(y)


@dataclass(frozen=True)
class PlaneBasis:
    normal: np.ndarray
    axis_x: np.ndarray
    axis_y: np.ndarray

    @property
    def projection(self) -> np.ndarray:
        return np.stack([self.axis_x, self.axis_y], axis=1)

    @classmethod
    def from_normal(cls, normal):
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        x, y = plane_axes(n)
        return cls(n, x, y)


@dataclass(frozen=True)
class PlaneSet:
    solid: Solid
    planes: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.planes)

    def __iter__(self):
        return iter(self.planes)

    @property
    def projection_matrix(self) -> np.ndarray:
        """``(3, 2P)`` matrix whose column pairs are each plane's ``(x, y)``."""
        return np.concatenate([p.projection for p in self.planes], axis=1)

    @property
    def normals(self) -> np.ndarray:
        return np.stack([p.normal for p in self.planes])


def platonic_plane_set(solid) -> PlaneSet:
    solid = Solid(solid)
    planes = tuple(PlaneBasis.from_normal(n) for n in unparalleled_normals(solid))
    assert len(planes) == PLANE_COUNTS[solid]
    return PlaneSet(solid, planes)


def project_gaussian(g: Gaussian3, plane: PlaneBasis) -> Gaussian2:
    m = plane.projection
    cov = m.T @ g.cov @ m
    return Gaussian2(m.T @ g.mean, 0.5 * (cov + cov.T))


def project_batch(means, covs, proj):
    """Project ``N`` Gaussians onto ``P`` planes at once.

    ``proj`` is the ``(3, 2P)`` stacked projection matrix.  Returns the
    projected means ``(N, P, 2)`` and the diagonal of each projected
    covariance ``(N, P, 2)``; off-diagonal terms are not needed by the
    axis-aligned encoders.
    """
    n = means.shape[0]
    mu = (means @ proj).reshape(n, -1, 2)
    var = np.einsum("nij,ik,jk->nk", covs, proj, proj, optimize=True).reshape(n, -1, 2)
    return mu, np.maximum(var, 0.0)
