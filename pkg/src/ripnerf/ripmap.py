"""Learnable ripmap encoding.

A ripmap is a 2D pyramid of feature grids where level ``(i, j)`` has been
average-pooled ``i`` times along x (width) and ``j`` times along y
(height).  Only the base grid is learnable; every other level is derived
from it.  Queries interpolate tetra-linearly over ``(x, y, level_x,
level_y)``, touching 16 stored cells.

Packed layout: all levels of one grid are stored contiguously in a single
1D array, level ``(i, j)`` at ``offsets[i * L_y + j]`` in row-major
``(rows=y, cols=x, channel)`` order.  Several grids of identical shape are
stacked as ``(P, total)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from . import kernels


class RipmapError(ValueError):
    pass


def _is_pow2(n):
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class RipmapLayout:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if not (_is_pow2(self.height) and _is_pow2(self.width)):
            raise RipmapError(
                f"grid dimensions must be powers of two, got {self.height}x{self.width}"
            )
        if self.channels < 1:
            raise RipmapError("channels must be positive")

    @property
    def levels_x(self):
        return int(np.log2(self.width)) + 1

    @property
    def levels_y(self):
        return int(np.log2(self.height)) + 1

    def level_shape(self, i, j):
        return self.height >> j, self.width >> i, self.channels

    @cached_property
    def tables(self):
        """``(offsets, widths, heights)`` int64 arrays indexed by ``i * L_y + j``."""
        offsets, widths, heights = [], [], []
        pos = 0
        for i in range(self.levels_x):
            for j in range(self.levels_y):
                h, w, c = self.level_shape(i, j)
                offsets.append(pos)
                widths.append(w)
                heights.append(h)
                pos += h * w * c
        return (
            np.array(offsets, dtype=np.int64),
            np.array(widths, dtype=np.int64),
            np.array(heights, dtype=np.int64),
        )

    @cached_property
    def total(self):
        return sum(
            int(np.prod(self.level_shape(i, j)))
            for i in range(self.levels_x)
            for j in range(self.levels_y)
        )


def avg_pool_x(grid):
    """Average adjacent column pairs: ``(..., H, W, C) -> (..., H, W/2, C)``."""
    return 0.5 * (grid[..., :, 0::2, :] + grid[..., :, 1::2, :])


def avg_pool_y(grid):
    """Average adjacent row pairs: ``(..., H, W, C) -> (..., H/2, W, C)``."""
    return 0.5 * (grid[..., 0::2, :, :] + grid[..., 1::2, :, :])


def pyramid_levels(base):
    """All levels of the pyramid as a nested list ``levels[i][j]``.

    Works on a single ``(H, W, C)`` grid or a stack ``(P, H, W, C)``.
    """
    layout = RipmapLayout(*base.shape[-3:])
    levels = []
    row = base
    for i in range(layout.levels_x):
        if i > 0:
            row = avg_pool_x(row)
        col = [row]
        for _ in range(1, layout.levels_y):
            col.append(avg_pool_y(col[-1]))
        levels.append(col)
    return levels


def pack_pyramid(bases):
    """Build and pack the pyramids of a ``(P, H, W, C)`` stack into ``(P, total)``."""
    p = bases.shape[0]
    levels = pyramid_levels(bases)
    return np.ascontiguousarray(
        np.concatenate([lvl.reshape(p, -1) for col in levels for lvl in col], axis=1)
    )


def unpack_level(packed, layout: RipmapLayout, i, j):
    offsets, _, _ = layout.tables
    h, w, c = layout.level_shape(i, j)
    start = offsets[i * layout.levels_y + j]
    return packed[..., start:start + h * w * c].reshape(packed.shape[:-1] + (h, w, c))


def pyramid_backward(grad_packed, layout: RipmapLayout):
    """Chain a gradient on every packed level back to the base grids.

    Reverses the construction order: the y-pooling chains of each column
    first, then the x-pooling chain along ``j = 0``.
    """
    p = grad_packed.shape[0]
    g = [
        [unpack_level(grad_packed, layout, i, j).copy() for j in range(layout.levels_y)]
        for i in range(layout.levels_x)
    ]
    for i in range(layout.levels_x):
        for j in range(layout.levels_y - 1, 0, -1):
            g[i][j - 1] += 0.5 * np.repeat(g[i][j], 2, axis=-3)
    for i in range(layout.levels_x - 1, 0, -1):
        g[i - 1][0] += 0.5 * np.repeat(g[i][0], 2, axis=-2)
    return g[0][0].reshape(p, layout.height, layout.width, layout.channels)


class RipmapQuery(NamedTuple):
    pos: np.ndarray
    level: np.ndarray


def derive_query(mean2, var2, scene_radius, mass_factor, levels, level_offset=0.0):
    """Map projected Gaussian moments to ripmap query coordinates.

    ``mean2``/``var2`` are ``(..., 2)`` plane-space means and per-axis
    variances.  Positions map ``[-r, r] -> [0, 1]``; levels are
    ``log2(w * sigma / r) + level_offset``, clamped to ``[0, L - 1]``.
    ``levels`` is ``(L_x, L_y)``; ``level_offset`` may be a scalar or a
    per-axis pair.  Returns a ``(..., 4)`` array
    ``(u_x, u_y, l_x, l_y)``.
    """
    if not scene_radius > 0 or not mass_factor > 0:
        raise RipmapError("scene_radius and mass_factor must be positive")
    mean2 = np.asarray(mean2)
    var2 = np.asarray(var2)
    out = np.empty(mean2.shape[:-1] + (4,), dtype=np.result_type(mean2, var2))
    out[..., :2] = np.clip(mean2 / (2.0 * scene_radius) + 0.5, 0.0, 1.0)
    out[..., 2:] = raw_levels(var2, scene_radius, mass_factor, level_offset)
    np.clip(out[..., 2], 0.0, levels[0] - 1, out=out[..., 2])
    np.clip(out[..., 3], 0.0, levels[1] - 1, out=out[..., 3])
    return out


def raw_levels(var2, scene_radius, mass_factor, level_offset=0.0):
    """Unclamped levels; zero variance maps to ``-inf`` (finest level after clamping)."""
    sigma = np.sqrt(np.maximum(var2, 0.0))
    with np.errstate(divide="ignore"):
        return np.log2(mass_factor * sigma / scene_radius) + level_offset


def query_packed(packed, layout: RipmapLayout, coords):
    """Interpolate ``P`` stacked ripmaps at ``coords (N, P, 4)`` -> ``(N, P, C)``."""
    coords = np.ascontiguousarray(coords, dtype=packed.dtype)
    out = np.empty(coords.shape[:2] + (layout.channels,), dtype=packed.dtype)
    offsets, widths, heights = layout.tables
    kernels.ripmap_forward(
        packed, offsets, widths, heights, layout.levels_x, layout.levels_y,
        layout.channels, coords, out,
    )
    return out


def query_packed_backward(layout: RipmapLayout, coords, grad_out, grad_packed):
    """Accumulate ``d loss / d packed`` into ``grad_packed (P, total)`` in place."""
    coords = np.ascontiguousarray(coords, dtype=grad_packed.dtype)
    grad_out = np.ascontiguousarray(grad_out, dtype=grad_packed.dtype)
    offsets, widths, heights = layout.tables
    kernels.ripmap_backward(
        grad_packed.shape, offsets, widths, heights, layout.levels_x, layout.levels_y,
        layout.channels, coords, grad_out, grad_packed,
    )
    return grad_packed


class Ripmap:
    """A single learnable ripmap with a lazily rebuilt pyramid."""

    def __init__(self, base):
        base = np.array(base, copy=True)
        if base.ndim != 3:
            raise RipmapError("base grid must be (H, W, C)")
        if not np.all(np.isfinite(base)):
            raise RipmapError("base grid contains non-finite values")
        self.layout = RipmapLayout(*base.shape)
        self._base = base
        self._packed = None
        self.dirty = True

    @property
    def base(self):
        return self._base

    @base.setter
    def base(self, value):
        value = np.asarray(value, dtype=self._base.dtype)
        if value.shape != self._base.shape:
            raise RipmapError("base grid shape cannot change")
        self._base = value.copy()
        self.dirty = True

    def mark_dirty(self):
        self.dirty = True

    @property
    def levels_x(self):
        return self.layout.levels_x

    @property
    def levels_y(self):
        return self.layout.levels_y

    @property
    def packed(self):
        if self.dirty or self._packed is None:
            self._packed = pack_pyramid(self._base[None])
            self.dirty = False
        return self._packed

    def level(self, i, j):
        return unpack_level(self.packed[0], self.layout, i, j)

    def _coords(self, q):
        pos = np.asarray(q.pos, dtype=np.float64)
        lvl = np.asarray(q.level, dtype=np.float64)
        coords = np.concatenate(
            [np.clip(pos, 0.0, 1.0),
             np.clip(lvl[..., :1], 0.0, self.levels_x - 1),
             np.clip(lvl[..., 1:], 0.0, self.levels_y - 1)],
            axis=-1,
        )
        return coords.reshape(-1, 1, 4)

    def query(self, q: RipmapQuery):
        """Feature(s) at ``q``; ``q.pos``/``q.level`` may be ``(2,)`` or ``(N, 2)``."""
        single = np.ndim(q.pos) == 1
        out = query_packed(self.packed, self.layout, self._coords(q))[:, 0]
        return out[0] if single else out

    def query_backward(self, q: RipmapQuery, upstream):
        """Gradient of ``upstream . query(q)`` with respect to the base grid."""
        coords = self._coords(q)
        up = np.asarray(upstream, dtype=self._base.dtype).reshape(coords.shape[0], 1, -1)
        grad = np.zeros((1, self.layout.total), dtype=self._base.dtype)
        query_packed_backward(self.layout, coords, up, grad)
        return pyramid_backward(grad, self.layout)[0]


def build_pyramid(base) -> Ripmap:
    rm = Ripmap(base)
    rm.packed  # noqa: B018 - force the build
    return rm
