"""Pure numpy implementations of the ripmap query kernels.

Signatures mirror the compiled ``_kernels`` module exactly.  ``coords`` is
``(N, P, 4)`` holding ``(u_x, u_y, l_x, l_y)`` with ``u`` in ``[0, 1]`` and
levels already clamped to the pyramid range.
"""

import numpy as np


def _vertices(offsets, widths, heights, n_lx, n_ly, channels, coords):
    """Flat packed indices (N, P, 16) and weights (N, P, 16) of the 16 vertices."""
    ux, uy, lx, ly = (coords[..., k] for k in range(4))
    i0 = np.clip(np.floor(lx).astype(np.int64), 0, n_lx - 1)
    j0 = np.clip(np.floor(ly).astype(np.int64), 0, n_ly - 1)
    fi = lx - i0
    fj = ly - j0
    i1 = np.minimum(i0 + 1, n_lx - 1)
    j1 = np.minimum(j0 + 1, n_ly - 1)

    idx = []
    wts = []
    for i, wi in ((i0, 1.0 - fi), (i1, fi)):
        for j, wj in ((j0, 1.0 - fj), (j1, fj)):
            lvl = i * n_ly + j
            w = widths[lvl]
            h = heights[lvl]
            x = np.clip(ux * w - 0.5, 0.0, w - 1)
            y = np.clip(uy * h - 0.5, 0.0, h - 1)
            x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
            y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
            fx = x - x0
            fy = y - y0
            x1 = np.minimum(x0 + 1, w - 1)
            y1 = np.minimum(y0 + 1, h - 1)
            base = offsets[lvl]
            wl = wi * wj
            for yy, wy in ((y0, 1.0 - fy), (y1, fy)):
                for xx, wx in ((x0, 1.0 - fx), (x1, fx)):
                    idx.append(base + (yy * w + xx) * channels)
                    wts.append(wl * wy * wx)
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1)


def ripmap_forward(packed, offsets, widths, heights, n_lx, n_ly, channels, coords, out):
    n, p = coords.shape[:2]
    idx, wts = _vertices(offsets, widths, heights, n_lx, n_ly, channels, coords)
    idx = idx + (np.arange(p) * packed.shape[1])[None, :, None]
    flat = packed.reshape(-1)
    gathered = flat[idx[..., None] + np.arange(channels)]  # (N, P, 16, C)
    out[...] = np.einsum("npv,npvc->npc", wts.astype(packed.dtype), gathered)


def ripmap_backward(packed_shape, offsets, widths, heights, n_lx, n_ly, channels, coords,
                    grad_out, grad_packed):
    n, p = coords.shape[:2]
    idx, wts = _vertices(offsets, widths, heights, n_lx, n_ly, channels, coords)
    idx = idx + (np.arange(p) * grad_packed.shape[1])[None, :, None]
    contrib = wts[..., None] * grad_out[:, :, None, :]  # (N, P, 16, C)
    full = (idx[..., None] + np.arange(channels)).reshape(-1)
    acc = np.bincount(full, weights=contrib.reshape(-1), minlength=grad_packed.size)
    grad_packed += acc.reshape(grad_packed.shape).astype(grad_packed.dtype)
