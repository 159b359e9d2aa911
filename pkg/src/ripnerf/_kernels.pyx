# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ripmap query kernels (16-vertex tetra-linear gather / scatter)."""

from libc.math cimport floor

ctypedef fused real:
    float
    double


cdef inline void _vertices(
    const long long[::1] offsets, const long long[::1] widths, const long long[::1] heights,
    long long n_lx, long long n_ly, long long channels,
    double ux, double uy, double lx, double ly,
    long long* idx, double* wts,
) noexcept nogil:
    cdef long long i0 = <long long>floor(lx)
    cdef long long j0 = <long long>floor(ly)
    if i0 < 0:
        i0 = 0
    if i0 > n_lx - 1:
        i0 = n_lx - 1
    if j0 < 0:
        j0 = 0
    if j0 > n_ly - 1:
        j0 = n_ly - 1
    cdef double fi = lx - i0
    cdef double fj = ly - j0
    cdef long long i1 = i0 + 1 if i0 + 1 < n_lx else n_lx - 1
    cdef long long j1 = j0 + 1 if j0 + 1 < n_ly else n_ly - 1
    cdef long long li[2]
    cdef long long lj[2]
    cdef double wi[2]
    cdef double wj[2]
    li[0] = i0; li[1] = i1; wi[0] = 1.0 - fi; wi[1] = fi
    lj[0] = j0; lj[1] = j1; wj[0] = 1.0 - fj; wj[1] = fj
    cdef int a, b, k = 0
    cdef long long lvl, w, h, x0, y0, x1, y1, base
    cdef double x, y, fx, fy, wl
    for a in range(2):
        for b in range(2):
            lvl = li[a] * n_ly + lj[b]
            w = widths[lvl]
            h = heights[lvl]
            x = ux * w - 0.5
            y = uy * h - 0.5
            if x < 0.0:
                x = 0.0
            if x > w - 1:
                x = w - 1
            if y < 0.0:
                y = 0.0
            if y > h - 1:
                y = h - 1
            x0 = <long long>floor(x)
            y0 = <long long>floor(y)
            if x0 > w - 1:
                x0 = w - 1
            if y0 > h - 1:
                y0 = h - 1
            fx = x - x0
            fy = y - y0
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            base = offsets[lvl]
            wl = wi[a] * wj[b]
            idx[k] = base + (y0 * w + x0) * channels
            wts[k] = wl * (1.0 - fy) * (1.0 - fx)
            idx[k + 1] = base + (y0 * w + x1) * channels
            wts[k + 1] = wl * (1.0 - fy) * fx
            idx[k + 2] = base + (y1 * w + x0) * channels
            wts[k + 2] = wl * fy * (1.0 - fx)
            idx[k + 3] = base + (y1 * w + x1) * channels
            wts[k + 3] = wl * fy * fx
            k += 4


def ripmap_forward(
    const real[:, ::1] packed, const long long[::1] offsets, const long long[::1] widths,
    const long long[::1] heights, long long n_lx, long long n_ly, long long channels,
    const real[:, :, ::1] coords, real[:, :, ::1] out,
):
    cdef Py_ssize_t n = coords.shape[0]
    cdef Py_ssize_t p = coords.shape[1]
    cdef Py_ssize_t s, q, v, c
    cdef long long idx[16]
    cdef double wts[16]
    cdef double acc
    cdef double w
    cdef const real* grid
    with nogil:
        for s in range(n):
            for q in range(p):
                _vertices(offsets, widths, heights, n_lx, n_ly, channels,
                          coords[s, q, 0], coords[s, q, 1], coords[s, q, 2], coords[s, q, 3],
                          idx, wts)
                grid = &packed[q, 0]
                for c in range(channels):
                    acc = 0.0
                    for v in range(16):
                        acc = acc + wts[v] * grid[idx[v] + c]
                    out[s, q, c] = <real>acc


def ripmap_backward(
    tuple packed_shape, const long long[::1] offsets, const long long[::1] widths,
    const long long[::1] heights, long long n_lx, long long n_ly, long long channels,
    const real[:, :, ::1] coords, const real[:, :, ::1] grad_out, real[:, ::1] grad_packed,
):
    cdef Py_ssize_t n = coords.shape[0]
    cdef Py_ssize_t p = coords.shape[1]
    cdef Py_ssize_t s, q, v, c
    cdef long long idx[16]
    cdef double wts[16]
    cdef double g
    cdef real* grid
    with nogil:
        for s in range(n):
            for q in range(p):
                _vertices(offsets, widths, heights, n_lx, n_ly, channels,
                          coords[s, q, 0], coords[s, q, 1], coords[s, q, 2], coords[s, q, 3],
                          idx, wts)
                grid = &grad_packed[q, 0]
                for c in range(channels):
                    g = grad_out[s, q, c]
                    for v in range(16):
                        grid[idx[v] + c] += <real>(wts[v] * g)
