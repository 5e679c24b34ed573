# Compiled hot kernel: nearest-segment squared distance over a pixel grid,
# accelerated by a uniform spatial grid of segment buckets queried with an
# expanding ring search.  Must agree with the naive all-segments scan.

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef inline double _point_seg_d2(double px, double py,
                                 double ax, double ay,
                                 double bx, double by) nogil:
    cdef double dx = bx - ax
    cdef double dy = by - ay
    cdef double l2 = dx * dx + dy * dy
    cdef double t, qx, qy
    if l2 == 0.0:
        qx = ax
        qy = ay
    else:
        t = ((px - ax) * dx + (py - ay) * dy) / l2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = ax + t * dx
        qy = ay + t * dy
    dx = px - qx
    dy = py - qy
    return dx * dx + dy * dy


def min_dist_sq_grid(double[:, ::1] segments, int resolution, double cell=16.0):
    """Squared distance from every integer pixel center to its nearest segment.

    segments: (M, 4) array of (ax, ay, bx, by) rows, M >= 1.
    """
    cdef Py_ssize_t nseg = segments.shape[0]
    if nseg < 1:
        raise ValueError("need at least one segment")
    if segments.shape[1] != 4:
        raise ValueError("segments must have shape (M, 4)")

    cdef int ncell = <int>((resolution + cell - 1.0) / cell)
    if ncell < 1:
        ncell = 1
    cdef int ncell2 = ncell * ncell

    out_arr = np.empty((resolution, resolution), dtype=np.float64)
    counts_arr = np.zeros(ncell2 + 1, dtype=np.intp)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t[::1] offsets = counts_arr

    cdef Py_ssize_t s, idx
    cdef int cx0, cx1, cy0, cy1, cx, cy
    cdef double ax, ay, bx, by, lo, hi

    # bucket each segment into every cell its bbox overlaps (CSR layout)
    for s in range(nseg):
        ax = segments[s, 0]; ay = segments[s, 1]
        bx = segments[s, 2]; by = segments[s, 3]
        lo = ax if ax < bx else bx
        hi = ax if ax > bx else bx
        cx0 = _cell_of(lo, cell, ncell); cx1 = _cell_of(hi, cell, ncell)
        lo = ay if ay < by else by
        hi = ay if ay > by else by
        cy0 = _cell_of(lo, cell, ncell); cy1 = _cell_of(hi, cell, ncell)
        for cy in range(cy0, cy1 + 1):
            for cx in range(cx0, cx1 + 1):
                offsets[cy * ncell + cx + 1] += 1

    for idx in range(ncell2):
        offsets[idx + 1] += offsets[idx]

    bucket_arr = np.empty(offsets[ncell2], dtype=np.intp)
    fill_arr = np.zeros(ncell2, dtype=np.intp)
    cdef Py_ssize_t[::1] bucket = bucket_arr
    cdef Py_ssize_t[::1] fill = fill_arr

    for s in range(nseg):
        ax = segments[s, 0]; ay = segments[s, 1]
        bx = segments[s, 2]; by = segments[s, 3]
        lo = ax if ax < bx else bx
        hi = ax if ax > bx else bx
        cx0 = _cell_of(lo, cell, ncell); cx1 = _cell_of(hi, cell, ncell)
        lo = ay if ay < by else by
        hi = ay if ay > by else by
        cy0 = _cell_of(lo, cell, ncell); cy1 = _cell_of(hi, cell, ncell)
        for cy in range(cy0, cy1 + 1):
            for cx in range(cx0, cx1 + 1):
                idx = cy * ncell + cx
                bucket[offsets[idx] + fill[idx]] = s
                fill[idx] += 1

    cdef int py, px, pcx, pcy, r, rmax
    cdef double best, d2, lb
    cdef Py_ssize_t k

    with nogil:
        for py in range(resolution):
            pcy = _cell_of(py, cell, ncell)
            for px in range(resolution):
                pcx = _cell_of(px, cell, ncell)
                best = INFINITY
                rmax = ncell  # enough rings to cover the whole grid
                for r in range(rmax + 1):
                    if best != INFINITY:
                        # nothing in ring r can be closer than (r-1)*cell
                        lb = (r - 1) * cell
                        if lb > 0.0 and lb * lb >= best:
                            break
                    best = _scan_ring(segments, bucket, offsets, ncell,
                                      pcx, pcy, r, px, py, best)
                out[py, px] = best
    return out_arr


cdef inline int _cell_of(double coord, double cell, int ncell) nogil:
    cdef int c = <int>(coord / cell)
    if c < 0:
        c = 0
    elif c >= ncell:
        c = ncell - 1
    return c


cdef double _scan_ring(double[:, ::1] segments, Py_ssize_t[::1] bucket,
                       Py_ssize_t[::1] offsets, int ncell,
                       int pcx, int pcy, int r,
                       double px, double py, double best) nogil:
    cdef int cx, cy
    if r == 0:
        return _scan_cell(segments, bucket, offsets, ncell, pcx, pcy, px, py, best)
    for cx in range(pcx - r, pcx + r + 1):
        best = _scan_cell(segments, bucket, offsets, ncell, cx, pcy - r, px, py, best)
        best = _scan_cell(segments, bucket, offsets, ncell, cx, pcy + r, px, py, best)
    for cy in range(pcy - r + 1, pcy + r):
        best = _scan_cell(segments, bucket, offsets, ncell, pcx - r, cy, px, py, best)
        best = _scan_cell(segments, bucket, offsets, ncell, pcx + r, cy, px, py, best)
    return best


cdef inline double _scan_cell(double[:, ::1] segments, Py_ssize_t[::1] bucket,
                              Py_ssize_t[::1] offsets, int ncell,
                              int cx, int cy, double px, double py,
                              double best) nogil:
    if cx < 0 or cy < 0 or cx >= ncell or cy >= ncell:
        return best
    cdef Py_ssize_t idx = cy * ncell + cx
    cdef Py_ssize_t k
    cdef double d2
    for k in range(offsets[idx], offsets[idx + 1]):
        d2 = _point_seg_d2(px, py,
                           segments[bucket[k], 0], segments[bucket[k], 1],
                           segments[bucket[k], 2], segments[bucket[k], 3])
        if d2 < best:
            best = d2
    return best
