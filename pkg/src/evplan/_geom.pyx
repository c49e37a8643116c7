# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled geometry kernels; mirrors evplan._geom_py one-for-one."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, cos, sin, atan2, hypot, INFINITY, fmin, fmax

cnp.import_array()


def project_polyline(points, poly, cum):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] L = np.ascontiguousarray(poly, dtype=np.float64)
    cdef const double[::1] C = np.ascontiguousarray(cum, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], m = L.shape[0] - 1
    s_out = np.empty(n)
    lat_out = np.empty(n)
    tan_out = np.empty(n)
    cdef double[::1] S = s_out, LAT = lat_out, TAN = tan_out
    cdef Py_ssize_t i, j, jbest
    cdef double px, py, ax, ay, dx, dy, l2, traw, t, cx, cy, d2, best, tbest, trawbest
    for i in range(n):
        px = P[i, 0]
        py = P[i, 1]
        best = INFINITY
        jbest = 0
        tbest = 0.0
        trawbest = 0.0
        for j in range(m):
            ax = L[j, 0]
            ay = L[j, 1]
            dx = L[j + 1, 0] - ax
            dy = L[j + 1, 1] - ay
            l2 = dx * dx + dy * dy
            traw = ((px - ax) * dx + (py - ay) * dy) / l2
            t = fmin(fmax(traw, 0.0), 1.0)
            cx = ax + t * dx - px
            cy = ay + t * dy - py
            d2 = cx * cx + cy * cy
            if d2 < best:
                best = d2
                jbest = j
                tbest = t
                trawbest = traw
        if jbest == 0 and trawbest < 0.0:
            tbest = trawbest
        if jbest == m - 1 and trawbest > 1.0:
            tbest = trawbest
        ax = L[jbest, 0]
        ay = L[jbest, 1]
        dx = L[jbest + 1, 0] - ax
        dy = L[jbest + 1, 1] - ay
        l2 = sqrt(dx * dx + dy * dy)
        S[i] = C[jbest] + tbest * l2
        LAT[i] = (dx * (py - ay) - dy * (px - ax)) / l2
        TAN[i] = atan2(dy, dx)
    return s_out, lat_out, tan_out


cdef inline double _seg_dist(double px, double py, double ax, double ay, double bx, double by) nogil:
    cdef double dx = bx - ax, dy = by - ay
    cdef double l2 = dx * dx + dy * dy
    cdef double t = 0.0
    if l2 > 0:
        t = ((px - ax) * dx + (py - ay) * dy) / l2
        t = fmin(fmax(t, 0.0), 1.0)
    return hypot(px - (ax + t * dx), py - (ay + t * dy))


cdef double _ring_sd(double px, double py, const double[:, ::1] R, Py_ssize_t start, Py_ssize_t m) nogil:
    cdef Py_ssize_t i, i2
    cdef double ax, ay, bx, by, cross, d, dist = INFINITY
    cdef long wn = 0
    for i in range(m):
        i2 = i + 1
        if i2 == m:
            i2 = 0
        ax = R[start + i, 0]
        ay = R[start + i, 1]
        bx = R[start + i2, 0]
        by = R[start + i2, 1]
        d = _seg_dist(px, py, ax, ay, bx, by)
        if d < dist:
            dist = d
        cross = (bx - ax) * (py - ay) - (px - ax) * (by - ay)
        if ay <= py:
            if by > py and cross > 0:
                wn += 1
        else:
            if by <= py and cross < 0:
                wn -= 1
    if wn != 0:
        return dist
    return -dist


cdef Py_ssize_t _ring_len(const double[:, ::1] R, Py_ssize_t start, Py_ssize_t stop):
    cdef Py_ssize_t m = stop - start
    if m > 2 and R[start, 0] == R[stop - 1, 0] and R[start, 1] == R[stop - 1, 1]:
        return m - 1
    return m


def polygon_signed_distance(points, ring):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] R = np.ascontiguousarray(ring, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], i
    cdef Py_ssize_t m = _ring_len(R, 0, R.shape[0])
    out = np.empty(n)
    cdef double[::1] O = out
    for i in range(n):
        O[i] = _ring_sd(P[i, 0], P[i, 1], R, 0, m)
    return out


def region_signed_distance(points, rings_flat, offsets):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] R = np.ascontiguousarray(rings_flat, dtype=np.float64).reshape(-1, 2)
    cdef const long[::1] OFF = np.ascontiguousarray(offsets, dtype=np.int_)
    cdef Py_ssize_t n = P.shape[0], i, r, nr = OFF.shape[0] - 1, m
    cdef double v
    out = np.full(n, -INFINITY)
    cdef double[::1] O = out
    for r in range(nr):
        m = _ring_len(R, OFF[r], OFF[r + 1])
        for i in range(n):
            v = _ring_sd(P[i, 0], P[i, 1], R, OFF[r], m)
            if v > O[i]:
                O[i] = v
    return out


cdef inline void _corners(double cx, double cy, double h, double length, double width, double* out) nogil:
    cdef double c = cos(h), s = sin(h), hl = length / 2.0, hw = width / 2.0
    cdef double lx[4]
    cdef double ly[4]
    lx[0] = hl; ly[0] = hw
    lx[1] = -hl; ly[1] = hw
    lx[2] = -hl; ly[2] = -hw
    lx[3] = hl; ly[3] = -hw
    cdef int k
    for k in range(4):
        out[2 * k] = cx + c * lx[k] - s * ly[k]
        out[2 * k + 1] = cy + s * lx[k] + c * ly[k]


cdef double _sat_gap(double* a, double* b) nogil:
    cdef double best = -INFINITY, ex, ey, nx, ny, nrm, pa_min, pa_max, pb_min, pb_max, v, gap
    cdef double* poly
    cdef int which, i, k
    for which in range(2):
        poly = a if which == 0 else b
        for i in range(2):
            ex = poly[2 * (i + 1)] - poly[2 * i]
            ey = poly[2 * (i + 1) + 1] - poly[2 * i + 1]
            nrm = hypot(ex, ey)
            nx = -ey / nrm
            ny = ex / nrm
            pa_min = INFINITY; pa_max = -INFINITY
            pb_min = INFINITY; pb_max = -INFINITY
            for k in range(4):
                v = a[2 * k] * nx + a[2 * k + 1] * ny
                pa_min = fmin(pa_min, v); pa_max = fmax(pa_max, v)
                v = b[2 * k] * nx + b[2 * k + 1] * ny
                pb_min = fmin(pb_min, v); pb_max = fmax(pb_max, v)
            gap = fmax(pb_min - pa_max, pa_min - pb_max)
            best = fmax(best, gap)
    return best


cdef double _box_sd(double* a, double* b) nogil:
    cdef double gap = _sat_gap(a, b)
    if gap <= 0.0:
        return gap
    cdef double best = INFINITY, d
    cdef int i, k
    for i in range(4):
        for k in range(4):
            d = _seg_dist(a[2 * i], a[2 * i + 1], b[2 * k], b[2 * k + 1], b[2 * ((k + 1) % 4)], b[2 * ((k + 1) % 4) + 1])
            best = fmin(best, d)
            d = _seg_dist(b[2 * i], b[2 * i + 1], a[2 * k], a[2 * k + 1], a[2 * ((k + 1) % 4)], a[2 * ((k + 1) % 4) + 1])
            best = fmin(best, d)
    return best


def box_corners(boxes):
    arr = np.asarray(boxes, dtype=np.float64)
    shape = arr.shape[:-1]
    cdef const double[:, ::1] B = np.ascontiguousarray(arr.reshape(-1, 5))
    cdef Py_ssize_t n = B.shape[0], i
    out = np.empty((n, 8))
    cdef double[:, ::1] O = out
    for i in range(n):
        _corners(B[i, 0], B[i, 1], B[i, 2], B[i, 3], B[i, 4], &O[i, 0])
    return out.reshape(shape + (4, 2))


def box_signed_distance(a, b):
    cdef const double[::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef double ca[8]
    cdef double cb[8]
    _corners(A[0], A[1], A[2], A[3], A[4], ca)
    _corners(B[0], B[1], B[2], B[3], B[4], cb)
    return _box_sd(ca, cb)


def clearance(ego, agents):
    cdef const double[:, :, ::1] E = np.ascontiguousarray(ego, dtype=np.float64)
    cdef const double[:, :, ::1] A = np.ascontiguousarray(agents, dtype=np.float64).reshape(-1, E.shape[1], 5)
    cdef Py_ssize_t k = E.shape[0], f = E.shape[1], na = A.shape[0], i, t, a
    out = np.full((k, f), INFINITY)
    cdef double[:, ::1] O = out
    cdef double ce[8]
    cdef double cag[8]
    cdef double d
    for t in range(f):
        for a in range(na):
            _corners(A[a, t, 0], A[a, t, 1], A[a, t, 2], A[a, t, 3], A[a, t, 4], cag)
            for i in range(k):
                _corners(E[i, t, 0], E[i, t, 1], E[i, t, 2], E[i, t, 3], E[i, t, 4], ce)
                d = _box_sd(ce, cag)
                if d < O[i, t]:
                    O[i, t] = d
    return out


def boxes_overlap(ego, agents):
    cdef const double[:, :, ::1] E = np.ascontiguousarray(ego, dtype=np.float64)
    cdef const double[:, :, ::1] A = np.ascontiguousarray(agents, dtype=np.float64).reshape(-1, E.shape[1], 5)
    cdef Py_ssize_t k = E.shape[0], f = E.shape[1], na = A.shape[0], i, t, a
    out = np.zeros(k, dtype=np.uint8)
    cdef cnp.uint8_t[::1] O = out
    cdef double ce[8]
    cdef double cag[8]
    for i in range(k):
        for t in range(f):
            if O[i]:
                break
            _corners(E[i, t, 0], E[i, t, 1], E[i, t, 2], E[i, t, 3], E[i, t, 4], ce)
            for a in range(na):
                _corners(A[a, t, 0], A[a, t, 1], A[a, t, 2], A[a, t, 3], A[a, t, 4], cag)
                if _sat_gap(ce, cag) < 0.0:
                    O[i] = 1
                    break
    return out.astype(bool)
