# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()


cdef int _cmp_double(const void *a, const void *b) noexcept nogil:
    cdef double x = (<double *>a)[0]
    cdef double y = (<double *>b)[0]
    if x < y:
        return -1
    if x > y:
        return 1
    return 0


def window_stats(values, Py_ssize_t win, double bin_width):
    cdef double[::1] x = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0]
    if win < 1 or n < win:
        return np.zeros(0), np.zeros(0)
    cdef Py_ssize_t nw = n - win + 1
    frac_arr = np.empty(nw, dtype=np.float64)
    std_arr = np.empty(nw, dtype=np.float64)
    cdef double[::1] frac = frac_arr
    cdef double[::1] sd = std_arr
    cdef double *buf = <double *>malloc(win * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef Py_ssize_t k, i, j, best
    cdef double mean, acc, d
    try:
        with nogil:
            for k in range(nw):
                for i in range(win):
                    buf[i] = x[k + i]
                qsort(buf, win, sizeof(double), _cmp_double)
                best = 0
                j = 0
                for i in range(win):
                    if j < i:
                        j = i
                    while j < win and buf[j] < buf[i] + bin_width:
                        j += 1
                    if j - i > best:
                        best = j - i
                frac[k] = <double>best / <double>win
                acc = 0.0
                for i in range(win):
                    acc += buf[i]
                mean = acc / win
                acc = 0.0
                for i in range(win):
                    d = buf[i] - mean
                    acc += d * d
                sd[k] = sqrt(acc / win)
    finally:
        free(buf)
    return frac_arr, std_arr


def draw_line(double[:, :, ::1] canvas, long r0, long c0, long r1, long c1, color):
    cdef long h = canvas.shape[0]
    cdef long w = canvas.shape[1]
    cdef double c_r = color[0], c_g = color[1], c_b = color[2]
    cdef long dr = r1 - r0 if r1 > r0 else r0 - r1
    cdef long dc = c1 - c0 if c1 > c0 else c0 - c1
    cdef long sr = 1 if r0 < r1 else -1
    cdef long sc = 1 if c0 < c1 else -1
    cdef long err = dc - dr
    cdef long r = r0, c = c0, e2
    with nogil:
        while True:
            if 0 <= r < h and 0 <= c < w:
                canvas[r, c, 0] = c_r
                canvas[r, c, 1] = c_g
                canvas[r, c, 2] = c_b
            if r == r1 and c == c1:
                break
            e2 = 2 * err
            if e2 > -dr:
                err -= dr
                c += sc
            if e2 < dc:
                err += dc
                r += sr


def max_concurrency(starts, ends):
    cdef double[::1] s = np.sort(np.asarray(starts, dtype=np.float64))
    cdef double[::1] e = np.sort(np.asarray(ends, dtype=np.float64))
    cdef Py_ssize_t ns = s.shape[0], ne = e.shape[0], i = 0, j = 0
    cdef long open_now = 0, best = 0
    with nogil:
        while i < ns:
            # closings at the same instant are processed first
            if j < ne and e[j] <= s[i]:
                open_now -= 1
                j += 1
            else:
                open_now += 1
                if open_now > best:
                    best = open_now
                i += 1
    return best
