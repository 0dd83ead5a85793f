# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15ULL
cdef double TO_UNIT = 1.0 / 9007199254740992.0  # 2**-53


cdef inline uint64_t fmix(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline uint64_t stream_key(uint64_t seed, uint64_t idx) noexcept nogil:
    cdef uint64_t key = fmix(seed + GAMMA)
    return fmix(key ^ fmix(idx + GAMMA))


cdef inline double uniform(uint64_t key, uint64_t counter) noexcept nogil:
    cdef uint64_t h = fmix(key + (counter + 1) * GAMMA)
    return <double>(h >> 11) * TO_UNIT


cdef inline Py_ssize_t last_le(const double[:] a, Py_ssize_t n, double x) noexcept nogil:
    # index of the last a[j] <= x, clamped to [0, n-1]
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if a[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    lo -= 1
    if lo < 0:
        lo = 0
    if lo > n - 1:
        lo = n - 1
    return lo


cdef inline Py_ssize_t first_ge(const double[:] a, Py_ssize_t n, double x) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if a[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline Py_ssize_t pick_atom(const double[:] cdf, Py_ssize_t na, double u) noexcept nogil:
    cdef Py_ssize_t i = 0
    while i < na - 1 and cdf[i] <= u:
        i += 1
    return i


def affine_transition(src, tgt, br_lo, br_slope, br_icpt):
    cdef const double[:] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef const double[:] t = np.ascontiguousarray(tgt, dtype=np.float64)
    cdef const double[:] blo = np.ascontiguousarray(br_lo, dtype=np.float64)
    cdef const double[:] bsl = np.ascontiguousarray(br_slope, dtype=np.float64)
    cdef const double[:] bic = np.ascontiguousarray(br_icpt, dtype=np.float64)
    cdef Py_ssize_t ns = s.shape[0] - 1, nt = t.shape[0] - 1, nb = blo.shape[0]
    cdef Py_ssize_t i, j, j0, j1, k, n = 0, cap = 4 * ns + 16
    cdef double a, b, ya, yb, lo, hi, sl, inv, ov, v, mid
    rows_a = np.empty(cap, dtype=np.int64)
    cols_a = np.empty(cap, dtype=np.int64)
    vals_a = np.empty(cap, dtype=np.float64)
    cdef int64_t[:] rows = rows_a
    cdef int64_t[:] cols = cols_a
    cdef double[:] vals = vals_a
    for i in range(ns):
        a = s[i]
        b = s[i + 1]
        mid = 0.5 * (a + b)
        k = last_le(blo, nb, mid)
        sl = bsl[k]
        ya = sl * a + bic[k]
        yb = sl * b + bic[k]
        lo = ya if ya < yb else yb
        hi = yb if ya < yb else ya
        lo = 0.0 if lo < 0.0 else (1.0 if lo > 1.0 else lo)
        hi = 0.0 if hi < 0.0 else (1.0 if hi > 1.0 else hi)
        inv = 1.0 / fabs(sl)
        j0 = last_le(t, nt + 1, lo)
        if j0 > nt - 1:
            j0 = nt - 1
        j1 = first_ge(t, nt + 1, hi) - 1
        if j1 > nt - 1:
            j1 = nt - 1
        if j1 < j0:
            j1 = j0
        if n + (j1 - j0 + 1) > cap:
            cap = 2 * cap + (j1 - j0 + 1)
            rows_a = np.resize(rows_a, cap)
            cols_a = np.resize(cols_a, cap)
            vals_a = np.resize(vals_a, cap)
            rows = rows_a
            cols = cols_a
            vals = vals_a
        for j in range(j0, j1 + 1):
            ov = (hi if hi < t[j + 1] else t[j + 1]) - (lo if lo > t[j] else t[j])
            v = ov * inv
            if v > 0.0:
                rows[n] = i
                cols[n] = j
                vals[n] = v
                n += 1
    return rows_a[:n].copy(), cols_a[:n].copy(), vals_a[:n].copy()


cdef inline double apply_map(double x, const double[:] blo, const double[:] bsl, const double[:] bic,
                             Py_ssize_t nb, double u, double dither, bint circle) noexcept nogil:
    cdef Py_ssize_t j = last_le(blo, nb, x)
    cdef double y = bsl[j] * x + bic[j]
    y = y + dither * u
    if circle:
        if y >= 1.0:
            y = y - 1.0
        if y < 0.0:
            y = y + 1.0
    if y < 0.0:
        y = 0.0
    if y > 1.0:
        y = 1.0
    return y


def survival_counts(uint64_t seed, uint64_t traj_offset, Py_ssize_t n_traj, Py_ssize_t n_steps,
                    br_lo, br_slope, br_icpt, bint circle, cdf, hole_lo, hole_hi,
                    double dither, double start_lo, double start_hi):
    cdef const double[:] blo = np.ascontiguousarray(br_lo, dtype=np.float64)
    cdef const double[:] bsl = np.ascontiguousarray(br_slope, dtype=np.float64)
    cdef const double[:] bic = np.ascontiguousarray(br_icpt, dtype=np.float64)
    cdef const double[:] cd = np.ascontiguousarray(cdf, dtype=np.float64)
    cdef const double[:, :] hlo = np.ascontiguousarray(hole_lo, dtype=np.float64)
    cdef const double[:, :] hhi = np.ascontiguousarray(hole_hi, dtype=np.float64)
    cdef Py_ssize_t nb = blo.shape[0], na = cd.shape[0], nh = hlo.shape[1]
    deaths_a = np.zeros(n_steps + 2, dtype=np.int64)
    cdef int64_t[:] deaths = deaths_a
    cdef Py_ssize_t i, k, a, h
    cdef uint64_t key
    cdef double x, u
    cdef bint dead
    with nogil:
        for i in range(n_traj):
            key = stream_key(seed, traj_offset + <uint64_t>i)
            x = start_lo + (start_hi - start_lo) * uniform(key, 0)
            dead = False
            for k in range(1, n_steps + 1):
                u = uniform(key, 2 * k - 1)
                a = pick_atom(cd, na, u)
                for h in range(nh):
                    if hlo[a, h] <= x and x <= hhi[a, h]:
                        dead = True
                        break
                if dead:
                    deaths[k] += 1
                    break
                x = apply_map(x, blo, bsl, bic, nb, uniform(key, 2 * k), dither, circle)
    counts = n_traj - np.cumsum(deaths_a[:n_steps + 1])
    return counts.astype(np.int64)


def stationary_histogram(uint64_t seed, uint64_t chain_offset, Py_ssize_t n_chains, Py_ssize_t n_steps,
                         Py_ssize_t burn_in, atom_lo, atom_slope, atom_icpt, atom_nb, cdf,
                         Py_ssize_t bins, double boundary, double start_lo, double start_hi,
                         double dither, bint circle):
    cdef const double[:, :] alo = np.ascontiguousarray(atom_lo, dtype=np.float64)
    cdef const double[:, :] asl = np.ascontiguousarray(atom_slope, dtype=np.float64)
    cdef const double[:, :] aic = np.ascontiguousarray(atom_icpt, dtype=np.float64)
    cdef const int64_t[:] anb = np.ascontiguousarray(atom_nb, dtype=np.int64)
    cdef const double[:] cd = np.ascontiguousarray(cdf, dtype=np.float64)
    cdef Py_ssize_t na = cd.shape[0]
    hist_a = np.zeros(bins, dtype=np.int64)
    left_a = np.zeros(n_chains, dtype=np.int64)
    cdef int64_t[:] hist = hist_a
    cdef int64_t[:] left = left_a
    cdef Py_ssize_t c, k, a, b
    cdef uint64_t key
    cdef double x
    with nogil:
        for c in range(n_chains):
            key = stream_key(seed, chain_offset + <uint64_t>c)
            x = start_lo + (start_hi - start_lo) * uniform(key, 0)
            for k in range(1, burn_in + n_steps + 1):
                a = pick_atom(cd, na, uniform(key, 2 * k - 1))
                x = apply_map(x, alo[a], asl[a], aic[a], anb[a], uniform(key, 2 * k), dither, circle)
                if k > burn_in:
                    b = <Py_ssize_t>(x * bins)
                    if b > bins - 1:
                        b = bins - 1
                    hist[b] += 1
                    if x < boundary:
                        left[c] += 1
    return hist_a, left_a
