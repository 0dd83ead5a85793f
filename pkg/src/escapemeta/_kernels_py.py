"""Pure-numpy versions of the hot kernels.

Every routine here has a twin in ``_kernels.pyx`` performing the same
floating-point operations in the same order, so the two backends agree
bit for bit.  Random numbers come from one SplitMix64 stream per trajectory
(or chain), addressed by ``(seed, index, counter)``: counter 0 draws the
start point, counter ``2k-1`` the noise atom of step k and counter ``2k``
the dither of step k.
"""
import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11)
_TO_UNIT = 2.0 ** -53


def fmix(z):
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        return z ^ (z >> _S31)


def stream_keys(seed, index):
    """Per-trajectory SplitMix64 state for trajectory indices ``index``."""
    with np.errstate(over="ignore"):
        key = fmix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + GAMMA)
        idx = np.asarray(index, dtype=np.uint64)
        return fmix(key ^ fmix(idx + GAMMA))


def uniforms(keys, counter):
    with np.errstate(over="ignore"):
        c = np.uint64(counter + 1) * GAMMA
        h = fmix(keys + c)
    return (h >> _S11).astype(np.float64) * _TO_UNIT


def affine_transition(src, tgt, br_lo, br_slope, br_icpt):
    """Exact ``m(src_k ∩ T^{-1} tgt_j)`` for an affine piecewise map.

    ``src`` must contain every branch start.  Returns COO triplets.
    """
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    a, b = src[:-1], src[1:]
    mid = 0.5 * (a + b)
    k = np.searchsorted(br_lo, mid, side="right") - 1
    s = np.asarray(br_slope)[k]
    t = np.asarray(br_icpt)[k]
    ya = s * a + t
    yb = s * b + t
    lo = np.clip(np.minimum(ya, yb), 0.0, 1.0)
    hi = np.clip(np.maximum(ya, yb), 0.0, 1.0)
    inv = 1.0 / np.abs(s)
    nt = tgt.size - 1
    j0 = np.clip(np.searchsorted(tgt, lo, side="right") - 1, 0, nt - 1)
    j1 = np.clip(np.searchsorted(tgt, hi, side="left") - 1, 0, nt - 1)
    j1 = np.maximum(j1, j0)
    cnt = j1 - j0 + 1
    rows = np.repeat(np.arange(a.size, dtype=np.int64), cnt)
    start = np.cumsum(cnt) - cnt
    cols = j0[rows] + (np.arange(rows.size, dtype=np.int64) - start[rows])
    ov = np.minimum(hi[rows], tgt[cols + 1]) - np.maximum(lo[rows], tgt[cols])
    vals = ov * inv[rows]
    keep = vals > 0.0
    return rows[keep], cols[keep].astype(np.int64), vals[keep]


def _apply_map(x, br_lo, br_slope, br_icpt, nb, u, dither, circle):
    j = np.searchsorted(br_lo[:nb], x, side="right") - 1
    j = np.clip(j, 0, nb - 1)
    y = br_slope[j] * x + br_icpt[j]
    y = y + dither * u
    if circle:
        y = np.where(y >= 1.0, y - 1.0, y)
        y = np.where(y < 0.0, y + 1.0, y)
    return np.clip(y, 0.0, 1.0)


def survival_counts(seed, traj_offset, n_traj, n_steps, br_lo, br_slope, br_icpt, circle,
                    cdf, hole_lo, hole_hi, dither, start_lo, start_hi):
    """Number of trajectories alive after k = 0..n_steps steps (kill, then map)."""
    br_lo = np.ascontiguousarray(br_lo, dtype=np.float64)
    br_slope = np.ascontiguousarray(br_slope, dtype=np.float64)
    br_icpt = np.ascontiguousarray(br_icpt, dtype=np.float64)
    cdf = np.ascontiguousarray(cdf, dtype=np.float64)
    hole_lo = np.ascontiguousarray(hole_lo, dtype=np.float64)
    hole_hi = np.ascontiguousarray(hole_hi, dtype=np.float64)
    nb = br_lo.size
    counts = np.zeros(n_steps + 1, dtype=np.int64)
    keys = stream_keys(seed, np.arange(traj_offset, traj_offset + n_traj, dtype=np.uint64))
    x = start_lo + (start_hi - start_lo) * uniforms(keys, 0)
    counts[0] = n_traj
    for k in range(1, n_steps + 1):
        if x.size == 0:
            break
        ua = uniforms(keys, 2 * k - 1)
        atom = np.minimum(np.searchsorted(cdf, ua, side="right"), cdf.size - 1)
        lo = hole_lo[atom]
        hi = hole_hi[atom]
        dead = ((lo <= x[:, None]) & (x[:, None] <= hi)).any(axis=1)
        alive = ~dead
        x = x[alive]
        keys = keys[alive]
        counts[k] = x.size
        if x.size:
            ud = uniforms(keys, 2 * k)
            x = _apply_map(x, br_lo, br_slope, br_icpt, nb, ud, dither, circle)
    return counts


def stationary_histogram(seed, chain_offset, n_chains, n_steps, burn_in, atom_lo, atom_slope, atom_icpt,
                         atom_nb, cdf, bins, boundary, start_lo, start_hi, dither, circle):
    """Occupation counts of random orbits after burn-in.

    Returns ``(hist, left)`` where ``hist`` has ``bins`` uniform bins and
    ``left[c]`` counts the recorded positions of chain ``c`` below ``boundary``.
    """
    atom_lo = np.ascontiguousarray(atom_lo, dtype=np.float64)
    atom_slope = np.ascontiguousarray(atom_slope, dtype=np.float64)
    atom_icpt = np.ascontiguousarray(atom_icpt, dtype=np.float64)
    atom_nb = np.ascontiguousarray(atom_nb, dtype=np.int64)
    cdf = np.ascontiguousarray(cdf, dtype=np.float64)
    hist = np.zeros(bins, dtype=np.int64)
    left = np.zeros(n_chains, dtype=np.int64)
    keys = stream_keys(seed, np.arange(chain_offset, chain_offset + n_chains, dtype=np.uint64))
    x = start_lo + (start_hi - start_lo) * uniforms(keys, 0)
    nbmax = atom_lo.shape[1]
    cols = np.arange(nbmax)
    for k in range(1, burn_in + n_steps + 1):
        ua = uniforms(keys, 2 * k - 1)
        atom = np.minimum(np.searchsorted(cdf, ua, side="right"), cdf.size - 1)
        lo = atom_lo[atom]
        valid = cols[None, :] < atom_nb[atom][:, None]
        j = ((lo <= x[:, None]) & valid).sum(axis=1) - 1
        j = np.maximum(j, 0)
        y = atom_slope[atom, j] * x + atom_icpt[atom, j]
        ud = uniforms(keys, 2 * k)
        y = y + dither * ud
        if circle:
            y = np.where(y >= 1.0, y - 1.0, y)
            y = np.where(y < 0.0, y + 1.0, y)
        x = np.clip(y, 0.0, 1.0)
        if k > burn_in:
            b = (x * bins).astype(np.int64)
            b = np.minimum(b, bins - 1)
            hist += np.bincount(b, minlength=bins)
            left += x < boundary
    return hist, left
