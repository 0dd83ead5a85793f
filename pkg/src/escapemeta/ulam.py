"""Ulam discretisation of closed, open and averaged transfer operators.

Densities are piecewise constant on a :class:`Grid`.  An operator stores the
row-(sub)stochastic matrix ``M[i, j] = m(cell_i ∩ mask ∩ T^{-1} cell_j) / m(cell_i)``;
it acts on density values ``v`` by ``(M^T (v w)) / w`` with ``w`` the cell
widths.  Entries are exact for affine branches: the builders intersect
intervals, never sample.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from ._backend import kernels
from .maps import MapConstructionError, PiecewiseMap
from .noise import HoleFamily, NoiseModel

ALIGN_TOL = 1e-12
MERGE_TOL = 1e-13


class GridAlignmentError(ValueError):
    """A hole endpoint or breakpoint is not a grid point."""


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual=None, iterations=None):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class Grid:
    cuts: np.ndarray

    def __post_init__(self):
        cuts = np.asarray(self.cuts, dtype=float)
        if cuts.ndim != 1 or cuts.size < 2 or cuts[0] != 0.0 or cuts[-1] != 1.0:
            raise ValueError("grid cuts must run from 0 to 1")
        if np.any(np.diff(cuts) <= 0):
            raise ValueError("grid cuts must be strictly increasing")
        cuts.setflags(write=False)
        object.__setattr__(self, "cuts", cuts)

    @property
    def n(self) -> int:
        return self.cuts.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.cuts)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.cuts[:-1] + self.cuts[1:])

    def index_of(self, x: float) -> Optional[int]:
        """Index of the cut equal to ``x`` within ALIGN_TOL, else None."""
        k = int(np.searchsorted(self.cuts, x))
        for j in (k - 1, k):
            if 0 <= j < self.cuts.size and abs(self.cuts[j] - x) <= ALIGN_TOL:
                return j
        return None

    def contains_points(self, pts) -> bool:
        return all(self.index_of(p) is not None for p in pts)

    def __eq__(self, other):
        return isinstance(other, Grid) and np.array_equal(self.cuts, other.cuts)

    def __hash__(self):
        return hash(self.cuts.tobytes())


def build_grid(N: int, refinement: Sequence[float] = ()) -> Grid:
    """Uniform N-cell grid with extra cut points inserted.

    Points closer than MERGE_TOL to an existing cut are merged into it.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    cuts = np.arange(N + 1, dtype=float) / N
    extra = np.asarray([p for p in refinement if 0.0 < p < 1.0], dtype=float)
    if extra.size:
        allc = np.concatenate([cuts, extra])
        allc.sort(kind="mergesort")
        keep = np.concatenate([[True], np.diff(allc) > MERGE_TOL])
        # always keep the exact 1.0 endpoint
        allc = allc[keep]
        if allc[-1] != 1.0:
            allc[-1] = 1.0
        cuts = allc
    return Grid(cuts)


@dataclass(frozen=True, eq=False)
class DensityVector:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError("one value per cell required")
        object.__setattr__(self, "values", v)

    def total(self) -> float:
        return float(np.dot(self.values, self.grid.widths))

    def normalized(self) -> "DensityVector":
        return DensityVector(self.grid, self.values / self.total())

    def integrate(self, intervals) -> float:
        """Exact integral over a union of intervals."""
        cuts = self.grid.cuts
        cum = np.concatenate([[0.0], np.cumsum(self.values * self.grid.widths)])

        def F(x):
            x = min(max(x, 0.0), 1.0)
            k = min(int(np.searchsorted(cuts, x, side="right")) - 1, self.grid.n - 1)
            return cum[k] + self.values[k] * (x - cuts[k])

        return float(sum(F(hi) - F(lo) for lo, hi in intervals if hi > lo))

    def l1_distance(self, other: "DensityVector") -> float:
        if self.grid != other.grid:
            raise ValueError("densities live on different grids")
        return float(np.dot(np.abs(self.values - other.values), self.grid.widths))

    def mirrored(self) -> "DensityVector":
        """Density of the push-forward under x -> 1 - x (grid assumed symmetric)."""
        return DensityVector(self.grid, self.values[::-1].copy())


def uniform_density(grid: Grid) -> DensityVector:
    return DensityVector(grid, np.ones(grid.n))


def indicator_density(grid: Grid, lo: float, hi: float) -> DensityVector:
    """Normalised uniform density on ``[lo, hi]`` (exact if aligned)."""
    vals = np.array([max(0.0, min(b, hi) - max(a, lo)) for a, b in zip(grid.cuts[:-1], grid.cuts[1:])])
    vals = vals / grid.widths
    d = DensityVector(grid, vals)
    return d.normalized()


@dataclass(frozen=True, eq=False)
class UlamOperator:
    grid: Grid
    matrix: sp.csr_matrix
    kind: str
    _mt: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in ("closed", "open", "averaged_closed"):
            raise ValueError(f"unknown operator kind {self.kind!r}")

    @property
    def transposed(self) -> sp.csr_matrix:
        if not self._mt:
            self._mt.append(self.matrix.T.tocsr())
        return self._mt[0]

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def apply_values(self, v: np.ndarray) -> np.ndarray:
        w = self.grid.widths
        return (self.transposed @ (v * w)) / w

    def apply(self, d: DensityVector) -> DensityVector:
        return DensityVector(self.grid, self.apply_values(d.values))

    def __sub__(self, other: "UlamOperator") -> "UlamOperator":
        if self.grid != other.grid:
            raise ValueError("operators on different grids")
        return UlamOperator(self.grid, (self.matrix - other.matrix).tocsr(), "open")


def _source_partition(grid: Grid, extra: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    pts = np.concatenate([grid.cuts, np.asarray([p for p in extra if 0.0 < p < 1.0], dtype=float)])
    pts = np.unique(pts)
    # drop slivers created by points that coincide with cuts up to rounding
    keep = np.concatenate([[True], np.diff(pts) > MERGE_TOL])
    keep[-1] = True
    pts = pts[keep]
    pts[-1] = 1.0
    parent = np.searchsorted(grid.cuts, 0.5 * (pts[:-1] + pts[1:]), side="right") - 1
    return pts, parent


def _transition(tmap: PiecewiseMap, src: np.ndarray, tgt: np.ndarray):
    """COO triplets of ``m(src_k ∩ T^{-1} tgt_j)``."""
    if tmap.is_affine:
        lo = np.array([b.lo for b in tmap.branches])
        sl = np.array([b.slope for b in tmap.branches])
        ic = np.array([b.intercept for b in tmap.branches])
        return kernels.affine_transition(src, tgt, lo, sl, ic)
    return _smooth_transition(tmap, src, tgt)


def _smooth_transition(tmap: PiecewiseMap, src, tgt):
    rows, cols, vals = [], [], []
    for k in range(src.size - 1):
        a, b = src[k], src[k + 1]
        br = tmap.branches[tmap.branch_index(0.5 * (a + b))]
        if br.inverse is None:
            raise MapConstructionError("non-affine branch without inverse")
        ya, yb = sorted((br.value(a), br.value(b)))
        ya, yb = max(ya, 0.0), min(yb, 1.0)
        j0 = max(int(np.searchsorted(tgt, ya, side="right")) - 1, 0)
        j1 = min(int(np.searchsorted(tgt, yb, side="left")) - 1, tgt.size - 2)
        for j in range(j0, max(j1, j0) + 1):
            lo, hi = max(ya, tgt[j]), min(yb, tgt[j + 1])
            if hi > lo:
                m = abs(br.inverse(hi) - br.inverse(lo))
                rows.append(k)
                cols.append(j)
                vals.append(m)
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(vals)


def _check_aligned(grid: Grid, pts, what: str):
    missing = [p for p in pts if grid.index_of(p) is None]
    if missing:
        raise GridAlignmentError(
            f"{what} not on the grid (first: {missing[0]!r}); refine the grid or pass allow_unaligned=True")


def _assemble(tmap: PiecewiseMap, grid: Grid, extra_points, keep_fn, kind: str, allow_unaligned: bool):
    _check_aligned(grid, tmap.breakpoints, "map breakpoints") if not allow_unaligned else None
    src, parent = _source_partition(grid, list(tmap.breakpoints) + list(extra_points))
    rows, cols, vals = _transition(tmap, src, grid.cuts)
    if keep_fn is not None:
        keep = keep_fn(0.5 * (src[:-1] + src[1:]))
        vals = vals * keep[rows]
    rows = parent[rows]
    n = grid.n
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat = sp.diags(1.0 / grid.widths) @ mat
    mat = mat.tocsr()
    mat.eliminate_zeros()
    return UlamOperator(grid, mat, kind)


def build_closed(tmap: PiecewiseMap, grid: Grid, allow_unaligned: bool = False) -> UlamOperator:
    return _assemble(tmap, grid, (), None, "closed", allow_unaligned)


def survival_weights(noise: NoiseModel, holes: HoleFamily):
    """Function of points returning ``sum theta(w) 1_{X_w}(x)``."""
    atoms = [(p, holes.holes(w)) for w, p in noise.atoms]

    def keep(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for p, ivs in atoms:
            inside = np.zeros(x.shape, dtype=bool)
            for lo, hi in ivs:
                inside |= (x > lo) & (x < hi)
            out += p * (~inside)
        return out

    return keep


def build_open(tmap: PiecewiseMap, grid: Grid, noise: NoiseModel, holes: HoleFamily,
               allow_unaligned: bool = False) -> UlamOperator:
    """Averaged open operator: mask by ``1_{X_w}`` first, then transfer."""
    ends = holes.endpoints(noise)
    if not allow_unaligned:
        _check_aligned(grid, ends, "hole endpoints")
        ends = [grid.cuts[grid.index_of(p)] for p in ends]
    return _assemble(tmap, grid, ends, survival_weights(noise, holes), "open", allow_unaligned)


def build_averaged_closed(family, grid: Grid, noise: NoiseModel, allow_unaligned: bool = False) -> UlamOperator:
    """``sum_w theta(w) Ulam(T_w)`` for a perturbed family (anything with ``map(omega)``)."""
    if not allow_unaligned and hasattr(family, "hole_endpoints"):
        _check_aligned(grid, family.hole_endpoints(noise), "hole endpoints")
    total = None
    for w, p in noise.atoms:
        op = build_closed(family.map(w), grid, allow_unaligned)
        total = p * op.matrix if total is None else total + p * op.matrix
    return UlamOperator(grid, total.tocsr(), "averaged_closed")


@dataclass(frozen=True)
class EigenPair:
    eigenvalue: float
    vector: DensityVector
    residual: float
    iterations: int


def leading_eigenpair(op: UlamOperator, tol: float = 1e-12, max_iter: int = 1_000_000,
                      start: Optional[np.ndarray] = None) -> EigenPair:
    """Power iteration with L1 renormalisation from the constant density.

    The eigenvalue estimate is ``m(P g)`` for the current normalised iterate
    ``g``; the residual is ``||P g - e g||_1``.
    """
    w = op.grid.widths
    mt = op.transposed
    v = np.ones(op.grid.n) if start is None else np.asarray(start, dtype=float).copy()
    v /= np.dot(v, w)
    res = np.inf
    for it in range(1, max_iter + 1):
        u = (mt @ (v * w)) / w
        e = float(np.dot(u, w))
        res = float(np.dot(np.abs(u - e * v), w))
        if e <= 0.0:
            raise ConvergenceError("iterate annihilated: operator is nilpotent on the start vector",
                                   residual=res, iterations=it)
        if res <= tol:
            return EigenPair(e, DensityVector(op.grid, v), res, it)
        v = u / e
    raise ConvergenceError(f"power iteration did not reach tol {tol} in {max_iter} steps (residual {res:.3e})",
                           residual=res, iterations=max_iter)


def recurrent_classes(op: UlamOperator) -> int:
    """Number of closed communicating classes among cells with non-zero rows.

    Heuristic irreducibility check: 1 means a single essential class.
    """
    m = op.matrix.copy()
    alive = op.row_sums() > 0
    m = m[alive][:, alive]
    if m.shape[0] == 0:
        return 0
    ncomp, labels = connected_components(m, directed=True, connection="strong")
    coo = m.tocoo()
    leaves = np.zeros(ncomp, dtype=bool)
    out = labels[coo.row] != labels[coo.col]
    leaves[labels[coo.row[out]]] = True
    # singletons without a self loop are transient, not classes
    sizes = np.bincount(labels, minlength=ncomp)
    selfloop = np.zeros(ncomp, dtype=bool)
    diag = coo.row == coo.col
    selfloop[labels[coo.row[diag]]] = True
    essential = ~leaves & ((sizes > 1) | selfloop)
    return int(essential.sum())


def variation(v) -> float:
    """Discrete total variation ``sum |v_{i+1} - v_i|``."""
    vals = v.values if isinstance(v, DensityVector) else np.asarray(v, dtype=float)
    return float(np.abs(np.diff(vals)).sum())


def ly_diagnostic(op: UlamOperator, f0: DensityVector, n_max: int) -> list[tuple[int, float]]:
    out = [(0, variation(f0))]
    v = f0.values
    for n in range(1, n_max + 1):
        v = op.apply_values(v)
        out.append((n, variation(v)))
    return out


def check_eigen_identity(pair: EigenPair, noise: NoiseModel, holes: HoleFamily) -> float:
    """``|e - sum_w theta(w) ∫ g 1_{X_w} dm|``, integrals exact on the grid."""
    g = pair.vector
    total = g.total()
    s = sum(p * (total - g.integrate(holes.holes(w))) for w, p in noise.atoms)
    return abs(pair.eigenvalue - s)


_MAGIC = b"ULAMCSR1"


def dump_binary(op: UlamOperator, path) -> None:
    """Little-endian dump: magic, n_rows, n_cols, nnz (int64), cuts, indptr, indices (int64), data (float64)."""
    m = op.matrix.tocsr()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqq", m.shape[0], m.shape[1], m.nnz))
        fh.write(op.grid.cuts.astype("<f8").tobytes())
        fh.write(m.indptr.astype("<i8").tobytes())
        fh.write(m.indices.astype("<i8").tobytes())
        fh.write(m.data.astype("<f8").tobytes())


def load_binary(path, kind: str = "closed") -> UlamOperator:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not an Ulam operator dump")
        nr, nc, nnz = struct.unpack("<qqq", fh.read(24))
        cuts = np.frombuffer(fh.read(8 * (nr + 1)), dtype="<f8")
        indptr = np.frombuffer(fh.read(8 * (nr + 1)), dtype="<i8")
        indices = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
        data = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
    mat = sp.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(nr, nc))
    return UlamOperator(Grid(cuts.copy()), mat, kind)


def export_mtx(op: UlamOperator, path) -> None:
    """Matrix Market coordinate export with 17 significant digits."""
    scipy.io.mmwrite(str(path), op.matrix.tocoo(), precision=17)
