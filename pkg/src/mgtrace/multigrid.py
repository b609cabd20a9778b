"""Adaptive two-grid setup: null vectors, chiral blocking, prolongator,
Galerkin coarse operator, the two-grid cycle, and subspace-angle diagnostics.

The prolongator splits every null vector into its two chirality components
before blocking, which makes gamma5 V = V gamma5_c an exact placement
identity (gamma5 is diagonal +/-1, so the chirality projectors are
coordinate selectors).  Built hierarchies are immutable and safe to share;
solves on the same hierarchy may run concurrently.
"""

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg

from .krylov import SolveConfig, SolveReport, gcr_solve, make_smoother
from .lattice import LatticeGeometry, LatticeOperator


class BlockingError(ValueError):
    pass


@dataclass(frozen=True)
class BlockingScheme:
    """Partition of the lattice into disjoint rectangular subdomains."""

    block_dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "block_dims", tuple(int(b) for b in self.block_dims))
        if any(b < 1 for b in self.block_dims):
            raise BlockingError("block extents must be >= 1")

    def validate(self, geometry):
        if len(self.block_dims) != geometry.ndim:
            raise BlockingError("blocking dimensionality mismatch")
        for L, b in zip(geometry.dims, self.block_dims):
            if L % b != 0:
                raise BlockingError(f"block extent {b} does not divide lattice extent {L}")

    def coarse_dims(self, geometry):
        return tuple(L // b for L, b in zip(geometry.dims, self.block_dims))

    def block_count(self, geometry):
        return int(np.prod(self.coarse_dims(geometry)))

    def block_of_site(self, geometry):
        """Block index (lexicographic over the block lattice) per site."""
        n = geometry.site_count
        coords = np.array(np.unravel_index(np.arange(n), geometry.dims))
        bcoords = coords // np.array(self.block_dims)[:, None]
        return np.ravel_multi_index(bcoords, self.coarse_dims(geometry))


@dataclass
class NullVectors:
    """Approximate solutions of A y = 0 from random starts, normalized.
    residual_ratios records ||A y||/||A y0|| at the retained iterate."""

    vectors: np.ndarray  # (n, N)
    residual_ratios: np.ndarray
    seed: int
    geometry: LatticeGeometry
    dof: int
    gamma5_diag: np.ndarray
    degenerate: np.ndarray = None  # bool per vector


def generate_null_vectors(op, n, tol=1e-2, max_iter=200, seed=0):
    """Run the solver on A y = 0 from n random Gaussian starts, stopping at
    relative residual `tol` against the initial residual or `max_iter`
    iterations, then normalize.  Low singular directions survive because the
    residual minimization cannot damp them.
    """
    if n < 1:
        raise ValueError("need n >= 1 null vectors")
    rng = np.random.default_rng(seed)
    N = op.dim
    vecs = np.empty((n, N), dtype=np.complex128)
    ratios = np.empty(n)
    degenerate = np.zeros(n, dtype=bool)
    cfg = SolveConfig(tol=tol, max_iter=max_iter, restart=max_iter)
    for i in range(n):
        y = None
        for attempt in range(3):
            y0 = rng.normal(size=N) + 1j * rng.normal(size=N)
            # A y = 0 from start y0  <=>  A d = -A y0 from zero start
            b = -op.apply(y0)
            d, rep = gcr_solve(op, b, cfg)
            y = y0 + d
            if rep.converged or rep.reason != "breakdown":
                break
        else:
            raise RuntimeError(f"null-vector solve kept breaking down (vector {i})")
        ynorm = np.linalg.norm(y)
        if ynorm < 1e-8 * np.linalg.norm(y0):
            # solver hit the exact solution 0: retain a single smoother
            # iteration of the start instead, falling back to the raw start
            degenerate[i] = True
            d1, _ = gcr_solve(op, b, SolveConfig(tol=tol, max_iter=1, restart=1))
            y = y0 + d1
            ynorm = np.linalg.norm(y)
            if ynorm < 1e-8 * np.linalg.norm(y0):
                y = y0
                ynorm = np.linalg.norm(y0)
        ratios[i] = np.linalg.norm(op.apply(y)) / max(np.linalg.norm(b), 1e-300)
        vecs[i] = y / ynorm
    return NullVectors(vecs, ratios, seed, op.geometry, op.dof, op.gamma5_diag, degenerate)


class Prolongator:
    """Block-orthonormal chirality-preserving basis V.

    Columns are grouped per block; within a block the + chirality columns
    come first, then the - chirality ones, so the coarse index is site-major
    with "spin" (2 per null vector) fastest.  V^dag V = I holds by
    construction: supports are disjoint across blocks and chiralities, and
    each (block, chirality) group is orthonormalized.
    """

    def __init__(self, matrix, coarse_gamma5, blocking, geometry, fine_dof,
                 per_block_counts, dropped):
        self.matrix = matrix.tocsr()
        self.coarse_gamma5 = coarse_gamma5
        self.blocking = blocking
        self.geometry = geometry
        self.fine_dof = fine_dof
        self.per_block_counts = per_block_counts  # (m, 2) columns kept per chirality
        self.dropped = dropped

    @property
    def fine_dim(self):
        return self.matrix.shape[0]

    @property
    def coarse_dim(self):
        return self.matrix.shape[1]

    @property
    def coarse_geometry(self):
        return LatticeGeometry(self.blocking.coarse_dims(self.geometry),
                               self.geometry.boundary)

    @property
    def uniform(self):
        return bool(np.all(self.per_block_counts == self.per_block_counts[0, 0]))

    def restrict(self, x):
        return self.matrix.conj().T @ x

    def prolong(self, xc):
        return self.matrix @ xc

    def dense(self):
        return self.matrix.toarray()


def build_prolongator(null_vectors, blocking):
    """Chirality-split blocking of the null vectors with per-(block,
    chirality) modified Gram-Schmidt (run twice).  Columns whose
    post-orthogonalization norm falls below 1e-8 are dropped with a warning;
    a block with no surviving columns in some chirality is a hard error
    (blocking too fine)."""
    geo = null_vectors.geometry
    dof = null_vectors.dof
    blocking.validate(geo)
    g5 = null_vectors.gamma5_diag
    Y = null_vectors.vectors
    n = Y.shape[0]
    N = Y.shape[1]
    m = blocking.block_count(geo)

    site_of = np.repeat(np.arange(geo.site_count), dof)
    block_of = blocking.block_of_site(geo)[site_of]
    chir_masks = (g5 > 0, g5 < 0)

    cols_idx = []
    cols_val = []
    col_g5 = []
    per_block_counts = np.zeros((m, 2), dtype=int)
    dropped = 0
    col = 0
    col_ptr = []
    for b in range(m):
        in_block = block_of == b
        for ci, cmask in enumerate(chir_masks):
            support = np.flatnonzero(in_block & cmask)
            if support.size == 0:
                raise BlockingError(f"block {b} has no chirality-{'+-'[ci]} sites")
            basis = []
            for i in range(n):
                v = Y[i, support].copy()
                for _ in range(2):  # MGS with reorthogonalization
                    for u in basis:
                        v -= np.vdot(u, v) * u
                nv = np.linalg.norm(v)
                if nv < 1e-8:
                    dropped += 1
                    continue
                basis.append(v / nv)
            if not basis:
                raise BlockingError(
                    f"block {b} chirality {'+-'[ci]} lost all columns: blocking too fine"
                )
            for v in basis:
                cols_idx.append(support)
                cols_val.append(v)
                col_g5.append(1.0 if ci == 0 else -1.0)
                col_ptr.append(col)
                col += 1
            per_block_counts[b, ci] = len(basis)
    if dropped:
        warnings.warn(f"dropped {dropped} rank-deficient prolongator columns")

    nc = col
    rows = np.concatenate(cols_idx)
    data = np.concatenate(cols_val)
    cols = np.concatenate([np.full(len(ix), c) for ix, c in zip(cols_idx, col_ptr)])
    V = sp.coo_matrix((data, (rows, cols)), shape=(N, nc)).tocsr()
    return Prolongator(V, np.array(col_g5), blocking, geo, dof, per_block_counts, dropped)


class CoarseOperator(LatticeOperator):
    """Explicit sparse Galerkin operator V^dag A V with the inherited
    gamma5; recursively coarsenable when the per-block column counts are
    uniform (coarse dof = 2n per block)."""

    def __init__(self, matrix, prolongator, level=1):
        if not prolongator.uniform:
            raise BlockingError(
                "coarse operator needs uniform per-block column counts "
                "(rank-deficient blocks were dropped)"
            )
        dof = int(prolongator.per_block_counts[0].sum())
        super().__init__(prolongator.coarse_geometry, dof, matrix,
                         prolongator.coarse_gamma5)
        self.prolongator = prolongator
        self.level = level


def build_coarse_operator(op, prolongator, level=1):
    V = prolongator.matrix
    C = (V.conj().T @ (op.matrix @ V)).tocsr()
    C.eliminate_zeros()
    coarse = CoarseOperator(C, prolongator, level=level)
    # verify inherited gamma5-Hermiticity
    g5 = sp.diags(coarse.gamma5_diag)
    D = (g5 @ C @ g5 - C.conj().T).tocoo()
    scale = max(np.abs(C.data).max(), 1e-300)
    if D.nnz and np.abs(D.data).max() > 1e-12 * scale:
        raise ValueError(
            f"coarse operator lost gamma5-Hermiticity: {np.abs(D.data).max():.3e}"
        )
    return coarse


def two_grid_solve(op, prolongator, coarse_solver, smoother, b, tol, max_cycles=100):
    """Alternate coarse-grid correction and smoothing until
    ||b - A x|| <= tol ||b||.  Aborts with a report when the residual grows
    10x over the best seen.  matvecs counts fine-operator applications,
    including those inside the smoother when it exposes total_matvecs;
    coarse-level work is excluded.
    """
    b = np.asarray(b, dtype=np.complex128)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True, 0)
    x = np.zeros_like(b)
    r = b.copy()
    matvecs = 0
    sm_before = getattr(smoother, "total_matvecs", 0)
    best = np.linalg.norm(r) / bnorm
    relres = best

    def report(cycle, ok, reason=""):
        sm = getattr(smoother, "total_matvecs", sm_before) - sm_before
        return SolveReport(cycle, relres, ok, matvecs + sm, reason=reason)

    for cycle in range(max_cycles):
        if relres <= tol:
            return x, report(cycle, True)
        # coarse grid correction
        xc = coarse_solver(prolongator.restrict(r))
        x = x + prolongator.prolong(xc)
        r = b - op.apply(x)
        matvecs += 1
        # smoothing
        x = x + smoother(r)
        r = b - op.apply(x)
        matvecs += 1
        relres = np.linalg.norm(r) / bnorm
        best = min(best, relres)
        if relres > 10 * best:
            return x, report(cycle + 1, False, reason="divergence")
    return x, report(max_cycles, relres <= tol, reason="" if relres <= tol else "max_cycles")


def subspace_angles(prolongator, vectors):
    """sin of the principal angle between range(V) and each unit vector:
    sqrt(max(0, 1 - ||V^dag v||^2))."""
    V = prolongator.matrix
    vectors = np.atleast_2d(vectors)
    out = np.empty(vectors.shape[0])
    for i, v in enumerate(vectors):
        c = V.conj().T @ v
        out[i] = np.sqrt(max(0.0, 1.0 - np.vdot(c, c).real))
    return out


@dataclass
class Hierarchy:
    """Immutable multigrid hierarchy: operators[0] is the fine operator,
    prolongators[l] maps level l+1 to level l."""

    operators: list
    prolongators: list

    @property
    def levels(self):
        return len(self.operators)


def build_hierarchy(op, blockings, null_counts, null_tol=1e-2, null_max_iter=200, seed=0):
    """Build a 2- or 3-level hierarchy by recursive null-vector setup."""
    if len(blockings) != len(null_counts):
        raise BlockingError("need one null-vector count per blocking level")
    ops = [op]
    prols = []
    for lvl, (bdims, n) in enumerate(zip(blockings, null_counts)):
        cur = ops[-1]
        nv = generate_null_vectors(cur, n, tol=null_tol, max_iter=null_max_iter,
                                   seed=seed + 7 * lvl)
        P = build_prolongator(nv, BlockingScheme(tuple(bdims)))
        ops.append(build_coarse_operator(cur, P, level=lvl + 1))
        prols.append(P)
    return Hierarchy(ops, prols)


class MultigridSolver:
    """Convenience driver running two-grid cycles on a hierarchy, recursing
    through intermediate levels for 3-level hierarchies.

    The coarsest level defaults to a sparse direct solve: restarted GCR at
    the nominal 1e-1 coarse tolerance stagnates once the coarse operator
    inherits the fine level's near-criticality, and at desk scale one LU
    factorization is cheaper than the failed iterations.  Pass
    coarsest="gcr" for the purely iterative variant.
    """

    def __init__(self, hierarchy, smoother_iters=4, coarse_tol=1e-1,
                 coarse_max_iter=200, coarsest="lu"):
        self.hierarchy = hierarchy
        self.smoothers = [make_smoother(o, smoother_iters) for o in hierarchy.operators[:-1]]
        self.coarse_tol = coarse_tol
        self.coarse_max_iter = coarse_max_iter
        self.coarsest = coarsest
        self._lu = None
        if coarsest == "lu":
            self._lu = sp.linalg.splu(hierarchy.operators[-1].matrix.tocsc())

    def _coarse_solver(self, level):
        op = self.hierarchy.operators[level]
        if level == self.hierarchy.levels - 1:
            if self._lu is not None:
                return self._lu.solve
            cfg = SolveConfig(tol=self.coarse_tol, max_iter=self.coarse_max_iter, restart=32)
            return lambda rc: gcr_solve(op, rc, cfg)[0]
        P = self.hierarchy.prolongators[level]
        inner = self._coarse_solver(level + 1)
        sm = self.smoothers[level]
        return lambda rc: two_grid_solve(op, P, inner, sm, rc, self.coarse_tol,
                                         max_cycles=self.coarse_max_iter)[0]

    def solve(self, b, tol, max_cycles=100):
        return two_grid_solve(self.hierarchy.operators[0], self.hierarchy.prolongators[0],
                              self._coarse_solver(1), self.smoothers[0], b, tol, max_cycles)


def dump_hierarchy(hierarchy, outdir):
    """Portable dump: manifest.csv plus one prolongator-columns CSV per
    level with rows (col, site, spin, re, im)."""
    os.makedirs(outdir, exist_ok=True)
    manifest = os.path.join(outdir, "hierarchy_manifest.csv")
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["level", "dims", "block_dims", "coarse_dim", "fine_dof", "columns_file"])
        for lvl, P in enumerate(hierarchy.prolongators):
            fname = f"level{lvl}_columns.csv"
            w.writerow([lvl, "x".join(map(str, P.geometry.dims)),
                        "x".join(map(str, P.blocking.block_dims)),
                        P.coarse_dim, P.fine_dof, fname])
            coo = P.matrix.tocoo()
            order = np.lexsort((coo.row, coo.col))
            with open(os.path.join(outdir, fname), "w", newline="") as g:
                cw = csv.writer(g)
                cw.writerow(["col", "site", "spin", "re", "im"])
                for k in order:
                    row, col, v = int(coo.row[k]), int(coo.col[k]), coo.data[k]
                    cw.writerow([col, row // P.fine_dof, row % P.fine_dof,
                                 f"{v.real:.17g}", f"{v.imag:.17g}"])
    return manifest


def load_hierarchy(fine_op, outdir):
    """Rebuild a hierarchy from a dump, recomputing the Galerkin operators."""
    manifest = os.path.join(outdir, "hierarchy_manifest.csv")
    prols = []
    ops = [fine_op]
    with open(manifest, newline="") as f:
        rows = list(csv.DictReader(f))
    for rec in rows:
        cur = ops[-1]
        block_dims = tuple(int(v) for v in rec["block_dims"].split("x"))
        nc = int(rec["coarse_dim"])
        dof = int(rec["fine_dof"])
        rr, cc, vv = [], [], []
        with open(os.path.join(outdir, rec["columns_file"]), newline="") as g:
            for line in csv.DictReader(g):
                rr.append(int(line["site"]) * dof + int(line["spin"]))
                cc.append(int(line["col"]))
                vv.append(complex(float(line["re"]), float(line["im"])))
        V = sp.coo_matrix((vv, (rr, cc)), shape=(cur.dim, nc)).tocsr()
        blocking = BlockingScheme(block_dims)
        m = blocking.block_count(cur.geometry)
        per_block = np.full((m, 2), nc // (2 * m), dtype=int)
        g5c = np.tile(np.concatenate([np.ones(nc // (2 * m)), -np.ones(nc // (2 * m))]), m)
        P = Prolongator(V, g5c, blocking, cur.geometry, dof, per_block, 0)
        prols.append(P)
        ops.append(build_coarse_operator(cur, P, level=len(ops)))
    return Hierarchy(ops, prols)
