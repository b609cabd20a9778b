"""Hutchinson estimation and its variance-reduction pipelines: orthogonal
deflation of approximate singular vectors, oblique deflation from a coarse
subspace, the a-posteriori rank sweep, jackknife errors, and the truncated
solver bias correction.

Samples are per noise vector: the dilution and probing slots of each noise
vector are summed (they decompose the noise vector), and the estimator
averages over noise vectors only.  The reported variance is the unbiased
per-sample variance divided by the sample count, with a leave-one-out
jackknife error on the same scale.

The oblique deflation applies the corrected operator in the decoupled form
    A^-1_xi z - Y Uhat Lam^-1 Uhat^dag Ubar^dag W^dag g5 z,
    Y = A^-1_xi (A W Ubar),
which coincides with solving on the projected vector in exact arithmetic
and lets the rank sweep reuse one set of solves for every rank.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .krylov import SolveConfig, TruncatedInverse


class DeflationContractError(ValueError):
    pass


class SpuriousModeError(ValueError):
    def __init__(self, index, lam, lam_max):
        self.index = index
        super().__init__(
            f"spurious coarse mode {index}: |lambda| = {abs(lam):.3e} "
            f"< 1e-12 * {lam_max:.3e}; reduce the deflation rank"
        )


@dataclass
class TraceEstimate:
    mean: complex
    samples: np.ndarray
    s: int
    variance: float
    jackknife_err: float
    inversions: int
    t0: complex = 0.0 + 0.0j
    t1: complex = 0.0 + 0.0j
    flagged: np.ndarray = None


def _unbiased_variance(samples):
    if len(samples) < 2:
        return 0.0
    m = samples.mean()
    return float(np.sum(np.abs(samples - m) ** 2) / (len(samples) - 1))


def jackknife(samples):
    """Leave-one-out jackknife error of the unbiased sample variance:
    returns (variance, error).  Deterministic; needs >= 2 samples."""
    s = np.asarray(samples)
    n = len(s)
    if n < 2:
        raise ValueError("jackknife needs at least 2 samples")
    full = _unbiased_variance(s)
    loo = np.array([_unbiased_variance(np.delete(s, i)) for i in range(n)])
    err = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return full, err


def _finish(t0, samples, inversions, flagged=None):
    samples = np.asarray(samples, dtype=np.complex128)
    s = len(samples)
    t1 = samples.mean() if s else 0.0 + 0.0j
    if s >= 2:
        var, err = jackknife(samples)
        var, err = var / s, err / s
    else:
        var, err = 0.0, 0.0
    return TraceEstimate(
        mean=complex(t0 + t1),
        samples=samples,
        s=s,
        variance=var,
        jackknife_err=err,
        inversions=inversions,
        t0=complex(t0),
        t1=complex(t1),
        flagged=flagged,
    )


def _group_samples(apply_fn, probes, health=None):
    """Per-noise-group quadratic-form samples, accumulated in slot order so
    reruns are bit-identical."""
    samples = np.empty(probes.sample_count, dtype=np.complex128)
    flagged = np.zeros(probes.sample_count, dtype=bool)
    for gi, g in enumerate(probes.groups):
        acc = 0.0 + 0.0j
        for w, slot in zip(g.weights, g.slots):
            y = apply_fn(slot)
            acc = acc + w * np.vdot(slot, y)
            if health is not None and not health():
                flagged[gi] = True
        samples[gi] = acc
    if flagged.any():
        warnings.warn(
            f"{int(flagged.sum())} sample(s) used non-converged solves "
            "(kept with TSM semantics)"
        )
    return samples, flagged


def _solve_health(inv_op):
    if isinstance(inv_op, TruncatedInverse):
        return lambda: inv_op.last_report is None or inv_op.last_report.converged
    return None


def hutchinson(inv_op, probes):
    """Stochastic trace estimate of the operator behind inv_op."""
    if probes.sample_count == 0:
        raise ValueError("need at least one probe group")
    before = getattr(inv_op, "n_solves", None)
    samples, flagged = _group_samples(inv_op, probes, _solve_health(inv_op))
    if before is not None:
        inversions = inv_op.n_solves - before
    else:
        inversions = probes.slot_count
    return _finish(0.0, samples, inversions, flagged)


def eq2_variance(dense_b):
    """Rademacher variance formula for one sample:
    2 (||B||_F^2 - sum_i |B_ii|^2).  Exact for complex-symmetric B; an
    oracle-scale diagnostic only (needs the dense matrix)."""
    b = np.asarray(dense_b)
    return float(2.0 * (np.linalg.norm(b, "fro") ** 2 - np.sum(np.abs(np.diag(b)) ** 2)))


def rademacher_variance_exact(dense_b):
    """Exact Var[x^dag B x] over Rademacher x for arbitrary B:
    sum_{i != j} (|B_ij|^2 + B_ij conj(B_ji)); reduces to eq2_variance when
    B is complex-symmetric."""
    b = np.asarray(dense_b)
    off = b - np.diag(np.diag(b))
    return float(np.sum(np.abs(off) ** 2).real + np.sum(off * np.conj(off.T)).real)


def singular_variance_estimate(sigmas, deflated=0):
    """Predicted Hutchinson variance sum sigma_i^-2 over the retained
    spectrum; `deflated` drops that many of the smallest singular values."""
    s = np.sort(np.asarray(sigmas, dtype=float))
    if np.any(s <= 0):
        raise ValueError("singular values must be positive")
    return float(np.sum(s[deflated:] ** -2.0))


def deflate_orthogonal(inv_op, U, probes):
    """Trace estimate with the orthogonal projector of the columns of U:
    deterministic part t0 = sum_i u_i^dag A^-1 u_i, stochastic part on
    x -> A^-1 x - (A^-1 U)(U^dag x).  The U-block solves are computed once
    and reused across probes."""
    U = np.asarray(U)
    k = U.shape[1] if U.ndim == 2 else 0
    before = getattr(inv_op, "n_solves", 0)
    if k == 0:
        samples, flagged = _group_samples(inv_op, probes, _solve_health(inv_op))
        inversions = getattr(inv_op, "n_solves", probes.slot_count) - before
        return _finish(0.0, samples, inversions or probes.slot_count, flagged)

    gram = U.conj().T @ U - np.eye(k)
    if np.abs(gram).max() > 1e-6:
        raise DeflationContractError(
            f"U not orthonormal: ||U^dag U - I||_max = {np.abs(gram).max():.3e}"
        )
    Y = np.column_stack([inv_op(U[:, i]) for i in range(k)])
    t0 = complex(np.einsum("ij,ij->", U.conj(), Y))

    def apply(z):
        return inv_op(z) - Y @ (U.conj().T @ z)

    samples, flagged = _group_samples(apply, probes, _solve_health(inv_op))
    inversions = getattr(inv_op, "n_solves", None)
    inversions = (inversions - before) if inversions is not None else probes.slot_count + k
    return _finish(t0, samples, inversions, flagged)


@dataclass
class ObliqueFactors:
    """Small factors of the coarse oblique deflation at a given rank:
    Uhat Lam Uhat^dag = Ubar^dag g5c (W^dag A W) Ubar, U = Ubar Uhat."""

    rank: int
    lam: np.ndarray  # ascending |lambda|
    uhat: np.ndarray
    s_small: np.ndarray  # the Hermitian small matrix
    t_small: np.ndarray  # Ubar^dag g5c Ubar
    t0: complex

    def minv(self):
        return self.uhat @ np.diag(1.0 / self.lam) @ self.uhat.conj().T


def _factorize_small(s_small, t_small):
    k = s_small.shape[0]
    lam, uhat = np.linalg.eigh(0.5 * (s_small + s_small.conj().T))
    order = np.argsort(np.abs(lam), kind="stable")
    lam, uhat = lam[order], uhat[:, order]
    lam_max = np.abs(lam).max() if k else 0.0
    for i, l in enumerate(lam):
        if abs(l) < 1e-12 * lam_max:
            raise SpuriousModeError(i, l, lam_max)
    t0 = complex(np.trace(uhat.conj().T @ t_small @ uhat @ np.diag(1.0 / lam))) if k else 0j
    return lam, uhat, t0


def oblique_factors(op, prolongator, coarse_triplets, rank):
    """Assemble the rank-leading small matrices of Algorithm-2 deflation
    from fine-level applications; also returns the fine columns A W Ubar."""
    if rank > coarse_triplets.count:
        raise ValueError(f"rank {rank} exceeds the {coarse_triplets.count} available triplets")
    ubar = coarse_triplets.left[:, :rank]
    wu = prolongator.matrix @ ubar  # N x r
    g_cols = op.matrix @ wu  # A W Ubar
    s_small = wu.conj().T @ (op.gamma5_diag[:, None] * g_cols)
    g5c = prolongator.coarse_gamma5
    t_small = ubar.conj().T @ (g5c[:, None] * ubar)
    lam, uhat, t0 = _factorize_small(s_small, t_small)
    factors = ObliqueFactors(rank, lam, uhat, s_small, t_small, t0)
    return factors, ubar, g_cols


def deflate_oblique_coarse(op, inv_op, prolongator, coarse_triplets, rank, probes):
    """Algorithm-2 trace estimate: oblique deflation of the coarse singular
    subspace W Ubar with K = gamma5.

    t0 = sum_i (u_i^dag g5c u_i) / lambda_i over the factorized small
    matrix; the stochastic part applies
    x -> A^-1_xi x - Y Uhat Lam^-1 Uhat^dag (Ubar^dag W^dag g5 x) with the
    rank columns Y = A^-1_xi(A W Ubar) solved once.
    """
    before = getattr(inv_op, "n_solves", 0)
    if rank == 0:
        samples, flagged = _group_samples(inv_op, probes, _solve_health(inv_op))
        inversions = getattr(inv_op, "n_solves", probes.slot_count) - before
        return _finish(0.0, samples, inversions or probes.slot_count, flagged)

    factors, ubar, g_cols = oblique_factors(op, prolongator, coarse_triplets, rank)
    Y = np.column_stack([inv_op(g_cols[:, i]) for i in range(rank)])
    minv = factors.minv()
    WH = prolongator.matrix.conj().T.tocsr()
    UbarH = ubar.conj().T
    YH = Y.conj().T

    samples = np.empty(probes.sample_count, dtype=np.complex128)
    flagged = np.zeros(probes.sample_count, dtype=bool)
    health = _solve_health(inv_op)
    for gi, g in enumerate(probes.groups):
        acc = 0.0 + 0.0j
        for w, slot in zip(g.weights, g.slots):
            y = inv_op(slot)
            q = np.vdot(slot, y)
            gsl = UbarH @ (WH @ (op.gamma5_diag * slot))
            hsl = YH @ slot
            acc = acc + w * (q - np.vdot(hsl, minv @ gsl))
            if health is not None and not health():
                flagged[gi] = True
        samples[gi] = acc
    inversions = getattr(inv_op, "n_solves", None)
    inversions = (inversions - before) if inversions is not None else probes.slot_count + rank
    return _finish(factors.t0, samples, inversions, flagged)


@dataclass
class PosteriorAnalysis:
    """Stored small products of one expensive solve pass, from which the
    deflated estimate can be re-evaluated at any rank: per-slot solved
    quadratic forms q, the probe products H = Y^dag Z and
    G = Ubar^dag W^dag g5 Z, and the k_max x k_max small matrices.  No
    fine-dimension vector is retained."""

    rank_grid: list
    k_max: int
    weights: list  # per group
    q: list  # per group, per slot
    h: list  # per group: (n_slots, k_max)
    g: list  # per group: (n_slots, k_max)
    s_small: np.ndarray
    t_small: np.ndarray
    inversions: int
    variances: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def storage_entries(self):
        n = self.s_small.size + self.t_small.size
        for qs, hs, gs, ws in zip(self.q, self.h, self.g, self.weights):
            n += qs.size + hs.size + gs.size + ws.size
        return n

    def factors_at(self, rank):
        lam, uhat, t0 = _factorize_small(
            self.s_small[:rank, :rank], self.t_small[:rank, :rank]
        )
        return ObliqueFactors(rank, lam, uhat, self.s_small[:rank, :rank],
                              self.t_small[:rank, :rank], t0)

    def samples_at(self, rank):
        if rank == 0:
            minv = None
        else:
            minv = self.factors_at(rank).minv()
        out = np.empty(len(self.q), dtype=np.complex128)
        for gi, (qs, hs, gs, ws) in enumerate(zip(self.q, self.h, self.g, self.weights)):
            acc = 0.0 + 0.0j
            for si in range(len(qs)):
                if rank == 0:
                    acc = acc + ws[si] * qs[si]
                else:
                    acc = acc + ws[si] * (
                        qs[si] - np.vdot(hs[si, :rank], minv @ gs[si, :rank])
                    )
            out[gi] = acc
        return out

    def estimate_at(self, rank):
        t0 = self.factors_at(rank).t0 if rank else 0.0 + 0.0j
        return _finish(t0, self.samples_at(rank), self.inversions)


def posterior_rank_sweep(op, inv_op, prolongator, coarse_triplets, probes, rank_grid):
    """One pass of expensive solves (the probes and the k_max columns of
    A^-1_xi(A W Ubar)), then the deflated variance at every rank in
    rank_grid by small dense algebra; per-sample values match a from-scratch
    deflate_oblique_coarse run at each rank."""
    rank_grid = sorted(set(int(r) for r in rank_grid))
    if any(r < 0 for r in rank_grid):
        raise ValueError("ranks must be >= 0")
    k_max = max(rank_grid)
    if k_max > coarse_triplets.count:
        raise ValueError(
            f"rank grid up to {k_max} exceeds the {coarse_triplets.count} stored triplets"
        )
    before = getattr(inv_op, "n_solves", 0)

    if k_max > 0:
        factors, ubar, g_cols = oblique_factors(op, prolongator, coarse_triplets, k_max)
        Y = np.column_stack([inv_op(g_cols[:, i]) for i in range(k_max)])
        s_small, t_small = factors.s_small, factors.t_small
        WH = prolongator.matrix.conj().T.tocsr()
        UbarH = ubar.conj().T
        YH = Y.conj().T
    else:
        ubar = Y = None
        s_small = t_small = np.zeros((0, 0), dtype=np.complex128)

    qs, hs, gs, ws = [], [], [], []
    for g in probes.groups:
        nsl = g.slots.shape[0]
        q = np.empty(nsl, dtype=np.complex128)
        h = np.empty((nsl, k_max), dtype=np.complex128)
        gg = np.empty((nsl, k_max), dtype=np.complex128)
        for si, slot in enumerate(g.slots):
            y = inv_op(slot)
            q[si] = np.vdot(slot, y)
            if k_max > 0:
                gg[si] = UbarH @ (WH @ (op.gamma5_diag * slot))
                h[si] = YH @ slot
        qs.append(q)
        hs.append(h)
        gs.append(gg)
        ws.append(np.array(g.weights))
    inversions = getattr(inv_op, "n_solves", None)
    inversions = (inversions - before) if inversions is not None else probes.slot_count + k_max

    post = PosteriorAnalysis(rank_grid, k_max, ws, qs, hs, gs, s_small, t_small, inversions)
    for r in rank_grid:
        est = post.estimate_at(r)
        post.variances[r] = est.variance
        post.estimates[r] = est.mean
        post.errors[r] = est.jackknife_err
    return post


def tsm_correction(op, xi_low, xi_high, s_corr, seed, kind="z4", solver=None,
                   max_iter=5000):
    """Truncated-solver bias correction: the mean of
    x^dag (A^-1_{xi_high} x - A^-1_{xi_low} x) over s_corr independent noise
    vectors.  xi_high == xi_low returns exactly 0 (identical solver path)."""
    if xi_high > xi_low:
        raise ValueError("expected xi_high <= xi_low (xi_high is the tighter tolerance)")
    from .probing import make_noise
    from .probing import ProbeGroup, ProbeSet

    inv_hi = TruncatedInverse(op, SolveConfig(tol=xi_high, max_iter=max_iter), solver=solver)
    inv_lo = TruncatedInverse(op, SolveConfig(tol=xi_low, max_iter=max_iter), solver=solver)

    groups = []
    for j in range(s_corr):
        z = make_noise(op.dim, kind=kind, seed=seed + j).values
        groups.append(ProbeGroup(z[None, :], np.ones(1)))
    probes = ProbeSet(groups, kind=kind)
    est = hutchinson(lambda z: inv_hi(z) - inv_lo(z), probes)
    return est.mean
