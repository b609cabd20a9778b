"""Inexact shift-invert eigensolver for gamma5-Hermitian operators.

The outer iteration is a block-size-1 Davidson with thick restart on the
operator T = gamma5 (A + i tau gamma5)^-1_xi = (A gamma5 + i tau I)^-1_xi,
expanding the search space with residuals (the inexact inverse plays the
preconditioner role).  For tau = 0 the projected problem is Hermitian; for
tau > 0 it is normal and extraction uses a Schur decomposition reordered by
Ritz magnitude.  A pair is converged when ||T x - theta x|| <= tol * |T|_est
with |T|_est the largest Ritz magnitude seen so far; the inexact solves
limit the attainable eigenvector accuracy to the solver tolerance.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .krylov import SolveConfig, TruncatedInverse
from .lattice import DENSE_GUARD, SizeGuardError


class ShiftTooSmallError(RuntimeError):
    """Inner solver stagnated in the first outer iterations; retry with a
    larger i*tau*gamma5 shift."""


@dataclass
class EigenConfig:
    k: int = 10
    tol: float = 1e-2
    tau: float = 0.0
    max_basis: int = 0  # 0 -> 2k + 16
    max_restarts: int = 80
    inner: SolveConfig = field(default_factory=SolveConfig)
    keep: int = 0  # thick-restart size, 0 -> k + 4
    shift_retries: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.max_basis:
            self.max_basis = 2 * self.k + 16
        if not self.keep:
            self.keep = self.k + 4
        if self.max_basis < self.k + 2:
            raise ValueError("max_basis must be >= k + 2")


@dataclass
class EigenResult:
    """Eigenpairs of A gamma5, ordered by ascending |lambda| (equivalently
    by descending |(lambda + i tau)^-1|)."""

    lambdas: np.ndarray  # real eigenvalue estimates of A gamma5
    vectors: np.ndarray  # (N, k) columns
    residuals: np.ndarray  # ||A gamma5 x - lambda x|| per pair
    converged: np.ndarray  # bool per pair
    inversions: int
    tau: float
    norm_inv_est: float  # running estimate of ||(A + i tau gamma5)^-1||


@dataclass
class SingularTriplets:
    """Ordered sigma_i > 0 ascending with left/right vectors and the signed
    eigenvalues of A gamma5 they came from."""

    sigmas: np.ndarray
    left: np.ndarray  # (N, k) u_i
    right: np.ndarray  # (N, k) v_i = sign(lambda_i) gamma5 u_i
    lambdas: np.ndarray
    residuals: np.ndarray

    @property
    def count(self):
        return len(self.sigmas)


def _mgs(v, basis_cols):
    """Orthogonalize v against the columns in basis_cols, MGS run twice."""
    for _ in range(2):
        for Q in basis_cols:
            if Q is None or Q.shape[1] == 0:
                continue
            v = v - Q @ (Q.conj().T @ v)
    return v


def _reorder_schur(T, Z):
    """Unitarily reorder a complex Schur form so |diag| is descending.

    Adjacent swaps: for the 2x2 triangular block [[a, c], [0, b]] the
    rotation built from the eigenvector [c, b - a] of eigenvalue b exchanges
    the diagonal entries while keeping the form triangular.
    """
    T = T.copy()
    Z = Z.copy()
    m = T.shape[0]
    for i in range(m):
        j = i + int(np.argmax(np.abs(np.diag(T)[i:])))
        for p in range(j, i, -1):  # bubble position j up to i
            a, b, c = T[p - 1, p - 1], T[p, p], T[p - 1, p]
            v = np.array([c, b - a])
            nv = np.linalg.norm(v)
            if nv < 1e-300:
                continue  # equal eigenvalues, order immaterial
            v /= nv
            G = np.array([[v[0], -np.conj(v[1])], [v[1], np.conj(v[0])]])
            T[:, p - 1 : p + 1] = T[:, p - 1 : p + 1] @ G
            T[p - 1 : p + 1, :] = G.conj().T @ T[p - 1 : p + 1, :]
            Z[:, p - 1 : p + 1] = Z[:, p - 1 : p + 1] @ G
            T[p, p - 1] = 0.0
    return T, Z


def _extract(G, hermitian):
    """Ritz values/vectors of the projected matrix, |theta| descending.
    Returns (thetas, Z) with Z unitary; column j is an exact eigenvector of
    G for j = 0 (and for all j in the Hermitian case)."""
    if hermitian:
        theta, Z = np.linalg.eigh(0.5 * (G + G.conj().T))
        order = np.argsort(-np.abs(theta), kind="stable")
        return theta[order], Z[:, order]
    T, Z = sla.schur(G, output="complex")
    T, Z = _reorder_schur(T, Z)
    return np.diag(T).copy(), Z


def shift_inverter_factory(op, inner_config, solver=None):
    """Factory tau -> TruncatedInverse on (A + i tau gamma5), the form the
    eigensolver rebuilds when escalating the shift."""

    def make(tau):
        shifted = _ShiftedOperator(op, tau)
        return TruncatedInverse(shifted, inner_config, solver=solver)

    return make


class _ShiftedOperator:
    def __init__(self, op, tau):
        self.op = op
        self.tau = tau
        self.dim = op.dim
        self.geometry = op.geometry
        self.dof = op.dof
        self.gamma5_diag = op.gamma5_diag
        self.matrix = op.shifted_matrix(tau)

    def apply(self, x):
        return self.matrix @ x


def inexact_eigensolve(op, gamma5, config, inverter):
    """Smallest-|lambda| eigenpairs of A gamma5 via Davidson on
    gamma5 (A + i tau gamma5)^-1_xi.

    `inverter` is a factory tau -> apply-callable (see
    shift_inverter_factory); when the inner solver stagnates within the
    first few outer iterations the shift is escalated,
    tau <- max(2 tau, tau0), and the search restarts, up to
    config.shift_retries times.  Exhausting the outer budget returns
    partial results with per-pair convergence flags.
    """
    N = op.dim
    gamma5 = np.asarray(gamma5)
    rng = np.random.default_rng(12345)
    tau = config.tau
    tau0 = None
    inversions = 0

    for retry in range(config.shift_retries + 1):
        apply_inv = inverter(tau)

        def t_apply(x):
            y = apply_inv(x)
            return gamma5 * y

        try:
            result = _davidson(op, gamma5, config, t_apply, apply_inv, rng, tau)
            result.inversions += inversions
            result.tau = tau
            return result
        except ShiftTooSmallError:
            inversions += getattr(apply_inv, "n_solves", 0)
            if retry == config.shift_retries:
                raise
            if tau0 is None:
                tau0 = 0.05 * _norm_estimate(op, rng)
            tau = max(2 * tau, tau0)
    raise AssertionError("unreachable")


def _norm_estimate(op, rng, iters=8):
    """Power iteration on the Hermitian A gamma5 for sigma_max."""
    H = op.a_gamma5()
    x = rng.normal(size=op.dim) + 1j * rng.normal(size=op.dim)
    x /= np.linalg.norm(x)
    lam = 1.0
    for _ in range(iters):
        y = H @ x
        lam = np.linalg.norm(y)
        if lam == 0:
            return 1.0
        x = y / lam
    return lam


def _davidson(op, gamma5, config, t_apply, apply_inv, rng, tau):
    N = op.dim
    hermitian = tau == 0.0
    k = config.k

    locked = np.zeros((N, 0), dtype=np.complex128)
    locked_theta = []
    Q = np.zeros((N, 0), dtype=np.complex128)
    W = np.zeros((N, 0), dtype=np.complex128)
    G = np.zeros((0, 0), dtype=np.complex128)

    v = rng.normal(size=N) + 1j * rng.normal(size=N)
    v /= np.linalg.norm(v)

    inversions = 0
    restarts = 0
    norm_est = 0.0
    budget = config.max_restarts * config.max_basis
    exhausted = False

    def apply_counted(x):
        nonlocal inversions
        y = t_apply(x)
        inversions += 1
        rep = getattr(apply_inv, "last_report", None)
        if rep is not None and not rep.converged and inversions <= 3:
            raise ShiftTooSmallError(
                f"inner solve stagnated at relres {rep.final_relres:.2e} "
                f"(application {inversions}, tau={tau})"
            )
        return y

    while inversions < budget and not exhausted:
        w = apply_counted(v)
        # grow the projected matrix
        Q = np.column_stack([Q, v])
        W = np.column_stack([W, w])
        Gnew = np.empty((Q.shape[1], Q.shape[1]), dtype=np.complex128)
        Gnew[: G.shape[0], : G.shape[1]] = G
        Gnew[-1, :] = v.conj() @ W
        Gnew[:, -1] = Q.conj().T @ w
        G = Gnew

        # Lock leading Ritz pairs.  The residual through W carries the
        # accumulated inexact-solve noise (at the tol * |T| scale itself),
        # so it only screens; a candidate is locked on the residual of one
        # fresh operator application, which otherwise becomes the expansion
        # direction.  Remaining Ritz vectors stay orthonormal to the locked
        # one, so the basis transform below is exact.
        ry = None
        while Q.shape[1] > 0 and inversions < budget:
            theta, Z = _extract(G, hermitian)
            norm_est = max(norm_est, float(np.abs(theta[0])))
            y = Q @ Z[:, 0]
            ry = W @ Z[:, 0] - theta[0] * y
            if np.linalg.norm(ry) > 1.5 * config.tol * norm_est:
                break
            w_fresh = apply_counted(y)
            theta_f = np.vdot(y, w_fresh)
            norm_est = max(norm_est, float(abs(theta_f)))
            r_fresh = w_fresh - theta_f * y
            if np.linalg.norm(r_fresh) > config.tol * norm_est:
                ry = r_fresh
                break
            locked = np.column_stack([locked, y / np.linalg.norm(y)])
            locked_theta.append(theta_f)
            Q = Q @ Z[:, 1:]
            W = W @ Z[:, 1:]
            G = Z[:, 1:].conj().T @ G @ Z[:, 1:]
            ry = None
        if len(locked_theta) >= k:
            break

        # expand with the residual of the leading unconverged pair,
        # falling back to a random direction
        candidates = [ry] if ry is not None else []
        candidates.append(rng.normal(size=N) + 1j * rng.normal(size=N))
        v = None
        for cand in candidates:
            u = _mgs(cand.copy(), [locked, Q])
            nu = np.linalg.norm(u)
            if nu > 1e-8 * max(np.linalg.norm(cand), 1e-300):
                v = u / nu
                break
        if v is None:
            # locked + Q span the whole space: nothing left to search
            exhausted = True
            break

        if Q.shape[1] + 1 >= config.max_basis:
            keep = min(config.keep, Q.shape[1])
            theta, Z = _extract(G, hermitian)
            Q = Q @ Z[:, :keep]
            W = W @ Z[:, :keep]
            G = Z[:, :keep].conj().T @ G @ Z[:, :keep]
            restarts += 1
            if restarts > config.max_restarts:
                break

    # assemble results: theta are Ritz values of (A gamma5 + i tau I)^-1
    found = locked.shape[1]
    flags = np.ones(found, dtype=bool)
    if found < k and Q.shape[1] > 0:
        theta, Z = _extract(G, hermitian)
        extra = min(k - found, Q.shape[1])
        pads = Q @ Z[:, :extra]
        for col in range(extra):
            locked = np.column_stack([locked, pads[:, col] / np.linalg.norm(pads[:, col])])
            locked_theta.append(theta[col])
        flags = np.concatenate([flags, np.zeros(extra, dtype=bool)])

    H = op.a_gamma5()
    nlocked = locked.shape[1] - (len(flags) - int(flags.sum()))
    if nlocked > 0:
        # Rayleigh-Ritz refinement of the locked block on the Hermitian
        # form itself: the shift leaves eigenvectors unchanged, and the
        # small projected eigenproblem recovers the tiny eigenvalues far
        # more accurately than inverting the shifted Ritz values.
        X = locked[:, :nlocked]
        small = X.conj().T @ (H @ X)
        d, U = np.linalg.eigh(0.5 * (small + small.conj().T))
        locked[:, :nlocked] = X @ U
        lams = np.concatenate([
            d, (1.0 / np.array(locked_theta[nlocked:]) - 1j * tau).real
        ]) if locked.shape[1] > nlocked else d
    else:
        lams = (1.0 / np.array(locked_theta) - 1j * tau).real
    residuals = np.array(
        [np.linalg.norm(H @ locked[:, i] - lams[i] * locked[:, i]) for i in range(len(lams))]
    )
    order = np.argsort(np.abs(lams), kind="stable")[:k]
    return EigenResult(
        lambdas=lams[order],
        vectors=locked[:, order],
        residuals=residuals[order],
        converged=flags[order],
        inversions=inversions,
        tau=tau,
        norm_inv_est=norm_est,
    )


def to_singular_triplets(eigen, gamma5):
    """Convert eigenpairs of A gamma5 into singular triplets of A:
    sigma = |lambda|, u = x, v = sign(lambda) gamma5 x (lambda = 0 takes
    sign +1 and is flagged by the zero residual bound)."""
    gamma5 = np.asarray(gamma5)
    lam = eigen.lambdas
    signs = np.where(lam >= 0, 1.0, -1.0)
    sig = np.abs(lam)
    order = np.argsort(sig, kind="stable")
    u = eigen.vectors[:, order]
    v = signs[order] * (gamma5[:, None] * u)
    return SingularTriplets(
        sigmas=sig[order],
        left=u,
        right=v,
        lambdas=lam[order],
        residuals=eigen.residuals[order],
    )


def dense_svd_oracle(matrix):
    """Full SVD ground truth for spectral acceptance tests (N <= 8192)."""
    matrix = np.asarray(matrix)
    if matrix.shape[0] > DENSE_GUARD:
        raise SizeGuardError(f"dense SVD oracle refuses N={matrix.shape[0]} > {DENSE_GUARD}")
    u, s, vh = np.linalg.svd(matrix)
    return u, s, vh


def dense_triplets(op):
    """Exact singular triplets of a small operator: eigendecompose the
    Hermitian A gamma5 densely, ordered ascending |lambda|."""
    if op.dim > DENSE_GUARD:
        raise SizeGuardError("dense triplet oracle size guard")
    lam, X = np.linalg.eigh(op.matrix.toarray() * op.gamma5_diag[None, :])
    order = np.argsort(np.abs(lam), kind="stable")
    lam, X = lam[order], X[:, order]
    signs = np.where(lam >= 0, 1.0, -1.0)
    return SingularTriplets(
        sigmas=np.abs(lam),
        left=X,
        right=signs * (op.gamma5_diag[:, None] * X),
        lambdas=lam,
        residuals=np.zeros_like(lam),
    )
