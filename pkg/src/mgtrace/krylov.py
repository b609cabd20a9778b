"""Iterative solvers with relative-residual stopping, the truncated inverse
operator, and fixed-iteration smoothers.

Every converged solve satisfies ||A x - b|| <= tol ||b|| with the residual
recomputed explicitly (one extra matvec), never trusted from the recursion.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class ContractViolationError(ValueError):
    pass


@dataclass
class SolveConfig:
    tol: float = 1e-8
    max_iter: int = 2000
    restart: int = 32
    kind: str = "gcr"  # gcr | minres

    def __post_init__(self):
        if not (0 < self.tol < 1):
            raise ValueError(f"tol must be in (0,1), got {self.tol}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class SolveReport:
    iterations: int
    final_relres: float
    converged: bool
    matvecs: int
    reason: str = ""


def _as_matvec(op):
    """Accept a LatticeOperator, sparse/dense matrix, or callable."""
    if hasattr(op, "apply") and hasattr(op, "dim"):
        return op.apply, op.dim
    if sp.issparse(op) or isinstance(op, np.ndarray):
        return (lambda x: op @ x), op.shape[0]
    if callable(op):
        return op, None
    raise TypeError(f"cannot interpret {type(op)} as a linear operator")


def gcr_solve(op, b, config, preconditioner=None, x0=None):
    """Restarted GCR (flexible: the preconditioner may vary per application).

    Returns (x, SolveReport).  On breakdown the best iterate so far is
    returned with converged=False and a reason, so callers can treat it as a
    soft failure.
    """
    matvec, _ = _as_matvec(op)
    b = np.asarray(b, dtype=np.complex128)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True, 0)

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.complex128)
    matvecs = 0
    if x0 is None:
        r = b.copy()
    else:
        r = b - matvec(x)
        matvecs += 1

    zs, qs = [], []
    it = 0
    relres = np.linalg.norm(r) / bnorm
    reason = "max_iter"
    while it < config.max_iter:
        if relres <= config.tol:
            # confirm against the explicitly recomputed residual
            r = b - matvec(x)
            matvecs += 1
            relres = np.linalg.norm(r) / bnorm
            if relres <= config.tol:
                return x, SolveReport(it, relres, True, matvecs)
            zs, qs = [], []
        z = r.copy() if preconditioner is None else preconditioner(r)
        q = matvec(z)
        matvecs += 1
        qn0 = np.linalg.norm(q)
        for zj, qj in zip(zs, qs):
            beta = np.vdot(qj, q)
            q = q - beta * qj
            z = z - beta * zj
        qn = np.linalg.norm(q)
        if qn <= 1e-14 * max(qn0, 1e-300):
            reason = "breakdown"
            break
        q /= qn
        z /= qn
        alpha = np.vdot(q, r)
        x = x + alpha * z
        r = r - alpha * q
        zs.append(z)
        qs.append(q)
        it += 1
        relres = np.linalg.norm(r) / bnorm
        if len(zs) >= config.restart:
            zs, qs = [], []
            r = b - matvec(x)
            matvecs += 1
            relres = np.linalg.norm(r) / bnorm

    r = b - matvec(x)
    matvecs += 1
    relres = np.linalg.norm(r) / bnorm
    if relres <= config.tol:
        return x, SolveReport(it, relres, True, matvecs)
    return x, SolveReport(it, relres, False, matvecs, reason=reason)


def _check_hermitian(matvec, n, tol=1e-10):
    rng = np.random.default_rng(321)
    x = rng.normal(size=n) + 1j * rng.normal(size=n)
    y = rng.normal(size=n) + 1j * rng.normal(size=n)
    hx, hy = matvec(x), matvec(y)
    lhs, rhs = np.vdot(x, hy), np.vdot(hx, y)
    scale = np.linalg.norm(hx) * np.linalg.norm(y) + np.linalg.norm(hy) * np.linalg.norm(x)
    if abs(lhs - rhs) > tol * max(scale, 1e-300):
        raise ContractViolationError(
            f"operator not Hermitian: |<x,Hy>-<Hx,y>| = {abs(lhs - rhs):.3e}"
        )
    return 2


def minres_solve(op, b, config):
    """MINRES for complex Hermitian (possibly indefinite) operators.

    Hermiticity is spot-checked on a random pair (the caller contract);
    violation beyond 1e-10 raises ContractViolationError.
    """
    matvec, n = _as_matvec(op)
    b = np.asarray(b, dtype=np.complex128)
    if n is None:
        n = b.shape[0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True, 0)
    matvecs = _check_hermitian(matvec, n)

    x = np.zeros_like(b)
    v_prev = np.zeros_like(b)
    v = b / bnorm
    beta = 0.0  # Lanczos off-diagonal coupling to v_prev
    eta = bnorm  # residual-norm recursion
    c, c_prev = 1.0, 1.0  # Givens cosines (current, previous)
    s, s_prev = 0.0, 0.0  # Givens sines
    w = np.zeros_like(b)
    w_prev = np.zeros_like(b)

    it = 0
    reason = "max_iter"
    while it < config.max_iter:
        z = matvec(v)
        matvecs += 1
        alpha = np.vdot(v, z).real
        z = z - alpha * v - beta * v_prev
        beta_new = np.linalg.norm(z)

        delta = c * alpha - c_prev * s * beta
        rho1 = np.hypot(delta, beta_new)
        rho2 = s * alpha + c_prev * c * beta
        rho3 = s_prev * beta
        if rho1 <= 1e-300:
            reason = "breakdown"
            break
        c_prev, s_prev = c, s
        c, s = delta / rho1, beta_new / rho1

        w_new = (v - rho3 * w_prev - rho2 * w) / rho1
        x = x + (c * eta) * w_new
        eta = -s * eta
        w_prev, w = w, w_new
        it += 1

        if beta_new <= 1e-300:
            reason = "invariant subspace"
            break
        v_prev, v = v, z / beta_new
        beta = beta_new
        if abs(eta) / bnorm <= config.tol:
            break

    r = b - matvec(x)
    matvecs += 1
    relres = np.linalg.norm(r) / bnorm
    ok = relres <= config.tol
    return x, SolveReport(it, relres, ok, matvecs, reason="" if ok else reason)


@dataclass
class TruncatedInverse:
    """A^-1_xi: each application runs a fresh solve from a zero initial
    guess, so the map is a fixed deterministic function of its input.
    Counters accumulate across applications (exact totals; shard per worker
    when applying concurrently)."""

    op: object
    config: SolveConfig
    solver: object = None  # callable(op, b, config) -> (x, report); None = by kind
    n_solves: int = 0
    total_iterations: int = 0
    total_matvecs: int = 0
    n_failed: int = 0
    last_report: SolveReport = None

    def __call__(self, b):
        if self.solver is not None:
            x, rep = self.solver(self.op, b, self.config)
        elif self.config.kind == "minres":
            x, rep = minres_solve(self.op, b, self.config)
        else:
            x, rep = gcr_solve(self.op, b, self.config)
        self.n_solves += 1
        self.total_iterations += rep.iterations
        self.total_matvecs += rep.matvecs
        if not rep.converged:
            self.n_failed += 1
        self.last_report = rep
        return x


def truncated_inverse(op, config, solver=None):
    return TruncatedInverse(op, config, solver=solver)


class Smoother:
    """Fixed-iteration GCR from a zero start; M(0) = 0 and hitting the exact
    solution early just returns it.  total_matvecs accumulates the operator
    applications spent inside, for honest cycle accounting."""

    def __init__(self, op, n_iters):
        if n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        self.op = op
        self.n_iters = n_iters
        self.total_matvecs = 0

    def __call__(self, b):
        cfg = SolveConfig(tol=1e-15, max_iter=self.n_iters, restart=self.n_iters)
        x, rep = gcr_solve(self.op, b, cfg)
        self.total_matvecs += rep.matvecs
        return x


def make_smoother(op, n_iters):
    return Smoother(op, n_iters)
