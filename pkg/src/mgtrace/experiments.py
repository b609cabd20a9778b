"""Seeded end-to-end experiment pipelines behind the CLI verbs, plus the
CSV emission and MANIFEST bookkeeping.

Every run directory gets the resolved configuration, the output CSVs, and a
MANIFEST.csv with a sha256 per file; reruns with the same configuration are
byte-identical in single-threaded mode (the reproducibility reference).
"""

import csv
import hashlib
import os

import numpy as np

from . import eigen, krylov, lattice, multigrid, probing, trace
from .config import ConfigError, ExperimentConfig, component_seed


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# construction helpers


def build_operator(cfg):
    geo = lattice.build_lattice(cfg.dims, cfg.boundary)
    if cfg.gauge_kind == "from_file":
        gauge = lattice.generate_gauge(geo, kind="from_file", path=cfg.gauge_file)
    else:
        gauge = lattice.generate_gauge(
            geo, kind=cfg.gauge_kind, beta=cfg.beta, seed=component_seed(cfg.seed, "gauge")
        )
    return lattice.build_wilson(gauge, cfg.mass)


def build_cfg_hierarchy(cfg, op):
    blockings = [cfg.block_dims]
    counts = [cfg.null_vectors]
    if cfg.levels == 3:
        blockings.append(cfg.block_dims2)
        counts.append(cfg.null_vectors2)
    return multigrid.build_hierarchy(
        op, blockings, counts, null_tol=cfg.null_tol, null_max_iter=cfg.null_max_iter,
        seed=component_seed(cfg.seed, "null_vectors"),
    )


def build_inverter(cfg, op, hierarchy=None):
    """The truncated inverse used for the stochastic estimation."""
    config = krylov.SolveConfig(tol=cfg.xi, max_iter=cfg.max_iter, restart=cfg.restart,
                                kind=cfg.solver_kind)
    if cfg.use_multigrid_inverter and hierarchy is not None:
        mg = multigrid.MultigridSolver(hierarchy, smoother_iters=cfg.smoother_iters,
                                       coarse_tol=cfg.coarse_tol)

        def solver(_op, b, sc):
            return mg.solve(b, sc.tol, max_cycles=cfg.max_iter)

        return krylov.truncated_inverse(op, config, solver=solver)
    return krylov.truncated_inverse(op, config)


def coarse_deflation_triplets(cfg, coarse_op, k):
    """Algorithm-2 line 2: inexact eigensolve on the coarse operator."""
    econf = eigen.EigenConfig(
        k=k, tol=cfg.eig_tol, tau=cfg.tau,
        max_basis=cfg.max_basis or 0,
        inner=krylov.SolveConfig(tol=cfg.xi, max_iter=cfg.max_iter, restart=cfg.restart),
    )
    factory = eigen.shift_inverter_factory(coarse_op, econf.inner)
    res = eigen.inexact_eigensolve(coarse_op, coarse_op.gamma5_diag, econf, factory)
    return eigen.to_singular_triplets(res, coarse_op.gamma5_diag), res


def fine_deflation_vectors(cfg, op, k):
    """Algorithm-1 line 1: inexact eigensolve on the fine operator."""
    econf = eigen.EigenConfig(
        k=k, tol=cfg.eig_tol, tau=cfg.tau,
        max_basis=cfg.max_basis or 0,
        inner=krylov.SolveConfig(tol=cfg.xi, max_iter=cfg.max_iter, restart=cfg.restart),
    )
    factory = eigen.shift_inverter_factory(op, econf.inner)
    res = eigen.inexact_eigensolve(op, op.gamma5_diag, econf, factory)
    trip = eigen.to_singular_triplets(res, op.gamma5_diag)
    return trip, res


# ---------------------------------------------------------------------------
# CSV + manifest plumbing

RESULT_COLUMNS = ["rank", "hp_count", "variance", "jackknife_err",
                  "t0_re", "t0_im", "estimate_re", "estimate_im", "inversions"]


def _fmt(x):
    return f"{x:.17g}"


def write_results_csv(path, rows):
    """rows: dicts with the RESULT_COLUMNS keys."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([
                r["rank"], r["hp_count"], _fmt(r["variance"]), _fmt(r["jackknife_err"]),
                _fmt(r["t0_re"]), _fmt(r["t0_im"]), _fmt(r["estimate_re"]),
                _fmt(r["estimate_im"]), r["inversions"],
            ])
    return path


def read_results_csv(path):
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append({
                "rank": int(rec["rank"]),
                "hp_count": int(rec["hp_count"]),
                "variance": float(rec["variance"]),
                "jackknife_err": float(rec["jackknife_err"]),
                "t0_re": float(rec["t0_re"]),
                "t0_im": float(rec["t0_im"]),
                "estimate_re": float(rec["estimate_re"]),
                "estimate_im": float(rec["estimate_im"]),
                "inversions": int(rec["inversions"]),
            })
    return rows


def write_angles_csv(path, sines):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["i", "sine"])
        for i, s in enumerate(sines):
            w.writerow([i, _fmt(s)])
    return path


def read_angles_csv(path):
    with open(path, newline="") as f:
        return [(int(r["i"]), float(r["sine"])) for r in csv.DictReader(f)]


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir, files, status="ok"):
    path = os.path.join(outdir, "MANIFEST.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["file", "sha256"])
        for name in sorted(files):
            w.writerow([name, sha256_file(os.path.join(outdir, name))])
        w.writerow(["_status", status])
    return path


def verify_manifest(outdir):
    """Recompute every hash in MANIFEST.csv; returns the recorded status.
    Raises on mismatch."""
    path = os.path.join(outdir, "MANIFEST.csv")
    status = None
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            if rec["file"] == "_status":
                status = rec["sha256"]
                continue
            actual = sha256_file(os.path.join(outdir, rec["file"]))
            if actual != rec["sha256"]:
                raise NumericalFailure(f"manifest mismatch for {rec['file']}")
    return status


class RunDirectory:
    """Collects output files so a failure still leaves a MANIFEST noting the
    failure point."""

    def __init__(self, outdir):
        self.outdir = outdir
        os.makedirs(outdir, exist_ok=True)
        self.files = []

    def path(self, name):
        return os.path.join(self.outdir, name)

    def add(self, name):
        self.files.append(name)
        return self.path(name)

    def finish(self, status="ok"):
        return write_manifest(self.outdir, self.files, status=status)


# ---------------------------------------------------------------------------
# orthogonal-deflation rank sweep (solve-reuse analogue of the posterior
# sweep; consistent with deflate_orthogonal per rank)


def orthogonal_rank_sweep(inv_op, U, lefts_inv, probes, rank_grid):
    """Per-rank samples of the orthogonally deflated estimator from one set
    of undeflated probe solves: U holds the deflation vectors ordered
    ascending by singular value, lefts_inv the once-solved columns
    A^-1_xi u_i."""
    rank_grid = sorted(set(int(r) for r in rank_grid))
    k_max = max(rank_grid)
    if k_max > U.shape[1]:
        raise ValueError("rank grid exceeds available vectors")
    t0_terms = np.array([np.vdot(U[:, i], lefts_inv[:, i]) for i in range(k_max)])
    per_group = []
    for g in probes.groups:
        q = np.empty(g.slots.shape[0], dtype=np.complex128)
        a = np.empty((g.slots.shape[0], k_max), dtype=np.complex128)
        ybar = np.empty((g.slots.shape[0], k_max), dtype=np.complex128)
        for si, slot in enumerate(g.slots):
            y = inv_op(slot)
            q[si] = np.vdot(slot, y)
            if k_max:
                a[si] = U[:, :k_max].conj().T @ slot
                ybar[si] = lefts_inv[:, :k_max].conj().T @ slot
        per_group.append((np.array(g.weights), q, a, ybar))

    out = {}
    for r in rank_grid:
        samples = np.empty(len(per_group), dtype=np.complex128)
        for gi, (w, q, a, ybar) in enumerate(per_group):
            acc = 0.0 + 0.0j
            for si in range(len(q)):
                if r == 0:
                    acc = acc + w[si] * q[si]
                else:
                    acc = acc + w[si] * (q[si] - np.sum(np.conj(ybar[si, :r]) * a[si, :r]))
            samples[gi] = acc
        t0 = complex(np.sum(t0_terms[:r])) if r else 0.0 + 0.0j
        out[r] = trace._finish(t0, samples, probes.slot_count + r)
    return out


# ---------------------------------------------------------------------------
# CLI verbs


def run_variance_sweep(cfg, outdir=None):
    """Fig.4-style experiment: posterior rank sweep across ranks x hp
    levels for the oblique (Algorithm 2) deflation and, when configured, the
    orthogonal (Algorithm 1) benchmark; emits results and angle CSVs."""
    run = RunDirectory(outdir or cfg.output_dir)
    stage = "setup"
    try:
        with open(run.add("resolved_config.ini"), "w") as f:
            f.write(cfg.resolved_text())
        op = build_operator(cfg)
        k_max = max(cfg.ranks)

        stage = "hierarchy"
        hierarchy = build_cfg_hierarchy(cfg, op)
        inv = build_inverter(cfg, op, hierarchy)

        stage = "coarse deflation space"
        coarse_trip = None
        if "oblique" in cfg.algorithms and k_max > 0:
            coarse_op = hierarchy.operators[-1]
            if k_max > coarse_op.dim - 2:
                raise ConfigError(f"rank {k_max} too large for coarse dim {coarse_op.dim}")
            coarse_trip, _ = coarse_deflation_triplets(cfg, coarse_op, k_max)

        stage = "fine deflation space"
        fine_trip = None
        if "orthogonal" in cfg.algorithms and k_max > 0:
            fine_trip, _ = fine_deflation_vectors(cfg, op, k_max)

        stage = "angle diagnostics"
        if fine_trip is not None:
            cum = None
            for lvl, P in enumerate(hierarchy.prolongators):
                cum = P.matrix if cum is None else cum @ P.matrix
                cumP = multigrid.Prolongator(
                    cum, hierarchy.prolongators[lvl].coarse_gamma5, P.blocking,
                    op.geometry, op.dof, P.per_block_counts, 0)
                sines = multigrid.subspace_angles(cumP, fine_trip.left.T)
                write_angles_csv(run.add(f"angles_level{lvl + 1}.csv"), sines)

        stage = "oblique sweep"
        noise_seed = component_seed(cfg.seed, "noise")
        if coarse_trip is not None:
            rows = []
            for hp in cfg.hp_counts:
                probes = probing.build_probe_set(
                    op.geometry, op.dof, cfg.n_noise, hp_count=hp,
                    dilution=cfg.dilution, kind=cfg.noise_kind, seed=noise_seed)
                post = trace.posterior_rank_sweep(op, inv, hierarchy.prolongators[0],
                                                  _fine_level_triplets(hierarchy, coarse_trip),
                                                  probes, cfg.ranks)
                for r in cfg.ranks:
                    est = post.estimate_at(r)
                    rows.append(_result_row(r, hp, est, probes.slot_count + r))
            write_results_csv(run.add("results_oblique.csv"), rows)

        stage = "orthogonal sweep"
        if fine_trip is not None:
            U = fine_trip.left[:, :k_max]
            lefts = np.column_stack([inv(U[:, i]) for i in range(k_max)]) if k_max else U
            rows = []
            for hp in cfg.hp_counts:
                probes = probing.build_probe_set(
                    op.geometry, op.dof, cfg.n_noise, hp_count=hp,
                    dilution=cfg.dilution, kind=cfg.noise_kind, seed=noise_seed)
                ests = orthogonal_rank_sweep(inv, U, lefts, probes, cfg.ranks)
                for r in cfg.ranks:
                    rows.append(_result_row(r, hp, ests[r], probes.slot_count + r))
            write_results_csv(run.add("results_orthogonal.csv"), rows)

        run.finish("ok")
        return run.outdir
    except Exception:
        run.finish(f"failed:{stage}")
        raise


def _fine_level_triplets(hierarchy, coarse_trip):
    """Express coarsest-level triplets in the first coarse level so the
    oblique deflation always works with prolongators[0]; the prolongators
    are chirality-preserving isometries, so the lifted small matrices equal
    the coarsest-level ones exactly and the deflation is unchanged.  For
    2-level hierarchies this is the identity."""
    if len(hierarchy.prolongators) == 1:
        return coarse_trip
    lift = None
    for P in hierarchy.prolongators[1:]:
        lift = P.matrix if lift is None else lift @ P.matrix
    return eigen.SingularTriplets(
        sigmas=coarse_trip.sigmas, left=lift @ coarse_trip.left,
        right=None, lambdas=coarse_trip.lambdas, residuals=coarse_trip.residuals)


def _result_row(rank, hp, est, inversions):
    return {
        "rank": rank,
        "hp_count": hp,
        "variance": est.variance,
        "jackknife_err": est.jackknife_err,
        "t0_re": est.t0.real,
        "t0_im": est.t0.imag,
        "estimate_re": est.mean.real,
        "estimate_im": est.mean.imag,
        "inversions": inversions,
    }


def _generic_davidson(apply_fn, n, k, tol, *, largest, max_basis, budget, seed):
    """Hermitian Davidson with locking for the eigensolver comparison;
    returns (applications, thetas, converged_flags)."""
    rng = np.random.default_rng(seed)
    locked = np.zeros((n, 0), dtype=np.complex128)
    locked_theta = []
    Q = np.zeros((n, 0), dtype=np.complex128)
    W = np.zeros((n, 0), dtype=np.complex128)
    G = np.zeros((0, 0), dtype=np.complex128)
    v = rng.normal(size=n) + 1j * rng.normal(size=n)
    v /= np.linalg.norm(v)
    apps = 0
    norm_est = 0.0

    def extract(G):
        theta, Z = np.linalg.eigh(0.5 * (G + G.conj().T))
        order = np.argsort(-np.abs(theta) if largest else np.abs(theta), kind="stable")
        return theta[order], Z[:, order]

    while apps < budget:
        w = apply_fn(v)
        apps += 1
        Q = np.column_stack([Q, v])
        W = np.column_stack([W, w])
        Gn = np.empty((Q.shape[1],) * 2, dtype=np.complex128)
        Gn[: G.shape[0], : G.shape[1]] = G
        Gn[-1, :] = v.conj() @ W
        Gn[:, -1] = Q.conj().T @ w
        G = Gn
        ry = None
        while Q.shape[1] > 0:
            theta, Z = extract(G)
            norm_est = max(norm_est, float(np.abs(theta).max()))
            y = Q @ Z[:, 0]
            ry = W @ Z[:, 0] - theta[0] * y
            scale = norm_est if largest else max(abs(theta[0]), 1e-30)
            if np.linalg.norm(ry) > tol * scale:
                break
            locked = np.column_stack([locked, y])
            locked_theta.append(theta[0])
            Q, W = Q @ Z[:, 1:], W @ Z[:, 1:]
            G = Z[:, 1:].conj().T @ G @ Z[:, 1:]
            ry = None
        if len(locked_theta) >= k:
            break
        candidates = [ry] if ry is not None else []
        candidates.append(rng.normal(size=n) + 1j * rng.normal(size=n))
        v = None
        for cand in candidates:
            u = cand.copy()
            for _ in range(2):
                for B in (locked, Q):
                    if B.shape[1]:
                        u = u - B @ (B.conj().T @ u)
            nu = np.linalg.norm(u)
            if nu > 1e-8 * max(np.linalg.norm(cand), 1e-300):
                v = u / nu
                break
        if v is None:
            break
        if Q.shape[1] + 1 >= max_basis:
            keep = min(k + 4, Q.shape[1])
            theta, Z = extract(G)
            Z = Z[:, :keep]
            Q, W = Q @ Z, W @ Z
            G = Z.conj().T @ G @ Z
    flags = [True] * len(locked_theta)
    while len(flags) < k:
        locked_theta.append(np.nan)
        flags.append(False)
    return apps, np.array(locked_theta), np.array(flags)


def run_eigensolver_comparison(cfg, outdir=None):
    """Inversion counts for computing the k smallest singular pairs with
    the three strategies: Davidson on gamma5 A^-1_xi, Davidson on
    A^-1_xi (A^-1_xi)^dag, and unpreconditioned Davidson on A gamma5."""
    run = RunDirectory(outdir or cfg.output_dir)
    stage = "setup"
    try:
        with open(run.add("resolved_config.ini"), "w") as f:
            f.write(cfg.resolved_text())
        op = build_operator(cfg)
        n = op.dim
        k = cfg.eig_k
        seed = component_seed(cfg.seed, "eigensolver")
        rows = []

        stage = "gd_g5inv"
        trip, res = fine_deflation_vectors(cfg, op, k)
        rows.append(("gd_g5inv", res.inversions, res.inversions, int(res.converged.all())))

        stage = "gd_normal"
        inv = build_inverter(cfg, op)
        g5 = op.gamma5_diag

        def t2(x):
            return inv(g5 * inv(g5 * x))

        budget = cfg.max_basis or (2 * k + 16)
        apps, _, flags2 = _generic_davidson(
            t2, n, k, cfg.eig_tol, largest=True,
            max_basis=budget, budget=40 * k + 200, seed=seed)
        rows.append(("gd_normal", 2 * apps, 2 * apps, int(flags2.all())))

        stage = "plain_davidson"
        H = op.hermitian_form()
        apps3, _, flags3 = _generic_davidson(
            lambda x: H @ x, n, k, cfg.eig_tol, largest=False,
            max_basis=budget, budget=40 * k + 200, seed=seed)
        rows.append(("plain_davidson", 0, apps3, int(flags3.all())))

        stage = "emit"
        with open(run.add("eig_compare.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["approach", "inversions", "operator_applications", "converged"])
            for row in rows:
                w.writerow(row)
        run.finish("ok")
        return run.outdir
    except Exception:
        run.finish(f"failed:{stage}")
        raise


def dump_inverse_magnitudes(cfg, outdir=None, deflate_rank=None):
    """|B|_ij heatmap data for B in {A^-1, A^-1(I-UU^dag),
    (A^-1(I-UU^dag)) (.) HH^dag} as dense CSVs (size-guarded)."""
    run = RunDirectory(outdir or cfg.output_dir)
    stage = "setup"
    try:
        with open(run.add("resolved_config.ini"), "w") as f:
            f.write(cfg.resolved_text())
        op = build_operator(cfg)
        if op.dim > lattice.DENSE_GUARD:
            raise ConfigError(f"dump-inverse needs N <= {lattice.DENSE_GUARD}")
        stage = "dense inverse"
        ainv = np.linalg.inv(op.dense())
        k = cfg.eig_k if deflate_rank is None else deflate_rank
        trip = eigen.dense_triplets(op)
        U = trip.left[:, :k]
        deflated = ainv - (ainv @ U) @ U.conj().T
        hp = cfg.hp_counts[-1]
        mask = probing.probing_mask(op.geometry, op.dof, hp, dilution=cfg.dilution)
        probed = deflated * mask
        stage = "emit"
        for name, mat in (("inverse_abs.csv", ainv),
                          ("inverse_deflated_abs.csv", deflated),
                          ("inverse_deflated_probed_abs.csv", probed)):
            with open(run.add(name), "w", newline="") as f:
                w = csv.writer(f)
                for row in np.abs(mat):
                    w.writerow([_fmt(v) for v in row])
        run.finish("ok")
        return run.outdir
    except Exception:
        run.finish(f"failed:{stage}")
        raise


def run_solve(cfg, outdir=None):
    """One-off linear solve A x = b with a seeded z4 right-hand side."""
    run = RunDirectory(outdir or cfg.output_dir)
    stage = "setup"
    try:
        with open(run.add("resolved_config.ini"), "w") as f:
            f.write(cfg.resolved_text())
        op = build_operator(cfg)
        b = probing.make_noise(op.dim, kind=cfg.noise_kind,
                               seed=component_seed(cfg.seed, "rhs")).values
        stage = "solve"
        if cfg.use_multigrid_inverter:
            hierarchy = build_cfg_hierarchy(cfg, op)
            mg = multigrid.MultigridSolver(hierarchy, smoother_iters=cfg.smoother_iters,
                                           coarse_tol=cfg.coarse_tol)
            x, rep = mg.solve(b, cfg.xi, max_cycles=cfg.max_iter)
        else:
            sc = krylov.SolveConfig(tol=cfg.xi, max_iter=cfg.max_iter,
                                    restart=cfg.restart, kind=cfg.solver_kind)
            if cfg.solver_kind == "minres":
                x, rep = krylov.minres_solve(op.hermitian_form(), op.apply_gamma5(b), sc)
            else:
                x, rep = krylov.gcr_solve(op, b, sc)
        stage = "emit"
        with open(run.add("solution.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["site", "spin", "re", "im"])
            for i, v in enumerate(x):
                w.writerow([i // op.dof, i % op.dof, _fmt(v.real), _fmt(v.imag)])
        with open(run.add("solve_report.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iterations", "final_relres", "converged", "matvecs"])
            w.writerow([rep.iterations, _fmt(rep.final_relres), int(rep.converged), rep.matvecs])
        if not rep.converged:
            run.finish("failed:not-converged")
            raise NumericalFailure(f"solve did not converge: relres {rep.final_relres:.3e}")
        run.finish("ok")
        return run.outdir
    except NumericalFailure:
        raise
    except Exception:
        run.finish(f"failed:{stage}")
        raise


def run_hierarchy(cfg, outdir=None):
    """Build the multigrid hierarchy and dump it in the portable format."""
    run = RunDirectory(outdir or cfg.output_dir)
    stage = "setup"
    try:
        with open(run.add("resolved_config.ini"), "w") as f:
            f.write(cfg.resolved_text())
        op = build_operator(cfg)
        stage = "hierarchy"
        hierarchy = build_cfg_hierarchy(cfg, op)
        multigrid.dump_hierarchy(hierarchy, run.outdir)
        run.files.append("hierarchy_manifest.csv")
        for lvl in range(len(hierarchy.prolongators)):
            run.files.append(f"level{lvl}_columns.csv")
        run.finish("ok")
        return run.outdir
    except Exception:
        run.finish(f"failed:{stage}")
        raise
