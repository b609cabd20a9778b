"""2D Schwinger-model lattice: geometry, U(1) gauge fields, Wilson operator.

The operator is the standard 2D Wilson discretization

    A = (mass + D) I - (1/2) sum_mu [ (I - g_mu) U_mu(x) d_{x+mu}
                                    + (I + g_mu) U_mu^dag(x-mu) d_{x-mu} ]

with gamma basis g1 = sigma1, g2 = sigma2, g5 = sigma3, so gamma5 is the
diagonal +/-1 pattern diag(+1, -1) on the two spin components of each site.
Site ordering is lexicographic (first coordinate slowest) with spin fastest.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

SPIN_DIM = 2
DENSE_GUARD = 8192

SIGMA1 = np.array([[0, 1], [1, 0]], dtype=np.complex128)
SIGMA2 = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
SIGMA3 = np.array([[1, 0], [0, -1]], dtype=np.complex128)
GAMMAS = (SIGMA1, SIGMA2)


class GeometryError(ValueError):
    pass


class GaugeFileError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)


class SizeGuardError(ValueError):
    pass


@dataclass(frozen=True)
class LatticeGeometry:
    """Periodic hypercubic lattice; boundary phase only affects the last
    (time) dimension when boundary == 'antiperiodic'."""

    dims: tuple
    boundary: str = "periodic"

    def __post_init__(self):
        if len(self.dims) == 0:
            raise GeometryError("need at least one dimension")
        for L in self.dims:
            if int(L) < 2:
                raise GeometryError(f"extent {L} < 2 is not a valid lattice")
        if self.boundary not in ("periodic", "antiperiodic"):
            raise GeometryError(f"unknown boundary {self.boundary!r}")
        object.__setattr__(self, "dims", tuple(int(L) for L in self.dims))

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def site_count(self):
        return int(np.prod(self.dims))

    def site_index(self, coords):
        return int(np.ravel_multi_index(tuple(coords), self.dims))

    def site_coords(self, index):
        return tuple(int(c) for c in np.unravel_index(index, self.dims))

    def neighbor(self, index, mu, sign=+1):
        """Neighbor site index in direction mu; sign=+1 forward, -1 backward."""
        x = list(self.site_coords(index))
        x[mu] = (x[mu] + sign) % self.dims[mu]
        return self.site_index(x)

    def neighbor_tables(self):
        """(fwd, bwd, fwd_phase, bwd_phase): index and boundary-phase arrays,
        each of shape (ndim, site_count)."""
        n = self.site_count
        coords = np.array(np.unravel_index(np.arange(n), self.dims))
        fwd = np.empty((self.ndim, n), dtype=np.int64)
        bwd = np.empty((self.ndim, n), dtype=np.int64)
        fwd_phase = np.ones((self.ndim, n))
        bwd_phase = np.ones((self.ndim, n))
        tdir = self.ndim - 1
        for mu in range(self.ndim):
            cf = coords.copy()
            cf[mu] = (cf[mu] + 1) % self.dims[mu]
            fwd[mu] = np.ravel_multi_index(cf, self.dims)
            cb = coords.copy()
            cb[mu] = (cb[mu] - 1) % self.dims[mu]
            bwd[mu] = np.ravel_multi_index(cb, self.dims)
            if self.boundary == "antiperiodic" and mu == tdir:
                # -1 phase on the link that wraps around in time
                fwd_phase[mu][coords[mu] == self.dims[mu] - 1] = -1.0
                bwd_phase[mu][coords[mu] == 0] = -1.0
        return fwd, bwd, fwd_phase, bwd_phase


def build_lattice(dims, boundary="periodic"):
    return LatticeGeometry(tuple(dims), boundary)


@dataclass
class GaugeField:
    """U(1) links, one unit-modulus complex number per (site, direction)."""

    geometry: LatticeGeometry
    links: np.ndarray  # (site_count, ndim) complex
    kind: str = "unit"
    beta: float = 0.0
    seed: int = 0

    def validate(self, tol=1e-8):
        err = np.abs(np.abs(self.links) - 1.0)
        if err.max() > tol:
            raise ValueError(f"non-unitary link, |1-|U|| = {err.max():.3e}")


def generate_gauge(geometry, kind="unit", beta=None, seed=0, path=None):
    """Gauge field generator: 'unit' (free field), 'random_phase' with link
    phases drawn from a wrapped Gaussian of width 1/sqrt(beta), or
    'from_file' reading the CSV link format."""
    n, d = geometry.site_count, geometry.ndim
    if kind == "unit":
        links = np.ones((n, d), dtype=np.complex128)
        return GaugeField(geometry, links, kind="unit")
    if kind == "random_phase":
        if beta is None or beta <= 0:
            raise ValueError("random_phase gauge needs beta > 0")
        rng = np.random.default_rng(seed)
        theta = rng.normal(0.0, 1.0 / np.sqrt(beta), size=(n, d))
        theta = (theta + np.pi) % (2 * np.pi) - np.pi
        links = np.exp(1j * theta)
        return GaugeField(geometry, links, kind="random_phase", beta=beta, seed=seed)
    if kind == "from_file":
        return read_gauge_csv(path, geometry)
    raise ValueError(f"unknown gauge kind {kind!r}")


def write_gauge_csv(gauge, path):
    """CSV link format: header x0,x1,mu,re,im, one line per link, sites in
    lexicographic order."""
    geo = gauge.geometry
    if geo.ndim != 2:
        raise ValueError("gauge CSV format is 2D (x0,x1)")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x0", "x1", "mu", "re", "im"])
        for s in range(geo.site_count):
            x0, x1 = geo.site_coords(s)
            for mu in range(2):
                u = gauge.links[s, mu]
                w.writerow([x0, x1, mu, f"{u.real:.17g}", f"{u.imag:.17g}"])


def read_gauge_csv(path, geometry):
    if geometry.ndim != 2:
        raise ValueError("gauge CSV format is 2D (x0,x1)")
    links = np.full((geometry.site_count, 2), np.nan, dtype=np.complex128)
    try:
        f = open(path, newline="")
    except OSError as e:
        raise GaugeFileError(f"cannot open gauge file {path}: {e}") from e
    with f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x0", "x1", "mu", "re", "im"]:
            raise GaugeFileError("bad gauge CSV header", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                x0, x1, mu = int(row[0]), int(row[1]), int(row[2])
                u = complex(float(row[3]), float(row[4]))
            except (ValueError, IndexError) as e:
                raise GaugeFileError(f"malformed gauge row: {e}", line=lineno) from e
            if not (0 <= x0 < geometry.dims[0] and 0 <= x1 < geometry.dims[1] and 0 <= mu < 2):
                raise GaugeFileError("gauge row out of range", line=lineno)
            if abs(abs(u) - 1.0) > 1e-8:
                raise GaugeFileError(f"link not unit modulus, |U| = {abs(u):.12f}", line=lineno)
            links[geometry.site_index((x0, x1)), mu] = u
    if np.isnan(links).any():
        raise GaugeFileError("gauge file does not cover every link")
    return GaugeField(geometry, links, kind="from_file")


class LatticeOperator:
    """Sparse operator over a lattice with `dof` internal components per
    site and a diagonal +/-1 gamma5.  Applications are pure and may be used
    concurrently once assembled."""

    def __init__(self, geometry, dof, matrix, gamma5_diag):
        self.geometry = geometry
        self.dof = dof
        self.matrix = matrix.tocsr()
        self.gamma5_diag = np.asarray(gamma5_diag, dtype=np.float64)
        self._dagger = None

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, x):
        if x.shape[0] != self.dim:
            raise ValueError(f"dimension mismatch: {x.shape[0]} != {self.dim}")
        return self.matrix @ x

    def apply_dagger(self, x):
        if self._dagger is None:
            self._dagger = self.matrix.conj().T.tocsr()
        return self._dagger @ x

    def apply_gamma5(self, x):
        if x.ndim == 1:
            return self.gamma5_diag * x
        return self.gamma5_diag[:, None] * x

    def apply_shifted(self, tau, x):
        """(A + i tau gamma5) x; tau = 0 reduces to apply."""
        if tau == 0.0:
            return self.apply(x)
        return self.apply(x) + 1j * tau * self.apply_gamma5(x)

    def shifted_matrix(self, tau):
        if tau == 0.0:
            return self.matrix
        return (self.matrix + sp.diags(1j * tau * self.gamma5_diag)).tocsr()

    def hermitian_form(self):
        """gamma5 A as a sparse matrix (Hermitian for gamma5-Hermitian A)."""
        return (sp.diags(self.gamma5_diag) @ self.matrix).tocsr()

    def a_gamma5(self):
        """A gamma5 as a sparse matrix; its eigenvectors are the left
        singular vectors of A."""
        return (self.matrix @ sp.diags(self.gamma5_diag)).tocsr()

    def dense(self):
        """Dense materialization, guarded to N <= 8192 (oracle use only)."""
        if self.dim > DENSE_GUARD:
            raise SizeGuardError(
                f"refusing to densify N={self.dim} > {DENSE_GUARD}; "
                "dense materialization is an oracle for small instances"
            )
        return self.matrix.toarray()


class WilsonOperator(LatticeOperator):
    def __init__(self, geometry, gauge, mass, matrix, gamma5_diag):
        super().__init__(geometry, SPIN_DIM, matrix, gamma5_diag)
        self.gauge = gauge
        self.mass = float(mass)


def gamma5_pattern(site_count, dof=SPIN_DIM):
    """Diagonal +/-1 of gamma5: +1 on the first dof/2 components per site."""
    if dof % 2:
        raise ValueError("gamma5 pattern needs an even number of components")
    per_site = np.concatenate([np.ones(dof // 2), -np.ones(dof // 2)])
    return np.tile(per_site, site_count)


def build_wilson(gauge, mass):
    """Assemble the sparse 2D Wilson operator for the given gauge field."""
    geo = gauge.geometry
    gauge.validate()
    n, d = geo.site_count, geo.ndim
    if d != 2:
        raise GeometryError("Wilson operator is specialized to 2D")
    fwd, bwd, fph, bph = geo.neighbor_tables()

    nblocks = n * (2 * d + 1)
    data = np.empty((nblocks, SPIN_DIM, SPIN_DIM), dtype=np.complex128)
    rows_site = np.empty(nblocks, dtype=np.int64)
    cols_site = np.empty(nblocks, dtype=np.int64)

    eye = np.eye(SPIN_DIM, dtype=np.complex128)
    diag_block = (mass + d) * eye
    k = 0
    sites = np.arange(n)
    data[k : k + n] = diag_block
    rows_site[k : k + n] = sites
    cols_site[k : k + n] = sites
    k += n
    for mu in range(d):
        hop_f = -0.5 * (eye - GAMMAS[mu])
        hop_b = -0.5 * (eye + GAMMAS[mu])
        uf = gauge.links[:, mu] * fph[mu]
        ub = np.conj(gauge.links[bwd[mu], mu]) * bph[mu]
        data[k : k + n] = uf[:, None, None] * hop_f
        rows_site[k : k + n] = sites
        cols_site[k : k + n] = fwd[mu]
        k += n
        data[k : k + n] = ub[:, None, None] * hop_b
        rows_site[k : k + n] = sites
        cols_site[k : k + n] = bwd[mu]
        k += n

    blocks = (nblocks, SPIN_DIM, SPIN_DIM)
    rows = np.broadcast_to(
        rows_site[:, None, None] * SPIN_DIM + np.arange(SPIN_DIM)[None, :, None], blocks
    ).ravel()
    cols = np.broadcast_to(
        cols_site[:, None, None] * SPIN_DIM + np.arange(SPIN_DIM)[None, None, :], blocks
    ).ravel()
    mat = sp.coo_matrix((data.ravel(), (rows, cols)), shape=(n * SPIN_DIM, n * SPIN_DIM))
    return WilsonOperator(geo, gauge, mass, mat.tocsr(), gamma5_pattern(n))


def free_field_eigenvalues(geometry, mass):
    """Fourier eigenvalues of the unit-gauge Wilson operator:
    m(p) + mass +/- i |s(p)| over all lattice momenta (oracle)."""
    dims = geometry.dims
    grids = []
    tdir = geometry.ndim - 1
    for mu, L in enumerate(dims):
        k = np.arange(L)
        if geometry.boundary == "antiperiodic" and mu == tdir:
            p = 2 * np.pi * (k + 0.5) / L
        else:
            p = 2 * np.pi * k / L
        grids.append(p)
    mesh = np.meshgrid(*grids, indexing="ij")
    mom = np.stack([m.ravel() for m in mesh])
    mp = mass + np.sum(1 - np.cos(mom), axis=0)
    s = np.sqrt(np.sum(np.sin(mom) ** 2, axis=0))
    return np.concatenate([mp + 1j * s, mp - 1j * s])
