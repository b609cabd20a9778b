"""Variance-reduced stochastic trace estimation for gamma5-Hermitian
lattice operators: 2D Schwinger-model Wilson testbed, adaptive two-grid,
inexact eigensolver and coarse-subspace oblique deflation, hierarchical
probing, and the supporting diagnostics."""

from .lattice import (
    LatticeGeometry,
    GaugeField,
    WilsonOperator,
    build_lattice,
    generate_gauge,
    build_wilson,
)
from .krylov import SolveConfig, SolveReport, gcr_solve, minres_solve, truncated_inverse, make_smoother
from .multigrid import (
    BlockingScheme,
    generate_null_vectors,
    build_prolongator,
    build_coarse_operator,
    build_hierarchy,
    two_grid_solve,
    subspace_angles,
)
from .eigen import EigenConfig, inexact_eigensolve, to_singular_triplets, dense_svd_oracle
from .probing import hp_colorings, hp_vectors, dilution_basis, sample_vectors, build_probe_set
from .trace import (
    hutchinson,
    eq2_variance,
    singular_variance_estimate,
    deflate_orthogonal,
    deflate_oblique_coarse,
    posterior_rank_sweep,
    jackknife,
    tsm_correction,
)

__version__ = "0.1.0"
