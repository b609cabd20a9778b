"""Noise vectors, spin dilution, and hierarchical probing.

The level-i coloring assigns color(x) = Morton-interleaved bits of
(x mod 2^i) per dimension, giving 2^(D i) colors that refine the level-(i-1)
colors as exact bit prefixes.  Probing vector j is the natural-order
Hadamard row j evaluated on the colors, h_j(x) = (-1)^popcount(j & color(x)),
so the first 2^(D(i-1)) vectors at level i are bit-identical to the full set
at level i-1 and earlier solves are reused verbatim.  At the closing counts
k = 2^(D i) the averaged outer product (1/k) sum_j h_j h_j^dag vanishes on
every site pair not congruent mod 2^i in each dimension.

Generators are pure and deterministic under their seed.
"""

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ProbingBasis:
    """Descriptor of the partitioning applied to each noise vector:
    hp_count hierarchical-probing vectors times spin dilution patterns."""

    geometry: object
    dilution_dim: int
    hp_count: int


@dataclass
class NoiseVector:
    kind: str  # rademacher | z4 | gaussian
    seed: int
    values: np.ndarray


def max_hp_level(geometry):
    level = 0
    while all(L % (2 ** (level + 1)) == 0 for L in geometry.dims):
        level += 1
    return level


def hp_colorings(geometry, level):
    """Color per site at the given level; nested across levels."""
    if level < 0:
        raise ValueError("level must be >= 0")
    for L in geometry.dims:
        if L % (2**level) != 0:
            raise ValueError(f"extent {L} not divisible by 2^{level}")
    n = geometry.site_count
    coords = np.array(np.unravel_index(np.arange(n), geometry.dims))
    local = coords % (2**level)
    colors = np.zeros(n, dtype=np.int64)
    D = geometry.ndim
    for b in range(level):
        for d in range(D):
            bit = (local[d] >> b) & 1
            colors |= bit << (b * D + d)
    return colors


def hp_vectors(geometry, count):
    """The first `count` hierarchical probing vectors (entries +/-1 per
    site).  count must be a power of two and at most the largest closing
    color count 2^(D * max_level) supported by the geometry."""
    if count < 1 or (count & (count - 1)) != 0:
        raise ValueError(f"hp count must be a power of two, got {count}")
    D = geometry.ndim
    level = 0
    while 2 ** (D * level) < count:
        level += 1
    if level > max_hp_level(geometry) or count > geometry.site_count:
        raise ValueError(f"hp count {count} exceeds the closing colors of {geometry.dims}")
    colors = hp_colorings(geometry, level)
    j = np.arange(count, dtype=np.int64)
    # h_j(x) = (-1)^popcount(j & color(x)), natural-order Hadamard
    anded = j[:, None] & colors[None, :]
    bits = np.zeros_like(anded)
    maxbits = max(1, D * level)
    for b in range(maxbits):
        bits += (anded >> b) & 1
    return np.where(bits % 2 == 0, 1.0, -1.0)


def dilution_basis(spin_dim):
    """Indicator pattern per spin component; the patterns sum to ones."""
    if spin_dim < 1:
        raise ValueError("spin_dim must be >= 1")
    return np.eye(spin_dim)


def make_noise(n, kind="z4", seed=0):
    rng = np.random.default_rng(seed)
    if kind == "rademacher":
        values = rng.integers(0, 2, size=n) * 2.0 - 1.0
        return NoiseVector(kind, seed, values.astype(np.complex128))
    if kind == "z4":
        values = np.exp(0.5j * np.pi * rng.integers(0, 4, size=n))
        # snap to exact {1, i, -1, -i}
        values = np.round(values.real) + 1j * np.round(values.imag)
        return NoiseVector(kind, seed, values)
    if kind == "gaussian":
        values = (rng.normal(size=n) + 1j * rng.normal(size=n)) / np.sqrt(2.0)
        return NoiseVector(kind, seed, values)
    raise ValueError(f"unknown noise kind {kind!r}")


def sample_vectors(noise_values, hp_vector, dilution_pattern):
    """Probe vector: noise (.) (hp over sites tensor dilution over spin)."""
    nsites = hp_vector.shape[0]
    spin = dilution_pattern.shape[0]
    mask = np.kron(hp_vector, dilution_pattern)
    if mask.shape[0] != noise_values.shape[0]:
        raise ValueError("probe shapes disagree")
    return noise_values * mask


@dataclass
class ProbeGroup:
    """One noise vector's decomposition: the estimator sums the quadratic
    forms of the slots with the given weights (dilution slots sum with
    weight 1; hp slots carry weight 1/hp_count)."""

    slots: np.ndarray  # (n_slots, N)
    weights: np.ndarray  # (n_slots,)
    noise: NoiseVector = None


@dataclass
class ProbeSet:
    groups: list
    basis: ProbingBasis = None
    kind: str = ""

    @property
    def sample_count(self):
        return len(self.groups)

    @property
    def slot_count(self):
        return sum(g.slots.shape[0] for g in self.groups)


def build_probe_set(geometry, dof, n_noise, hp_count=1, dilution=True, kind="z4", seed=0):
    """Probes for the estimator: n_noise independent noise vectors, each
    decomposed into hp_count x (dof if dilution else 1) slots."""
    N = geometry.site_count * dof
    hps = hp_vectors(geometry, hp_count)
    dil = dilution_basis(dof) if dilution else np.ones((1, dof))
    basis = ProbingBasis(geometry, dof if dilution else 1, hp_count)
    groups = []
    for j in range(n_noise):
        noise = make_noise(N, kind=kind, seed=seed + j)
        slots = np.empty((hp_count * dil.shape[0], N), dtype=np.complex128)
        weights = np.empty(hp_count * dil.shape[0])
        s = 0
        for h in hps:
            for p in dil:
                slots[s] = sample_vectors(noise.values, h, p)
                weights[s] = 1.0 / hp_count
                s += 1
        groups.append(ProbeGroup(slots, weights, noise))
    return ProbeSet(groups, basis=basis, kind=kind)


def identity_probe_set(n):
    """Deterministic diagonal extraction: the N identity columns as slots of
    a single group with unit weights (exact trace)."""
    slots = np.eye(n, dtype=np.complex128)
    return ProbeSet([ProbeGroup(slots, np.ones(n))], kind="identity")


def complete_probe_set(geometry, dof, kind="z4", seed=0):
    """One noise vector decomposed over the full closing basis times full
    dilution: N slots whose weighted sum reproduces the trace exactly."""
    return build_probe_set(geometry, dof, 1, hp_count=geometry.site_count,
                           dilution=True, kind=kind, seed=seed)


def probing_mask(geometry, dof, hp_count, dilution=True):
    """The (H H^dag / hp_count) annihilation pattern as a dense 0/1 matrix
    over the full index space (oracle scale only)."""
    hps = hp_vectors(geometry, hp_count)
    site_mask = (hps.T @ hps) / hp_count
    site_mask = np.where(np.abs(site_mask) < 1e-14, 0.0, site_mask)
    if dilution:
        return np.kron(site_mask, np.eye(dof))
    return np.kron(site_mask, np.ones((dof, dof)))


def dump_probe_csv(probes, path):
    """Audit dump: rows (vector, site, spin, re, im) over all slots."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["vector", "site", "spin", "re", "im"])
        vec = 0
        for g in probes.groups:
            dof = 1
            if probes.basis is not None:
                dof = g.slots.shape[1] // probes.basis.geometry.site_count
            for slot in g.slots:
                for idx in np.flatnonzero(slot):
                    w.writerow([vec, idx // dof, idx % dof,
                                f"{slot[idx].real:.17g}", f"{slot[idx].imag:.17g}"])
                vec += 1
    return path
