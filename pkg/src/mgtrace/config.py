"""Experiment configuration: flat INI-style sections parsed into a
dataclass, with override strings and a resolved dump written next to every
run's results.

One master seed is split into independent per-component streams (gauge,
null vectors, noise, eigensolver) through numpy's SeedSequence, so toggling
one feature does not perturb the randomness of the others.
"""

import configparser
import io
from dataclasses import dataclass, field, asdict

import numpy as np


class ConfigError(ValueError):
    pass


SEED_COMPONENTS = {"gauge": 0, "null_vectors": 1, "noise": 2, "eigensolver": 3, "rhs": 4}


def component_seed(master, component):
    """Deterministic per-component seed from the master seed."""
    if component not in SEED_COMPONENTS:
        raise ConfigError(f"unknown seed component {component!r}")
    ss = np.random.SeedSequence(entropy=master, spawn_key=(SEED_COMPONENTS[component],))
    return int(ss.generate_state(1)[0])


def _ints(text):
    return tuple(int(v) for v in str(text).replace("x", ",").split(",") if str(v).strip())


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if str(v).strip())


def _bool(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class ExperimentConfig:
    # lattice
    dims: tuple = (16, 16)
    boundary: str = "periodic"
    # gauge
    gauge_kind: str = "random_phase"
    beta: float = 6.0
    gauge_file: str = ""
    # operator
    mass: float = -0.06
    # solver
    xi: float = 1e-2
    solver_kind: str = "gcr"
    max_iter: int = 4000
    restart: int = 32
    use_multigrid_inverter: bool = False
    # eigensolver
    eig_k: int = 16
    eig_tol: float = 1e-2
    tau: float = 0.0
    max_basis: int = 0
    # multigrid
    levels: int = 2
    block_dims: tuple = (4, 4)
    block_dims2: tuple = (2, 2)
    null_vectors: int = 8
    null_vectors2: int = 8
    null_tol: float = 1e-2
    null_max_iter: int = 200
    coarse_tol: float = 1e-1
    smoother_iters: int = 4
    # probing
    noise_kind: str = "z4"
    hp_counts: tuple = (2, 8, 32)
    dilution: bool = True
    n_noise: int = 8
    # trace
    ranks: tuple = (0, 8, 32)
    algorithms: tuple = ("oblique", "orthogonal")
    tsm_xi_low: float = 0.0  # 0 disables the correction
    tsm_samples: int = 8
    # run
    seed: int = 1234
    output_dir: str = "out"

    @classmethod
    def from_file(cls, path=None, overrides=()):
        cfg = cls()
        parser = configparser.ConfigParser()
        if path is not None:
            read = parser.read(path)
            if not read:
                raise ConfigError(f"cannot read config file {path}")
        try:
            for sec, key, value in _iter_pairs(parser, overrides):
                cfg._apply(sec, key, value)
        except (ValueError, KeyError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e
        cfg.validate()
        return cfg

    def _apply(self, sec, key, value):
        handlers = {
            ("lattice", "dims"): lambda v: setattr(self, "dims", _ints(v)),
            ("lattice", "boundary"): lambda v: setattr(self, "boundary", v.strip()),
            ("gauge", "kind"): lambda v: setattr(self, "gauge_kind", v.strip()),
            ("gauge", "beta"): lambda v: setattr(self, "beta", float(v)),
            ("gauge", "file"): lambda v: setattr(self, "gauge_file", v.strip()),
            ("operator", "mass"): lambda v: setattr(self, "mass", float(v)),
            ("solver", "xi"): lambda v: setattr(self, "xi", float(v)),
            ("solver", "kind"): lambda v: setattr(self, "solver_kind", v.strip()),
            ("solver", "max_iter"): lambda v: setattr(self, "max_iter", int(v)),
            ("solver", "restart"): lambda v: setattr(self, "restart", int(v)),
            ("solver", "use_multigrid"): lambda v: setattr(self, "use_multigrid_inverter", _bool(v)),
            ("eigensolver", "k"): lambda v: setattr(self, "eig_k", int(v)),
            ("eigensolver", "tol"): lambda v: setattr(self, "eig_tol", float(v)),
            ("eigensolver", "tau"): lambda v: setattr(self, "tau", float(v)),
            ("eigensolver", "max_basis"): lambda v: setattr(self, "max_basis", int(v)),
            ("multigrid", "levels"): lambda v: setattr(self, "levels", int(v)),
            ("multigrid", "block"): lambda v: setattr(self, "block_dims", _ints(v)),
            ("multigrid", "block2"): lambda v: setattr(self, "block_dims2", _ints(v)),
            ("multigrid", "null_vectors"): lambda v: setattr(self, "null_vectors", int(v)),
            ("multigrid", "null_vectors2"): lambda v: setattr(self, "null_vectors2", int(v)),
            ("multigrid", "null_tol"): lambda v: setattr(self, "null_tol", float(v)),
            ("multigrid", "null_max_iter"): lambda v: setattr(self, "null_max_iter", int(v)),
            ("multigrid", "coarse_tol"): lambda v: setattr(self, "coarse_tol", float(v)),
            ("multigrid", "smoother_iters"): lambda v: setattr(self, "smoother_iters", int(v)),
            ("probing", "noise"): lambda v: setattr(self, "noise_kind", v.strip()),
            ("probing", "hp"): lambda v: setattr(self, "hp_counts", _ints(v)),
            ("probing", "dilution"): lambda v: setattr(self, "dilution", _bool(v)),
            ("probing", "n_noise"): lambda v: setattr(self, "n_noise", int(v)),
            ("trace", "ranks"): lambda v: setattr(self, "ranks", _ints(v)),
            ("trace", "algorithms"): lambda v: setattr(
                self, "algorithms", tuple(a.strip() for a in v.split(",") if a.strip())
            ),
            ("trace", "tsm_xi_low"): lambda v: setattr(self, "tsm_xi_low", float(v)),
            ("trace", "tsm_samples"): lambda v: setattr(self, "tsm_samples", int(v)),
            ("run", "seed"): lambda v: setattr(self, "seed", int(v)),
            ("run", "output_dir"): lambda v: setattr(self, "output_dir", v.strip()),
        }
        if (sec, key) not in handlers:
            raise ConfigError(f"unknown config key [{sec}] {key}")
        handlers[(sec, key)](value)

    def validate(self):
        if not (0 < self.xi < 1):
            raise ConfigError(f"solver xi must be in (0,1), got {self.xi}")
        if any(d < 2 for d in self.dims):
            raise ConfigError(f"bad lattice dims {self.dims}")
        if self.gauge_kind not in ("unit", "random_phase", "from_file"):
            raise ConfigError(f"unknown gauge kind {self.gauge_kind}")
        if self.noise_kind not in ("rademacher", "z4", "gaussian"):
            raise ConfigError(f"unknown noise kind {self.noise_kind}")
        if self.levels not in (2, 3):
            raise ConfigError("levels must be 2 or 3")
        for a in self.algorithms:
            if a not in ("oblique", "orthogonal"):
                raise ConfigError(f"unknown algorithm {a}")

    def resolved_text(self):
        """The full configuration in the file format, for emission next to
        results."""
        p = configparser.ConfigParser()
        p["lattice"] = {"dims": ",".join(map(str, self.dims)), "boundary": self.boundary}
        p["gauge"] = {"kind": self.gauge_kind, "beta": repr(self.beta), "file": self.gauge_file}
        p["operator"] = {"mass": repr(self.mass)}
        p["solver"] = {
            "xi": repr(self.xi),
            "kind": self.solver_kind,
            "max_iter": str(self.max_iter),
            "restart": str(self.restart),
            "use_multigrid": str(self.use_multigrid_inverter).lower(),
        }
        p["eigensolver"] = {
            "k": str(self.eig_k),
            "tol": repr(self.eig_tol),
            "tau": repr(self.tau),
            "max_basis": str(self.max_basis),
        }
        p["multigrid"] = {
            "levels": str(self.levels),
            "block": ",".join(map(str, self.block_dims)),
            "block2": ",".join(map(str, self.block_dims2)),
            "null_vectors": str(self.null_vectors),
            "null_vectors2": str(self.null_vectors2),
            "null_tol": repr(self.null_tol),
            "null_max_iter": str(self.null_max_iter),
            "coarse_tol": repr(self.coarse_tol),
            "smoother_iters": str(self.smoother_iters),
        }
        p["probing"] = {
            "noise": self.noise_kind,
            "hp": ",".join(map(str, self.hp_counts)),
            "dilution": str(self.dilution).lower(),
            "n_noise": str(self.n_noise),
        }
        p["trace"] = {
            "ranks": ",".join(map(str, self.ranks)),
            "algorithms": ",".join(self.algorithms),
            "tsm_xi_low": repr(self.tsm_xi_low),
            "tsm_samples": str(self.tsm_samples),
        }
        p["run"] = {"seed": str(self.seed), "output_dir": self.output_dir}
        buf = io.StringIO()
        p.write(buf)
        return buf.getvalue()


def _iter_pairs(parser, overrides):
    for sec in parser.sections():
        for key, value in parser.items(sec):
            yield sec, key, value
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {ov!r}")
        lhs, value = ov.split("=", 1)
        sec, key = lhs.split(".", 1)
        yield sec.strip(), key.strip(), value.strip()
