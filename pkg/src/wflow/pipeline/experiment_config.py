from __future__ import annotations

import copy
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict

from wflow.pipeline.parallel import thread_cap
from wflow.schemes import SchemeConfig

EXPERIMENTS = ("ring", "ellipsoid", "gaussian-flow", "simplex", "align", "custom")
FUNCTIONAL_KINDS = ("interaction", "potential", "sw", "sinkhorn", "sliced_ed", "kl_dirichlet")
METHOD_KINDS = ("md", "pgd", "bures")
POTENTIAL_KINDS = ("quadratic", "quadratic_matrix", "simplex")  # or any interaction kernel tag
PRECONDITIONER_KINDS = ("identity", "polynomial", "matrix", "covariance")
CLOUD_KINDS = ("gaussian", "dirichlet", "csv")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


# -------- objective ---------------------------------------------------------

@dataclass(slots=True)
class FunctionalSpec:
    kind: str = "interaction"
    kernel: str = "quartic_well"     # interaction kernel tag
    sigma: list | None = None        # covariance for *_sigma kernels and quadratic potentials
    shift: list | None = None        # minimizer of a quadratic potential
    n_projections: int = 1024
    projection_seed: int | None = None   # experiment seed when None
    epsilon: float | None = None     # 0.1 * trace of the target covariance when None
    sinkhorn_max_iter: int = 1000
    sinkhorn_tol: float = 1e-6
    alpha: list | None = None        # Dirichlet concentrations
    bandwidth: float | None = None   # KDE bandwidth, Silverman when None

    def merge(self, **kw) -> "FunctionalSpec":
        return replace(self, **kw)


# -------- method ------------------------------------------------------------

@dataclass(slots=True)
class MethodSpec:
    kind: str = "md"
    potential: str = "K4"            # interaction kernel tag or one of POTENTIAL_KINDS
    sigma: list | None = None        # covariance for *_sigma mirror kernels
    preconditioner: str = "identity"
    a: float = 1.5
    matrix: list | None = None       # Lambda for matrix preconditioners / quadratic_matrix mirrors
    newton_damping: float = 1.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    newton_ridge: float = 1e-8

    def merge(self, **kw) -> "MethodSpec":
        return replace(self, **kw)


# -------- particle clouds ---------------------------------------------------

@dataclass(slots=True)
class InitSpec:
    kind: str = "gaussian"
    n: int = 100
    d: int = 2
    mean: list | None = None
    cov: list | None = None
    scale: float = 1.0               # isotropic standard deviation when cov is None
    alpha: list | None = None
    path: str | None = None
    seed: int | None = None          # experiment seed when None

    def merge(self, **kw) -> "InitSpec":
        return replace(self, **kw)


@dataclass(slots=True)
class TargetSpec:
    kind: str = "gaussian"
    n: int = 100
    mean: list | None = None
    cov: list | None = None
    scale: float = 1.0
    path: str | None = None
    seed: int | None = None          # experiment seed + 1 when None

    def merge(self, **kw) -> "TargetSpec":
        return replace(self, **kw)


# -------- Gaussian flows ----------------------------------------------------

@dataclass(slots=True)
class GaussianFlowSpec:
    d: int = 10
    spectrum: str = "logspace"
    low: float = 1.0
    high: float = 100.0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    schemes: list = field(default_factory=lambda: ["NEM", "FB", "PFB"])
    matrix: list | None = None       # Lambda for FB / KLM, identity when None
    kl_tol: float = 1e-2             # reported crossing level, not a stopping rule

    def merge(self, **kw) -> "GaussianFlowSpec":
        return replace(self, **kw)


# -------- iteration ---------------------------------------------------------

@dataclass(slots=True)
class SchemeSettings:
    step_size: float = 0.1
    max_iter: int = 100
    rel_tol: float = 0.0
    seed: int | None = None          # experiment seed when None
    descent_check: bool = True
    center: bool = False
    fresh_projections: bool = True
    progress: bool = False

    def merge(self, **kw) -> "SchemeSettings":
        return replace(self, **kw)

    def to_scheme_config(self, default_seed: int) -> SchemeConfig:
        return SchemeConfig(step_size=self.step_size, max_iter=self.max_iter, rel_tol=self.rel_tol,
                            seed=default_seed if self.seed is None else self.seed,
                            descent_check=self.descent_check, center=self.center,
                            fresh_projections=self.fresh_projections, progress=self.progress)


# -------- outputs and resources ---------------------------------------------

@dataclass(slots=True)
class OutputConfig:
    directory: Path | str = "runs"
    write_final_state: bool = True
    png: bool = False
    log_scale: bool = False

    def __post_init__(self):
        if isinstance(self.directory, str):
            self.directory = Path(self.directory)

    def merge(self, **kw) -> "OutputConfig":
        return replace(self, **kw)


@dataclass(slots=True)
class Resources:
    ncpu: int = field(default_factory=thread_cap)

    def merge(self, **kw) -> "Resources":
        return replace(self, **kw)


# --- Composite experiment config ---------------------------------------------

@dataclass(slots=True)
class ExperimentConfig:
    experiment: str = "custom"
    seed: int = 0
    functional: FunctionalSpec = field(default_factory=FunctionalSpec)
    method: MethodSpec = field(default_factory=MethodSpec)
    init: InitSpec = field(default_factory=InitSpec)
    target: TargetSpec = field(default_factory=TargetSpec)
    gaussian: GaussianFlowSpec = field(default_factory=GaussianFlowSpec)
    scheme: SchemeSettings = field(default_factory=SchemeSettings)
    output: OutputConfig = field(default_factory=OutputConfig)
    resources: Resources = field(default_factory=Resources)

    def as_plain_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["output"]["directory"] = str(self.output.directory)
        return data

    def scheme_config(self) -> SchemeConfig:
        return self.scheme.to_scheme_config(self.seed)

    @property
    def needs_target(self) -> bool:
        return self.method.kind != "bures" and self.functional.kind in ("sw", "sinkhorn", "sliced_ed")

    def validate(self, base_dir: Path | None = None) -> "ExperimentConfig":
        """Check cross-field constraints and referenced files; raises `ConfigError`."""
        def require(condition, where, message):
            if not condition:
                raise ConfigError(f"{where}: {message}")

        require(self.experiment in EXPERIMENTS, "experiment", f"expected one of {EXPERIMENTS}, got {self.experiment!r}")
        require(0 <= self.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
        require(self.method.kind in METHOD_KINDS, "method.kind", f"expected one of {METHOD_KINDS}")
        require(self.scheme.step_size > 0, "scheme.step_size", "must be > 0")
        require(self.scheme.max_iter >= 1, "scheme.max_iter", "must be >= 1")
        require(self.scheme.rel_tol >= 0, "scheme.rel_tol", "must be >= 0")
        require(self.resources.ncpu >= 1, "resources.ncpu", "must be >= 1")

        if self.method.kind == "bures":
            require(self.gaussian.d >= 1, "gaussian.d", "must be >= 1")
            require(len(self.gaussian.seeds) >= 1, "gaussian.seeds", "need at least one seed")
            require(self.gaussian.spectrum in ("logspace", "uniform"), "gaussian.spectrum", "expected logspace or uniform")
            unknown = [s for s in self.gaussian.schemes if str(s).upper() not in ("NEM", "HEAT", "FB", "PFB", "KLM")]
            require(not unknown, "gaussian.schemes", f"unknown schemes {unknown}")
            return self

        require(self.functional.kind in FUNCTIONAL_KINDS, "functional.kind", f"expected one of {FUNCTIONAL_KINDS}")
        require(self.init.kind in CLOUD_KINDS, "init.kind", f"expected one of {CLOUD_KINDS}")
        require(self.init.n >= 1 and self.init.d >= 1, "init", "n and d must be >= 1")
        if self.method.kind == "pgd":
            require(self.method.preconditioner in PRECONDITIONER_KINDS, "method.preconditioner",
                    f"expected one of {PRECONDITIONER_KINDS}")
            require(self.method.preconditioner != "polynomial" or self.method.a > 1, "method.a", "must be > 1")
            require(self.method.preconditioner != "matrix" or self.method.matrix is not None,
                    "method.matrix", "required by the matrix preconditioner")
        if self.functional.kind == "kl_dirichlet":
            require(self.functional.alpha is not None, "functional.alpha", "required by kl_dirichlet")
        if self.functional.kind in ("sw", "sliced_ed"):
            require(self.functional.n_projections >= 1, "functional.n_projections", "must be >= 1")
        if self.functional.kind == "sinkhorn":
            eps = self.functional.epsilon
            require(eps is None or (isinstance(eps, (int, float)) and eps > 0), "functional.epsilon", "must be > 0")
        if self.needs_target:
            require(self.target.kind in ("gaussian", "csv"), "target.kind", "expected gaussian or csv")
        for section, spec in (("init", self.init), ("target", self.target)):
            if spec.kind == "csv" and (section == "init" or self.needs_target):
                require(spec.path is not None, f"{section}.path", "required for csv clouds")
                path = Path(spec.path)
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                    spec.path = str(path)
                require(path.exists(), f"{section}.path", f"referenced file does not exist: {path}")
        return self


# -------- presets -----------------------------------------------------------

_SIGMA_ILL = [[100.0, 0.0], [0.0, 0.1]]

PRESETS: Dict[str, Dict[str, Any]] = {
    "ring": {
        "functional": {"kind": "interaction", "kernel": "quartic_well"},
        "method": {"kind": "md", "potential": "K4"},
        "init": {"kind": "gaussian", "n": 100, "d": 2, "scale": 0.25},
        "scheme": {"step_size": 0.1, "max_iter": 300, "rel_tol": 0.0},
    },
    "ellipsoid": {
        "functional": {"kind": "interaction", "kernel": "quartic_well_sigma", "sigma": _SIGMA_ILL},
        "method": {"kind": "md", "potential": "K4_sigma", "sigma": _SIGMA_ILL},
        "init": {"kind": "gaussian", "n": 100, "d": 2, "scale": 0.25},
        "scheme": {"step_size": 0.1, "max_iter": 300, "rel_tol": 0.0},
    },
    "gaussian-flow": {
        "method": {"kind": "bures"},
        "gaussian": {"d": 10, "spectrum": "logspace", "low": 1.0, "high": 100.0,
                     "seeds": [0, 1, 2, 3, 4], "schemes": ["NEM", "FB", "PFB"], "kl_tol": 1e-2},
        "scheme": {"step_size": 0.01, "max_iter": 1500, "rel_tol": 0.0},
    },
    "simplex": {
        "functional": {"kind": "kl_dirichlet", "alpha": [6.0, 6.0, 6.0]},
        "method": {"kind": "md", "potential": "simplex"},
        "init": {"kind": "dirichlet", "n": 100, "d": 2, "alpha": [6.0, 6.0, 6.0]},
        "scheme": {"step_size": 0.01, "max_iter": 500, "rel_tol": 0.0},
    },
    "align": {
        "functional": {"kind": "sw", "n_projections": 1024},
        "method": {"kind": "pgd", "preconditioner": "polynomial", "a": 1.5},
        "init": {"kind": "gaussian", "n": 512, "d": 2, "scale": 1.0},
        "target": {"kind": "gaussian", "n": 512, "cov": _SIGMA_ILL},
        "scheme": {"step_size": 1.0, "max_iter": 500, "rel_tol": 1e-3},
    },
    "custom": {},
}


def preset(name: str, **overrides) -> ExperimentConfig:
    """Preset `name` with section overrides given as mappings, e.g. ``scheme={"max_iter": 10}``."""
    return build_experiment_config({"experiment": name, **overrides})


# -------- loading -----------------------------------------------------------

def _check_value(value, default, where: str):
    if default is None or default is MISSING or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, (str, Path)):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__} ({value!r})")
    return value


def _default_of(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return MISSING


def _build(cls, data: Dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown field '{prefix}.{unknown[0]}'" if prefix else f"unknown field '{unknown[0]}'")
    kwargs = {}
    for name, value in data.items():
        where = f"{prefix}.{name}" if prefix else name
        default = _default_of(known[name])
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, where)
        else:
            kwargs[name] = _check_value(value, default, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def build_experiment_config(data: Dict[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
    """Overlay `data` on the preset named by ``data["experiment"]`` and validate."""
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    tag = data.get("experiment")
    if tag not in PRESETS:
        raise ConfigError(f"experiment: expected one of {EXPERIMENTS}, got {tag!r}")
    merged = _deep_merge(PRESETS[tag], data)
    return _build(ExperimentConfig, merged, "").validate(base_dir)


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """
    Read one experiment from a JSON file.

    Relative cloud paths resolve against the config file's directory.
    Syntax errors are reported with line and column; unknown fields with
    their dotted path.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return build_experiment_config(data, base_dir=path.parent)
