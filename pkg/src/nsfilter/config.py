"""Experiment configuration, validation and the named preset table."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

VARIANTS = ("pf", "ispf", "pft", "ispft", "enkf")
FAMILIES = ("gaussian", "student-t")

# fields that determine the truth and the observation record
DATA_FIELDS = (
    "L", "grid_size", "nu", "delta", "noise_exponent", "nonlinear", "n_obs", "obs_interval",
    "inner_steps", "alpha", "truth_beta", "stations_per_side", "radius", "obs_sigma",
    "noise_family", "dof", "truth_seed",
)


class ConfigError(ValueError):
    """Invalid configuration value, naming the offending field."""

    def __init__(self, field_name: str, reason: str):
        self.field = field_name
        self.reason = reason
        super().__init__(f"{field_name}: {reason}")


@dataclass(frozen=True)
class ExperimentConfig:
    """All parameters of one filtering experiment.

    Observations are taken at ``t_i = i * obs_interval``, ``i = 1..n_obs``, and
    each interval is split into ``inner_steps`` solver steps.  Stations form a
    ``stations_per_side`` square grid of cell centres; every station observes
    both velocity components averaged over a disc of radius ``radius``.

    ``truth_seed`` fixes the true initial condition and the observation
    record; ``seed`` drives the filter only, so runs that differ in ``seed``
    share their data and their config hash.
    """

    name: str = "custom"
    # model
    L: int = 16
    grid_size: int | None = None
    nu: float = 0.1
    delta: float = 1.0
    noise_exponent: float = 3.0
    nonlinear: bool = True
    n_obs: int = 5
    obs_interval: float = 0.4
    inner_steps: int = 32
    # initial law N(mu, beta^2 A^-alpha); the truth starts from N(0, truth_beta^2 A^-alpha)
    alpha: float = 3.0
    beta: float = 0.5
    prior_mean: str = "truth"
    truth_beta: float = 1.0
    # observations
    stations_per_side: int = 16
    radius: float = 0.05
    obs_sigma: float = 0.8
    noise_family: str = "gaussian"
    dof: float | None = None
    # filter
    variant: str = "ispft"
    n_particles: int = 100
    alpha_frac: float = 0.5
    pcn_m: int = 10
    pcn_rho: float = 0.5
    pcn_rho0: float | None = 0.9
    pcn_m_first: int | None = 20
    max_levels: int = 100
    resample_final: bool = True
    init: str = "prior"
    # outputs
    pdf_modes: tuple = ((1, 0), (1, 1), (1, -1), (2, 5), (9, 9))
    pdf_bins: int = 30
    # seeds
    truth_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pdf_modes", tuple(tuple(int(v) for v in k) for k in self.pdf_modes))
        self.validate()

    def validate(self) -> None:
        def need(cond, name, reason):
            if not cond:
                raise ConfigError(name, reason)

        for name in ("L", "n_obs", "inner_steps", "stations_per_side", "n_particles", "max_levels", "pdf_bins"):
            v = getattr(self, name)
            need(isinstance(v, int) and not isinstance(v, bool) and v >= 1, name,
                 f"must be a positive integer, got {v!r}")
        need(self.grid_size is None or (isinstance(self.grid_size, int) and self.grid_size > 3 * self.L),
             "grid_size", f"must exceed 3L = {3 * self.L} for an alias-free nonlinear term")
        need(self.nu > 0, "nu", "viscosity must be positive")
        need(self.delta >= 0, "delta", "noise scale must be non-negative")
        need(self.noise_exponent > 1, "noise_exponent", "must exceed 1 so that Q is trace class")
        need(self.obs_interval > 0, "obs_interval", "must be positive")
        need(self.alpha > 2, "alpha", "prior roughness must exceed 2")
        need(self.beta >= 0, "beta", "must be non-negative")
        need(self.truth_beta >= 0, "truth_beta", "must be non-negative")
        need(self.prior_mean in ("truth", "zero"), "prior_mean", "must be 'truth' or 'zero'")
        need(self.radius > 0, "radius", "ball radius must be positive")
        need(self.obs_sigma > 0, "obs_sigma", "observation noise variance must be positive")
        need(self.noise_family in FAMILIES, "noise_family", f"must be one of {FAMILIES}")
        if self.noise_family == "student-t":
            need(self.dof is not None and self.dof > 0, "dof", "student-t noise needs positive degrees of freedom")
        need(self.variant in VARIANTS, "variant", f"must be one of {VARIANTS}")
        need(self.n_particles >= 2, "n_particles", "need at least two particles")
        need(0 < self.alpha_frac < 1, "alpha_frac", "must lie in (0, 1)")
        need(isinstance(self.pcn_m, int) and self.pcn_m >= 0, "pcn_m", "must be a non-negative integer")
        need(self.pcn_m_first is None or self.pcn_m_first >= 0, "pcn_m_first", "must be non-negative")
        need(0 <= self.pcn_rho <= 1, "pcn_rho", "must lie in [0, 1]")
        need(self.pcn_rho0 is None or 0 <= self.pcn_rho0 <= 1, "pcn_rho0", "must lie in [0, 1]")
        need(self.init in ("prior", "perfect"), "init", "must be 'prior' or 'perfect'")

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pdf_modes"] = [list(k) for k in self.pdf_modes]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration field")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path} is not valid JSON ({exc})") from None
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    # -- hashes -----------------------------------------------------------

    def config_hash(self) -> str:
        """Hash of everything except the name and the filter seed."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("name")
        return _digest(d)

    def data_hash(self) -> str:
        d = self.to_dict()
        return _digest({k: d[k] for k in DATA_FIELDS})

    @property
    def times(self) -> list:
        return [self.obs_interval * (i + 1) for i in range(self.n_obs)]

    @property
    def dt(self) -> float:
        return self.obs_interval / self.inner_steps


def _digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# -- presets ----------------------------------------------------------------

# per-variant pCN settings of the dense-grid study
_TABLE1 = {
    "pf": dict(variant="pf"),
    "ispf": dict(variant="ispf"),
    "pft": dict(variant="pft", pcn_m=20, pcn_rho=0.9, pcn_rho0=0.98, pcn_m_first=20),
    "ispft": dict(variant="ispft", pcn_m=10, pcn_rho=0.5, pcn_rho0=0.9, pcn_m_first=20),
    "enkf": dict(variant="enkf"),
}

# (obs_interval, obs_sigma, pcn_rho)
_TABLE2 = {
    "a": (0.4, 0.8, 0.5),
    "b": (0.16, 0.8, 0.5),
    "c": (1.0, 0.8, 0.9),
    "d": (0.4, 4.0, 0.5),
    "e": (0.4, 0.16, 0.9),
}

FULL = dict(L=64, inner_steps=32)
# the dense-grid comparison keeps N=100 at desk scale; the rest use N=50
DESK = dict(L=16, inner_steps=8, n_particles=50)


def _full_presets() -> dict:
    base = ExperimentConfig(**FULL)
    out = {}
    for key, extra in _TABLE1.items():
        out[f"table1-{key}"] = base.with_(name=f"table1-{key}", **extra)
    for key, (dtn, sig, rho) in _TABLE2.items():
        out[f"table2-{key}"] = base.with_(name=f"table2-{key}", obs_interval=dtn, obs_sigma=sig, pcn_rho=rho,
                                          **{k: v for k, v in _TABLE1["ispft"].items() if k != "pcn_rho"})
    longrun = base.with_(n_obs=100, stations_per_side=8, **_TABLE1["ispft"])
    out["longrun-gauss"] = longrun.with_(name="longrun-gauss")
    out["longrun-student"] = longrun.with_(name="longrun-student", noise_family="student-t", dof=4.0)
    out["appendix-perfect-init"] = base.with_(name="appendix-perfect-init", n_particles=200, nu=0.01,
                                              obs_interval=0.2, init="perfect", variant="ispf")
    return out


def _desk(name: str, cfg: ExperimentConfig) -> ExperimentConfig:
    changes = dict(DESK)
    if name.startswith("table1-"):
        changes["n_particles"] = 100
    if name.startswith("longrun-"):
        changes["n_obs"] = 30
    return cfg.with_(name=f"{name}@desk", **changes)


def presets() -> dict:
    """Named configurations: each full-scale preset plus its ``@desk`` reduction."""
    full = _full_presets()
    out = dict(full)
    for name, cfg in full.items():
        out[f"{name}@desk"] = _desk(name, cfg)
    return out


def get_preset(name: str) -> ExperimentConfig:
    table = presets()
    if name not in table:
        raise KeyError(f"unknown preset {name!r}; try one of: {', '.join(sorted(table))}")
    return table[name]


def resolve_config(ref: str) -> ExperimentConfig:
    """Preset name or path to a JSON config file."""
    if ref in presets():
        return get_preset(ref)
    path = Path(ref)
    if not path.exists():
        raise ConfigError("--config", f"{ref!r} is neither a preset name nor an existing file")
    return ExperimentConfig.load(path)

