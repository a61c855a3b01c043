"""Error metrics, marginal densities and per-run metric tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .spectral import Lattice


def l2_vorticity_error(mean: np.ndarray, truth: np.ndarray, lattice: Lattice) -> float | np.ndarray:
    """``int |w_hat - w_true|^2 dx`` evaluated spectrally: ``sum_k 2 |k|^2 |du_k|^2``."""
    d = lattice.check(np.asarray(mean) - np.asarray(truth))
    return 2.0 * np.sum(lattice.kabs2 * np.abs(d) ** 2, axis=-1)


def weighted_variance(values: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Per-mode variance of ``Re u_k`` (biased, weighted if ``weights`` given)."""
    x = np.real(values)
    w = np.full(len(x), 1.0 / len(x)) if weights is None else np.asarray(weights) / np.sum(weights)
    m = w @ x
    return w @ (x - m) ** 2


def variance_ratio(posterior: np.ndarray, prior: np.ndarray, posterior_weights=None) -> np.ndarray:
    """Posterior over unconditional variance of ``Re u_k``, NaN where the latter is zero."""
    num = weighted_variance(posterior, posterior_weights)
    den = weighted_variance(prior)
    out = np.full(num.shape, np.nan)
    # constant columns give round-off sized variances; treat those as zero
    ok = np.ptp(np.real(prior), axis=0) > 0
    out[ok] = num[ok] / den[ok]
    return out


@dataclass
class MarginalPdf:
    """Histogram and kernel density of one coefficient's marginal."""

    edges: np.ndarray
    density: np.ndarray
    grid: np.ndarray
    kde: np.ndarray

    def rows(self):
        centres = 0.5 * (self.edges[1:] + self.edges[:-1])
        for c, h in zip(centres, self.density):
            yield "hist", float(c), float(h)
        for g, k in zip(self.grid, self.kde):
            yield "kde", float(g), float(k)


def marginal_pdf(values: np.ndarray, k, lattice: Lattice, component: str = "re", bins: int = 30,
                 weights: np.ndarray | None = None, grid_points: int = 200) -> MarginalPdf:
    """Weighted histogram plus Gaussian KDE (Silverman bandwidth) of ``Re`` or ``Im`` of ``u_k``."""
    if component not in ("re", "im"):
        raise ValueError("component must be 're' or 'im'")
    col = np.asarray(values)[:, lattice.index(k)]
    x = col.real if component == "re" else col.imag
    w = np.full(len(x), 1.0 / len(x)) if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        pad = max(abs(lo), 1.0) * 1e-3
        lo, hi = lo - pad, hi + pad
    density, edges = np.histogram(x, bins=bins, range=(lo, hi), weights=w, density=True)
    span = hi - lo
    grid = np.linspace(lo - 0.25 * span, hi + 0.25 * span, grid_points)
    support = w > 0
    if np.count_nonzero(support) > 1 and np.ptp(x[support]) > 0:
        kde = stats.gaussian_kde(x[support], bw_method="silverman", weights=w[support])(grid)
    else:
        kde = np.full(grid_points, np.nan)
    return MarginalPdf(edges, density, grid, kde)


# -- per-run metrics ----------------------------------------------------------

STEP_FIELDS = ("step", "time", "l2_error", "ess", "levels", "accept_rate", "log_evidence")
LEVEL_FIELDS = ("step", "level", "phi", "ess", "accept_rate")


@dataclass
class RunMetrics:
    """Per-step metrics of one filter run.

    Wall-clock times are stored separately from the deterministic metrics so
    that metric files are reproducible byte for byte.
    """

    variant: str
    seed: int
    config_hash: str
    steps: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)

    def add_step(self, step, time, l2_error, ess, levels, accept_rate=float("nan"),
                 log_evidence=float("nan"), wall=None):
        self.steps.append(dict(zip(STEP_FIELDS, (step, time, l2_error, ess, levels, accept_rate, log_evidence))))
        if wall is not None:
            self.wall_clock.append(wall)

    def add_level(self, step, level, phi, ess, accept_rate):
        self.levels.append(dict(zip(LEVEL_FIELDS, (step, level, phi, ess, accept_rate))))

    def column(self, name: str) -> np.ndarray:
        return np.array([float(r[name]) for r in self.steps])

    def summary(self) -> dict:
        out = {"variant": self.variant, "seed": self.seed, "config_hash": self.config_hash,
               "n_steps": len(self.steps)}
        for name in ("l2_error", "ess", "levels", "accept_rate"):
            col = self.column(name) if self.steps else np.array([])
            out[f"mean_{name}"] = _num(np.nanmean(col)) if col.size and not np.all(np.isnan(col)) else None
        out["per_step"] = {name: [_num(v) for v in self.column(name)] for name in ("l2_error", "ess", "levels")}
        return out

    def steps_csv(self) -> str:
        return _csv(STEP_FIELDS, self.steps)

    def levels_csv(self) -> str:
        return _csv(LEVEL_FIELDS, self.levels)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "metrics.csv", self.steps_csv())
        atomic_write(out / "tempering.csv", self.levels_csv())
        atomic_write(out / "summary.json", json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")
        atomic_write(out / "timing.json", json.dumps({"wall_clock_s": self.wall_clock}, indent=1) + "\n")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunMetrics":
        return cls(**d)

    @classmethod
    def read(cls, run_dir) -> "RunMetrics":
        run_dir = Path(run_dir)
        summary = json.loads((run_dir / "summary.json").read_text())
        m = cls(summary["variant"], summary["seed"], summary["config_hash"])
        m.steps = [_parse(r) for r in csv.DictReader(io.StringIO((run_dir / "metrics.csv").read_text()))]
        m.levels = [_parse(r) for r in csv.DictReader(io.StringIO((run_dir / "tempering.csv").read_text()))]
        return m


def _num(v):
    v = float(v)
    return None if np.isnan(v) else v


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if np.isnan(v) else repr(v)


def _parse(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        out[k] = int(v) if k in ("step", "level", "levels") else float(v)
    return out


def _csv(fields, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(fields) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(r[f]) for f in fields) + "\n")
    return buf.getvalue()


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_table(path, header, rows) -> None:
    """Write a CSV table atomically; floats use their shortest round-trip repr."""
    atomic_write(Path(path), _csv(header, [dict(zip(header, r)) for r in rows]))
