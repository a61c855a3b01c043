"""Experiment orchestration: data generation, filter runs and aggregation.

A run directory contains

``config.json``
    the resolved configuration (including the filter seed);
``metrics.csv``
    one row per observation time: ``step, time, l2_error, ess, levels,
    accept_rate, log_evidence``;
``tempering.csv``
    one row per tempering level: ``step, level, phi, ess, accept_rate``;
``posterior_mean.csv``
    ``step, k1, k2, mean_re, mean_im, truth_re, truth_im``;
``pdfs.csv``
    ``k1, k2, component, kind, x, density`` at the final time, ``kind`` being
    ``hist`` (bin centre) or ``kde``;
``variance_ratio.csv``
    ``k1, k2, kabs, ratio`` at the final time, posterior over unconditional
    variance of ``Re u_k`` (``nan`` where undefined);
``summary.json``
    per-run means and per-step traces plus the config hash;
``timing.json``
    wall-clock seconds per step, kept apart so the files above are
    reproducible byte for byte.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .config import ExperimentConfig
from .diagnostics import RunMetrics, l2_vorticity_error, marginal_pdf, variance_ratio, write_table, atomic_write
from .dynamics import Dynamics, GaussianPrior, NoiseSpec, SolverConfig
from .enkf import EnsembleKalmanFilter
from .filtering import DegenerateEnsembleError, FilterModel, ParticleFilter, ParticleStreams, PcnConfig, TemperingError
from .observation import ObservationRecord, build_observer, generate_data, uniform_stations
from .spectral import Lattice

log = logging.getLogger(__name__)


class FilterStepError(RuntimeError):
    """A filter failure tagged with the assimilation step where it happened."""

    def __init__(self, step: int, time: float, cause: Exception):
        self.step = step
        self.time = time
        super().__init__(f"step {step} (t={time:g}): {type(cause).__name__}: {cause}")


@dataclass
class Problem:
    """Model objects built from a configuration."""

    config: ExperimentConfig
    lattice: Lattice
    dynamics: Dynamics
    observer: object

    @classmethod
    def build(cls, config: ExperimentConfig) -> "Problem":
        lat = Lattice(config.L, config.grid_size)
        noise = NoiseSpec.power_law(lat, config.delta, config.nu, config.noise_exponent)
        dyn = Dynamics(lat, SolverConfig(config.nu, config.dt, nonlinear=config.nonlinear), noise)
        obs = build_observer(uniform_stations(config.stations_per_side), config.radius, lat,
                             config.obs_sigma, config.noise_family, config.dof)
        return cls(config, lat, dyn, obs)


@dataclass
class Dataset:
    truth_init: np.ndarray
    truth: np.ndarray
    record: ObservationRecord

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, truth_init=self.truth_init, truth=self.truth, times=self.record.times,
                 values=self.record.values, metadata=json.dumps(self.record.metadata, sort_keys=True))
        tmp.replace(path)
        self.record.save(path.with_suffix(".observations.json"))

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            rec = ObservationRecord(z["times"], z["values"], json.loads(str(z["metadata"])))
            return cls(z["truth_init"], z["truth"], rec)


def generate_dataset(config: ExperimentConfig, problem: Problem | None = None) -> Dataset:
    """Draw the true initial condition and simulate the observation record."""
    problem = problem or Problem.build(config)
    rng = np.random.default_rng(config.truth_seed)
    zero = np.zeros(problem.lattice.size, dtype=complex)
    v0 = GaussianPrior(problem.lattice, zero, config.alpha, config.truth_beta).sample(rng)
    truth, rec = generate_data(rng, v0, config.times, problem.dynamics, problem.observer,
                               metadata={"truth_seed": config.truth_seed, "data_hash": config.data_hash()})
    return Dataset(v0, truth, rec)


def load_or_generate(config: ExperimentConfig, data_dir, problem: Problem | None = None) -> Dataset:
    """Cached dataset keyed by the data hash, so all variants see identical observations."""
    path = Path(data_dir) / f"data-{config.data_hash()}.npz"
    if path.exists():
        return Dataset.load(path)
    ds = generate_dataset(config, problem)
    ds.save(path)
    return ds


def build_filter(config: ExperimentConfig, problem: Problem, dataset: Dataset):
    mu = dataset.truth_init if config.prior_mean == "truth" else np.zeros(problem.lattice.size, dtype=complex)
    prior = GaussianPrior(problem.lattice, mu, config.alpha, config.beta)
    model = FilterModel(problem.dynamics, problem.observer, prior)
    init = dataset.truth_init if config.init == "perfect" else None
    if config.variant == "enkf":
        return EnsembleKalmanFilter(model, config.n_particles, seed=config.seed, init=init)
    pcn = PcnConfig(config.pcn_rho, config.pcn_m, config.pcn_rho0, config.pcn_m_first)
    return ParticleFilter(model, config.n_particles, config.variant, pcn, config.alpha_frac,
                          seed=config.seed, init=init, max_levels=config.max_levels,
                          resample_final=config.resample_final)


def unconditional_ensemble(config: ExperimentConfig, problem: Problem, dataset: Dataset) -> np.ndarray:
    """Prior-dynamics ensemble at the final time started from the initial law."""
    mu = dataset.truth_init if config.prior_mean == "truth" else np.zeros(problem.lattice.size, dtype=complex)
    prior = GaussianPrior(problem.lattice, mu, config.alpha, config.beta)
    s_init, s_stream = np.random.SeedSequence([config.seed, 1]).spawn(2)
    u = prior.sample(np.random.default_rng(s_init), config.n_particles)
    streams = ParticleStreams(s_stream, config.n_particles)
    dyn = problem.dynamics
    t = 0.0
    for t1 in config.times:
        inc = streams.complex_normal((dyn.config.steps_for(t, t1), problem.lattice.size), np.sqrt(dyn.dt))
        u, _, _ = dyn.propagate(u, inc, t)
        t = t1
    return u


def run_experiment(config: ExperimentConfig, out_dir, threads: int = 1, data_dir=None,
                   dataset: Dataset | None = None) -> RunMetrics:
    """Run one filter over the whole observation record and write the run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with sfft.set_workers(threads):
        problem = Problem.build(config)
        if dataset is None:
            dataset = load_or_generate(config, data_dir or out / "data", problem)
        atomic_write(out / "config.json", config.to_json())
        filt = build_filter(config, problem, dataset)
        lat = problem.lattice
        metrics = RunMetrics(config.variant, config.seed, config.config_hash())
        mean_rows = []
        for n, (t1, y) in enumerate(zip(dataset.record.times, dataset.record.values), start=1):
            tic = time.perf_counter()
            try:
                result = filt.assimilate(float(t1), y)
            except (DegenerateEnsembleError, TemperingError, FloatingPointError) as exc:
                raise FilterStepError(n, float(t1), exc) from exc
            if config.variant == "enkf":
                mean = result
                ess, levels, acc, logz = float("nan"), 0, float("nan"), float("nan")
            else:
                diag = result
                mean, ess, levels, acc, logz = diag.mean, diag.ess, diag.levels, diag.accept_rate, diag.log_evidence
                if diag.tempering is not None:
                    rec = diag.tempering
                    for lvl in range(rec.levels):
                        metrics.add_level(n, lvl + 1, rec.phis[lvl + 1], rec.ess[lvl], rec.accept[lvl])
            err = float(l2_vorticity_error(mean, dataset.truth[n - 1], lat))
            metrics.add_step(n, float(t1), err, ess, levels, acc, logz, wall=time.perf_counter() - tic)
            log.info("%s step %d: l2=%.4g ess=%.3g levels=%d", config.variant, n, err, ess, levels)
            mean_rows.extend(
                (n, int(k[0]), int(k[1]), m.real, m.imag, tr.real, tr.imag)
                for k, m, tr in zip(lat.k, mean, dataset.truth[n - 1]))

        if config.variant == "enkf":
            final, weights = filt.members, None
        else:
            final, weights = filt.ensemble.state, filt.ensemble.weights()
        write_table(out / "posterior_mean.csv", ("step", "k1", "k2", "mean_re", "mean_im", "truth_re", "truth_im"),
                    mean_rows)
        pdf_rows = []
        for k in config.pdf_modes:
            if k not in lat:
                continue
            for comp in ("re", "im"):
                pdf = marginal_pdf(final, k, lat, comp, config.pdf_bins, weights)
                pdf_rows.extend((k[0], k[1], comp, kind, x, d) for kind, x, d in pdf.rows())
        write_table(out / "pdfs.csv", ("k1", "k2", "component", "kind", "x", "density"), pdf_rows)
        ratio = variance_ratio(final, unconditional_ensemble(config, problem, dataset), weights)
        write_table(out / "variance_ratio.csv", ("k1", "k2", "kabs", "ratio"),
                    [(int(k[0]), int(k[1]), float(a), r) for k, a, r in zip(lat.k, lat.kabs, ratio)])
        metrics.write(out)
    return metrics


def aggregate_runs(run_dirs, out_path=None) -> dict:
    """Mean and standard deviation (ddof=1) of per-step metrics across runs of one configuration."""
    runs = [RunMetrics.read(d) for d in run_dirs]
    if len(runs) < 2:
        raise ValueError("aggregation needs at least two runs")
    hashes = {r.config_hash for r in runs}
    if len(hashes) > 1:
        raise ValueError(f"runs come from different configurations: {sorted(hashes)}")
    n_steps = {len(r.steps) for r in runs}
    if len(n_steps) > 1:
        raise ValueError("runs have different numbers of steps")
    rows = []
    table = {}
    for name in ("l2_error", "ess", "levels", "accept_rate"):
        data = np.array([r.column(name) for r in runs])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean = np.nanmean(data, axis=0)
            sd = np.nanstd(data, axis=0, ddof=1)
        table[name] = {"mean": mean.tolist(), "sd": sd.tolist()}
        rows.extend((s + 1, name, m, v, len(runs)) for s, (m, v) in enumerate(zip(mean, sd)))
    result = {"config_hash": hashes.pop(), "variant": runs[0].variant, "n_runs": len(runs),
              "seeds": [r.seed for r in runs], "metrics": table}
    if out_path is not None:
        write_table(out_path, ("step", "metric", "mean", "sd", "n_runs"), rows)
    return result

