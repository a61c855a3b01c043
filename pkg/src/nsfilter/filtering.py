"""Particle filters for the Galerkin system.

Two engines share the same building blocks:

* :func:`assimilate_naive` propagates, weights and resamples once per
  observation (bootstrap when unguided, IS-PF when guided);
* :func:`assimilate_tempered` bridges proposal and posterior with adaptively
  chosen inverse temperatures, resampling and pCN moves at each level.

Ensembles are stored as arrays with the particle index first.  Each particle
slot owns a random stream, so draws do not depend on how the work is split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .dynamics import Dynamics, GaussianPrior, NoisePath, PathSegment
from .guidance import GuidanceOperator
from .observation import Observer

log = logging.getLogger(__name__)

BISECTION_TOL = 1e-10


class DegenerateEnsembleError(RuntimeError):
    """All particle weights vanished."""


class TemperingError(RuntimeError):
    """The adaptive tempering loop exceeded its level cap."""


# -- weights ----------------------------------------------------------------

def normalize_log_weights(logw: np.ndarray) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateEnsembleError("no particle has a finite log-weight")
    w = np.exp(logw - top)
    return w / w.sum()


def ess(logw: np.ndarray) -> float:
    """Effective sample size ``1 / sum W_j^2`` of unnormalised log-weights."""
    w = normalize_log_weights(logw)
    return float(1.0 / np.dot(w, w))


def _tempered_logw(log_incr, delta, logw_prev):
    with np.errstate(invalid="ignore"):
        out = delta * log_incr
    out[np.isneginf(log_incr)] = -np.inf
    if logw_prev is not None:
        out = out + logw_prev
    return out


def next_temperature(log_incr: np.ndarray, phi_prev: float, alpha_frac: float = 0.5,
                     logw_prev: np.ndarray | None = None, tol: float = BISECTION_TOL) -> float:
    """Smallest ``phi`` in ``(phi_prev, 1]`` with ``ESS(phi) <= alpha_frac * N``.

    ``ESS(phi)`` is computed from weights ``exp((phi - phi_prev) * log_incr)``
    (times ``exp(logw_prev)`` if the particles still carry weights).  Returns 1
    when even the full step keeps the ESS above the threshold.
    """
    if not 0 <= phi_prev < 1:
        raise ValueError(f"phi_prev must lie in [0, 1), got {phi_prev}")
    if not 0 < alpha_frac < 1:
        raise ValueError("alpha_frac must lie in (0, 1)")
    log_incr = np.asarray(log_incr, dtype=float)
    n = len(log_incr)
    target = alpha_frac * n
    if not np.any(np.isfinite(log_incr)):
        raise DegenerateEnsembleError("all incremental weights are zero")
    if logw_prev is not None and ess(logw_prev) < target:
        # ESS(phi) need not be monotone then, so the root would be ambiguous
        raise ValueError("carried weights are already below the ESS target; resample first")

    def f(delta):
        return ess(_tempered_logw(log_incr, delta, logw_prev)) - target

    hi = 1.0 - phi_prev
    if f(hi) >= 0:
        return 1.0
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) >= 0:
            lo = mid
        else:
            hi = mid
    # hi is the first point known to satisfy ESS <= target
    return min(1.0, phi_prev + hi)


def systematic_resample(rng: np.random.Generator, weights: np.ndarray, n: int | None = None) -> np.ndarray:
    """Ancestor indices by systematic resampling; offspring counts are floor or ceil of ``n W_j``."""
    weights = np.asarray(weights, dtype=float)
    n = len(weights) if n is None else n
    cs = np.cumsum(weights)
    cs /= cs[-1]
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cs, u, side="right"), len(weights) - 1)


# -- random streams ---------------------------------------------------------

class ParticleStreams:
    """One independent generator per particle slot."""

    def __init__(self, seed, n: int):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.generators = [np.random.default_rng(s) for s in ss.spawn(n)]

    def __len__(self):
        return len(self.generators)

    def standard_normal(self, shape) -> np.ndarray:
        return np.stack([g.standard_normal(shape) for g in self.generators])

    def complex_normal(self, shape, scale: float = 1.0) -> np.ndarray:
        z = self.standard_normal(tuple(shape) + (2,))
        return (scale / np.sqrt(2.0)) * (z[..., 0] + 1j * z[..., 1])

    def random(self) -> np.ndarray:
        return np.array([g.random() for g in self.generators])


# -- ensemble ---------------------------------------------------------------

@dataclass
class Particle:
    state: np.ndarray
    segment: PathSegment | None
    log_weight: float


@dataclass
class Ensemble:
    """Particle states at the start and end of the current interval.

    ``noise`` holds the driving increments of the current segment, shape
    ``(N, n_steps, K)``, and ``girsanov``/``loglik`` its log-weight terms.
    ``logw`` is the carried (unnormalised) log-weight.
    """

    start: np.ndarray
    state: np.ndarray
    noise: np.ndarray | None = None
    girsanov: np.ndarray | None = None
    loglik: np.ndarray | None = None
    logw: np.ndarray | None = None
    t0: float = 0.0
    dt: float | None = None

    def __post_init__(self):
        n = len(self.state)
        if self.girsanov is None:
            self.girsanov = np.zeros(n)
        if self.loglik is None:
            self.loglik = np.zeros(n)
        if self.logw is None:
            self.logw = np.zeros(n)

    @classmethod
    def from_states(cls, states: np.ndarray, t0: float = 0.0) -> "Ensemble":
        states = np.array(states, dtype=complex)
        return cls(start=states.copy(), state=states, t0=t0)

    @property
    def size(self) -> int:
        return len(self.state)

    @property
    def log_target(self) -> np.ndarray:
        return self.girsanov + self.loglik

    def take(self, idx: np.ndarray) -> "Ensemble":
        return replace(
            self,
            start=self.start[idx],
            state=self.state[idx],
            noise=None if self.noise is None else self.noise[idx],
            girsanov=self.girsanov[idx],
            loglik=self.loglik[idx],
            logw=np.zeros(len(idx)),
        )

    def weights(self) -> np.ndarray:
        return normalize_log_weights(self.logw)

    def mean(self) -> np.ndarray:
        return self.weights() @ self.state

    def particle(self, i: int) -> Particle:
        seg = None
        if self.noise is not None:
            seg = PathSegment(self.start[i], self.state[i], NoisePath(self.noise[i], self.dt),
                              float(self.girsanov[i]), self.t0)
        return Particle(self.state[i], seg, float(self.logw[i]))


def resample(rng: np.random.Generator, ensemble: Ensemble, weights: np.ndarray | None = None) -> Ensemble:
    """Systematic resampling to an equally weighted ensemble."""
    w = ensemble.weights() if weights is None else np.asarray(weights, dtype=float)
    return ensemble.take(systematic_resample(rng, w))


# -- model bundle -----------------------------------------------------------

@dataclass
class FilterModel:
    """Everything a filter needs besides the data: dynamics, observer, initial law."""

    dynamics: Dynamics
    observer: Observer
    prior: GaussianPrior
    _guidance: GuidanceOperator | None = field(default=None, repr=False)

    def guidance(self, y, t_end):
        if self._guidance is None:
            self._guidance = GuidanceOperator(self.observer, self.dynamics.noise)
        return self._guidance.bind(y, t_end)


@dataclass(frozen=True)
class PcnConfig:
    """pCN settings: ``rho`` for path noise, ``rho0`` for the initial condition at the first step.

    ``m_first`` overrides the number of moves per level at the first
    observation time; ``rho0 = None`` disables initial-condition moves.
    """

    rho: float = 0.9
    m: int = 10
    rho0: float | None = None
    m_first: int | None = None

    def __post_init__(self):
        for name in ("rho", "rho0"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.m < 0 or (self.m_first is not None and self.m_first < 0):
            raise ValueError("number of pCN moves must be non-negative")

    def moves(self, first: bool) -> int:
        return self.m_first if (first and self.m_first is not None) else self.m


@dataclass
class TemperingRecord:
    phis: list = field(default_factory=lambda: [0.0])
    ess: list = field(default_factory=list)
    accept: list = field(default_factory=list)

    @property
    def levels(self) -> int:
        return len(self.phis) - 1


@dataclass
class StepDiagnostics:
    mean: np.ndarray
    ess: float
    levels: int
    log_evidence: float
    tempering: TemperingRecord | None = None

    @property
    def accept_rate(self) -> float:
        if self.tempering is None or not self.tempering.accept:
            return float("nan")
        return float(self.tempering.accept[-1])


# -- moves ------------------------------------------------------------------

def propagate(streams: ParticleStreams, ensemble: Ensemble, model: FilterModel, y, t0: float, t1: float,
              guided: bool) -> Ensemble:
    """Draw fresh noise for every particle and simulate ``(t0, t1]``."""
    dyn = model.dynamics
    n_steps = dyn.config.steps_for(t0, t1)
    guidance = model.guidance(y, t1) if guided else None
    inc = streams.complex_normal((n_steps, dyn.lattice.size), np.sqrt(dyn.dt))
    end, gir, ok = dyn.propagate(ensemble.state, inc, t0, guidance)
    if not ok.all():
        log.warning("%d particle(s) produced non-finite trajectories on (%g, %g]", (~ok).sum(), t0, t1)
    ll = model.observer.log_likelihood(end, y)
    ll[~ok] = -np.inf
    return Ensemble(start=ensemble.state, state=end, noise=inc, girsanov=gir, loglik=ll,
                    logw=ensemble.logw.copy(), t0=t0, dt=dyn.dt)


def _metropolis(streams, ensemble, phi, start, end, noise, gir, ll, ok):
    new_target = gir + ll
    with np.errstate(invalid="ignore"):
        log_ratio = phi * (new_target - ensemble.log_target)
    if phi == 0:
        log_ratio = np.zeros_like(log_ratio)
    log_ratio[~ok | np.isnan(log_ratio)] = -np.inf
    if not ok.all():
        log.warning("%d pCN proposal(s) failed to integrate and were rejected", (~ok).sum())
    accept = np.log(streams.random()) < log_ratio
    a = accept[:, None]
    out = replace(
        ensemble,
        start=np.where(a, start, ensemble.start),
        state=np.where(a, end, ensemble.state),
        noise=np.where(accept[:, None, None], noise, ensemble.noise),
        girsanov=np.where(accept, gir, ensemble.girsanov),
        loglik=np.where(accept, ll, ensemble.loglik),
    )
    return out, accept


def pcn_move(streams: ParticleStreams, ensemble: Ensemble, phi: float, model: FilterModel, y,
             t1: float, rho: float, guided: bool):
    """One pCN step on the driving noise of every particle.

    Proposes ``W' = rho W + sqrt(1 - rho^2) xi`` on the current interval,
    re-solves the path and accepts with probability
    ``min(1, exp(phi * (l' - l)))`` where ``l`` is the Girsanov plus
    log-likelihood term.  The state at the start of the interval is untouched.
    Returns ``(ensemble, accepted_mask)``.
    """
    dyn = model.dynamics
    xi = streams.complex_normal(ensemble.noise.shape[1:], np.sqrt(dyn.dt))
    noise = rho * ensemble.noise + np.sqrt(1.0 - rho * rho) * xi
    guidance = model.guidance(y, t1) if guided else None
    end, gir, ok = dyn.propagate(ensemble.start, noise, ensemble.t0, guidance)
    ll = model.observer.log_likelihood(end, y)
    ll[~ok] = -np.inf
    return _metropolis(streams, ensemble, phi, ensemble.start, end, noise, gir, ll, ok)


def pcn_init_move(streams: ParticleStreams, ensemble: Ensemble, phi: float, model: FilterModel, y,
                  t1: float, rho0: float, guided: bool):
    """pCN step on the initial condition, reversible for the Gaussian initial law.

    ``V0' = mu + rho0 (V0 - mu) + sqrt(1 - rho0^2) zeta`` with ``zeta`` a
    centred draw from that law; the path is re-solved with the same noise.
    """
    prior = model.prior
    dyn = model.dynamics
    z = streams.standard_normal((dyn.lattice.size, 2))
    zeta = prior.std * (z[..., 0] + 1j * z[..., 1])
    start = prior.mu + rho0 * (ensemble.start - prior.mu) + np.sqrt(1.0 - rho0 * rho0) * zeta
    guidance = model.guidance(y, t1) if guided else None
    end, gir, ok = dyn.propagate(start, ensemble.noise, ensemble.t0, guidance)
    ll = model.observer.log_likelihood(end, y)
    ll[~ok] = -np.inf
    return _metropolis(streams, ensemble, phi, start, end, ensemble.noise, gir, ll, ok)


# -- assimilation steps -----------------------------------------------------

def assimilate_naive(streams: ParticleStreams, rng: np.random.Generator, ensemble: Ensemble, y,
                     model: FilterModel, t0: float, t1: float, guided: bool):
    """Propagate, weight by likelihood times Girsanov factor, resample."""
    ens = propagate(streams, ensemble, model, y, t0, t1, guided)
    logw = ens.logw + ens.log_target
    w = normalize_log_weights(logw)
    diag = StepDiagnostics(
        mean=w @ ens.state,
        ess=float(1.0 / np.dot(w, w)),
        levels=1,
        log_evidence=float(logsumexp(logw) - logsumexp(ens.logw)),
    )
    return ens.take(systematic_resample(rng, w)), diag


def assimilate_tempered(streams: ParticleStreams, rng: np.random.Generator, ensemble: Ensemble, y,
                        model: FilterModel, t0: float, t1: float, pcn: PcnConfig,
                        alpha_frac: float = 0.5, guided: bool = True, first: bool = False,
                        max_levels: int = 100, resample_final: bool = True):
    """Adaptive tempering with resample-move at every level.

    At each level the next inverse temperature keeps the ESS at
    ``alpha_frac * N`` (or jumps to 1), particles are resampled and then moved
    by ``m`` pCN steps targeting the current tempered law.  With
    ``first=True`` and ``pcn.rho0`` set, each pCN iteration also moves the
    initial condition.  With ``resample_final=False`` the last level keeps
    its weights, which are carried into the next step.
    """
    ens = propagate(streams, ensemble, model, y, t0, t1, guided)
    logw_prev = ens.logw
    if np.all(logw_prev == logw_prev[0]):
        logw_prev = None
    elif ess(logw_prev) < alpha_frac * ens.size:
        ens = ens.take(systematic_resample(rng, normalize_log_weights(logw_prev)))
        logw_prev = None
    record = TemperingRecord()
    phi = 0.0
    log_evidence = 0.0
    m = pcn.moves(first)
    init_moves = first and pcn.rho0 is not None
    while phi < 1.0:
        if record.levels >= max_levels:
            raise TemperingError(f"more than {max_levels} tempering levels on (t={t0}, {t1}]")
        r = ens.log_target
        phi_new = next_temperature(r, phi, alpha_frac, logw_prev)
        logw = _tempered_logw(r, phi_new - phi, logw_prev)
        base = 0.0 if logw_prev is None else logsumexp(logw_prev)
        log_evidence += float(logsumexp(logw) - (base if logw_prev is not None else np.log(len(r))))
        w = normalize_log_weights(logw)
        record.phis.append(phi_new)
        record.ess.append(float(1.0 / np.dot(w, w)))
        if phi_new >= 1.0 and not resample_final:
            ens = replace(ens, logw=np.log(w))
        else:
            ens = ens.take(systematic_resample(rng, w))
        logw_prev = None if np.all(ens.logw == 0) else ens.logw
        accepted = []
        for _ in range(m):
            ens, acc = pcn_move(streams, ens, phi_new, model, y, t1, pcn.rho, guided)
            accepted.append(acc.mean())
            if init_moves:
                ens, acc = pcn_init_move(streams, ens, phi_new, model, y, t1, pcn.rho0, guided)
        record.accept.append(float(np.mean(accepted)) if accepted else float("nan"))
        phi = phi_new
    diag = StepDiagnostics(
        mean=ens.weights() @ ens.state,
        ess=record.ess[-1],
        levels=record.levels,
        log_evidence=log_evidence,
        tempering=record,
    )
    return ens, diag


# -- driver -----------------------------------------------------------------

VARIANTS = {
    "pf": (False, False),
    "ispf": (True, False),
    "pft": (False, True),
    "ispft": (True, True),
}


class ParticleFilter:
    """Sequential driver for the four particle-filter variants.

    Parameters
    ----------
    model : FilterModel
    n_particles : int
    variant : {"pf", "ispf", "pft", "ispft"}
        Guided proposal and/or tempering.
    pcn : PcnConfig
        Used by the tempered variants only.
    seed : int or SeedSequence
        Master seed; particle streams and the resampling stream are spawned
        from it.
    init : array, optional
        Initial states ``(N, K)`` or a single state shared by all particles.
        Defaults to draws from ``model.prior``.
    """

    def __init__(self, model: FilterModel, n_particles: int, variant: str = "ispft",
                 pcn: PcnConfig | None = None, alpha_frac: float = 0.5, seed=0, init=None,
                 max_levels: int = 100, resample_final: bool = True, t0: float = 0.0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        if n_particles < 2:
            raise ValueError("a particle filter needs at least two particles")
        self.model = model
        self.variant = variant
        self.guided, self.tempered = VARIANTS[variant]
        self.pcn = pcn or PcnConfig()
        self.alpha_frac = alpha_frac
        self.max_levels = max_levels
        self.resample_final = resample_final
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        s_init, s_stream, s_resample = ss.spawn(3)
        self.streams = ParticleStreams(s_stream, n_particles)
        self.rng = np.random.default_rng(s_resample)
        K = model.dynamics.lattice.size
        if init is None:
            init = model.prior.sample(np.random.default_rng(s_init), n_particles)
            self._init_from_prior = True
        else:
            init = np.broadcast_to(np.asarray(init, dtype=complex), (n_particles, K))
            self._init_from_prior = False
        self.ensemble = Ensemble.from_states(init, t0)
        self.t = t0
        self.n = 0

    def assimilate(self, t1: float, y) -> StepDiagnostics:
        t0 = self.t
        if self.tempered:
            pcn = self.pcn
            if not self._init_from_prior and pcn.rho0 is not None:
                # initial-condition moves are only reversible for the Gaussian initial law
                pcn = replace(pcn, rho0=None)
            self.ensemble, diag = assimilate_tempered(
                self.streams, self.rng, self.ensemble, y, self.model, t0, t1, pcn,
                self.alpha_frac, self.guided, first=self.n == 0, max_levels=self.max_levels,
                resample_final=self.resample_final)
        else:
            self.ensemble, diag = assimilate_naive(self.streams, self.rng, self.ensemble, y, self.model,
                                                   t0, t1, self.guided)
        self.t = t1
        self.n += 1
        return diag

    def run(self, times, values):
        return [self.assimilate(t, y) for t, y in zip(times, values)]
