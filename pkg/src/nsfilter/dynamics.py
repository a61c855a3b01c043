"""Galerkin stochastic Navier-Stokes dynamics and the Gaussian initial law.

Per mode the system is

    du_k = (-nu |k|^2 u_k - B_k(u) + f_k) dt + sigma_k dZ_k,

with complex Brownian increments normalised so that ``E|dZ_k|^2 = dt``
(real and imaginary parts each ``dt / 2``).  Time stepping is exponential
Euler: the linear part is integrated exactly, the nonlinear and forcing terms
are frozen over a step, and the noise is scaled so that the linear
subsystem has the exact Ornstein-Uhlenbeck transition law.

A guided proposal adds ``sigma_k g_k`` to the drift.  It is applied as a
shift of the driving increments, ``dZ -> dZ + g dt``, so the per-step
proposal/prior density ratio is exactly the discrete Girsanov factor
computed in :mod:`nsfilter.guidance`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .spectral import Lattice, nonlinear_term

log = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    """Raised when a trajectory leaves the finite numbers."""

    def __init__(self, step: int, mode: int, wavenumber=None):
        self.step = step
        self.mode = mode
        self.wavenumber = wavenumber
        super().__init__(f"non-finite state at step {step}, mode index {mode} (k={wavenumber})")


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Per-mode amplitudes ``sigma_k`` of the Q-Wiener forcing."""

    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim != 1 or not np.all(np.isfinite(sigma)) or np.any(sigma < 0):
            raise ValueError("sigma must be a finite, non-negative vector")
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def power_law(cls, lattice: Lattice, delta: float = 1.0, nu: float = 0.1, exponent: float = 3.0):
        """``sigma_k = sqrt(2 delta nu) |k|^(-exponent)``.

        ``exponent <= 1`` makes ``sum_k sigma_k^2`` diverge on the full lattice
        (Q would not be trace class) and is rejected.
        """
        if exponent <= 1.0:
            raise ValueError(f"noise decay exponent must exceed 1 for a trace-class Q, got {exponent}")
        if delta < 0 or nu <= 0:
            raise ValueError("need delta >= 0 and nu > 0")
        return cls(np.sqrt(2.0 * delta * nu) * lattice.kabs ** (-exponent))

    def scaled(self, factor: float) -> "NoiseSpec":
        return NoiseSpec(self.sigma * factor)


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Driving increments ``dZ_k`` over one observation interval.

    ``increments`` has shape ``(..., n_steps, K)``; the Brownian path is taken
    to start at zero at the beginning of the interval.
    """

    increments: np.ndarray
    dt: float

    @property
    def n_steps(self) -> int:
        return self.increments.shape[-2]


@dataclass(frozen=True, eq=False)
class SolverConfig:
    nu: float
    dt: float
    forcing: Callable[[float], np.ndarray] | np.ndarray | None = None
    nonlinear: bool = True
    scheme: str = "exponential-euler"

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme != "exponential-euler":
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def steps_for(self, t0: float, t1: float) -> int:
        """Number of inner steps in ``(t0, t1]``; the gap must be a multiple of dt."""
        n = (t1 - t0) / self.dt
        steps = int(round(n))
        if steps < 1 or abs(n - steps) > 1e-9 * max(1.0, n):
            raise ValueError(f"interval {t1 - t0} is not a positive multiple of dt={self.dt}")
        return steps


@dataclass(eq=False)
class PathSegment:
    """One simulated interval: inner states, driving noise and Girsanov log-weight."""

    start: np.ndarray
    end: np.ndarray
    noise: NoisePath
    girsanov_log: np.ndarray | float
    t0: float
    states: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """``N(mu, beta^2 A^-alpha)``: independent complex Gaussians per mode.

    Real and imaginary parts of ``u_k - mu_k`` are iid with standard deviation
    ``beta / sqrt(2) * |k|^-alpha``.
    """

    lattice: Lattice
    mu: np.ndarray
    alpha: float = 3.0
    beta: float = 0.5

    def __post_init__(self):
        if not self.alpha > 2:
            raise ValueError(f"prior roughness alpha must exceed 2, got {self.alpha}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        object.__setattr__(self, "mu", self.lattice.check(np.asarray(self.mu, dtype=complex)))

    @property
    def std(self) -> np.ndarray:
        """Standard deviation of each real coordinate."""
        return self.beta / np.sqrt(2.0) * self.lattice.kabs ** (-self.alpha)

    def fluctuation(self, rng: np.random.Generator, size=()) -> np.ndarray:
        size = tuple(np.atleast_1d(size)) if size != () else ()
        z = rng.standard_normal(size + (self.lattice.size, 2))
        return self.std * (z[..., 0] + 1j * z[..., 1])

    def sample(self, rng: np.random.Generator, size=()) -> np.ndarray:
        return self.mu + self.fluctuation(rng, size)


def sample_prior(rng, mu, alpha: float, beta: float, lattice: Lattice, size=()) -> np.ndarray:
    """Draw from ``N(mu, beta^2 A^-alpha)``; see :class:`GaussianPrior`."""
    return GaussianPrior(lattice, mu, alpha, beta).sample(rng, size)


def complex_normal(rng: np.random.Generator, shape, scale: float = 1.0) -> np.ndarray:
    """Circular complex normals with ``E|z|^2 = scale^2``."""
    z = rng.standard_normal(tuple(shape) + (2,))
    return (scale / np.sqrt(2.0)) * (z[..., 0] + 1j * z[..., 1])


def sample_noise(rng: np.random.Generator, spec: NoiseSpec, dt: float, n_steps: int, size=()) -> NoisePath:
    """Increments with independent parts of variance ``dt / 2`` per mode and step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    size = tuple(np.atleast_1d(size)) if size != () else ()
    inc = complex_normal(rng, size + (n_steps, len(spec.sigma)), np.sqrt(dt))
    return NoisePath(inc, dt)


class Dynamics:
    """Exponential-Euler integrator for the Galerkin system.

    Holds the per-mode factors for a fixed ``(lattice, config, noise)``
    triple.  All methods accept batched states of shape ``(..., K)``.
    """

    def __init__(self, lattice: Lattice, config: SolverConfig, noise: NoiseSpec):
        if len(noise.sigma) != lattice.size:
            raise ValueError("noise spec and lattice sizes differ")
        self.lattice = lattice
        self.config = config
        self.noise = noise
        lam = config.nu * lattice.kabs2
        h = config.dt
        self.decay = np.exp(-lam * h)
        self.phi1 = -np.expm1(-lam * h) / lam
        self.noise_gain = noise.sigma * np.sqrt(-np.expm1(-2.0 * lam * h) / (2.0 * lam * h))

    @property
    def dt(self) -> float:
        return self.config.dt

    def forcing(self, t: float):
        f = self.config.forcing
        if f is None:
            return None
        return f(t) if callable(f) else f

    def drift(self, t: float, state: np.ndarray) -> np.ndarray | None:
        """Nonlinear plus forcing drift ``-B(u, u) + f``; ``None`` when both vanish."""
        out = None
        if self.config.nonlinear:
            out = -nonlinear_term(state, self.lattice)
        f = self.forcing(t)
        if f is not None:
            out = f if out is None else out + f
        return out

    def step(self, state: np.ndarray, drift: np.ndarray | None, dz: np.ndarray) -> np.ndarray:
        """One exponential-Euler step driven by increments ``dz``."""
        new = np.multiply(self.noise_gain, dz, dtype=complex)
        new += self.decay * state
        if drift is not None:
            new += self.phi1 * drift
        return new

    def _integrate(self, start, increments, t0, guidance, keep_states, strict=True):
        start = self.lattice.check(start)
        n_steps = increments.shape[-2]
        batch = np.broadcast_shapes(start.shape[:-1], increments.shape[:-2])
        u = np.broadcast_to(start, batch + start.shape[-1:]).astype(complex, copy=True)
        girsanov = np.zeros(batch)
        ok = np.ones(batch, dtype=bool)
        states = np.empty(batch + (n_steps, self.lattice.size), dtype=complex) if keep_states else None
        h = self.dt
        with np.errstate(over="ignore", invalid="ignore"):
            for s in range(n_steps):
                t = t0 + s * h
                dz = increments[..., s, :]
                drift = self.drift(t, u)
                if guidance is not None:
                    g = guidance.drift(t, u)
                    girsanov += guidance.increment(g, dz, h)
                    dz = dz + g * h
                u = self.step(u, drift, dz)
                finite = np.isfinite(u)
                if not finite.all():
                    if strict:
                        mode = int(np.argwhere(~finite)[0][-1])
                        raise IntegrationError(s, mode, tuple(int(v) for v in self.lattice.k[mode]))
                    rows = finite.all(axis=-1)
                    ok &= rows
                    u[~rows] = 0.0
                if keep_states:
                    states[..., s, :] = u
        return u, girsanov, states, ok

    def resolve_from_noise(self, start, noise: NoisePath, t0: float = 0.0, guidance=None,
                           keep_states: bool = True) -> PathSegment:
        """Deterministically integrate one interval driven by ``noise``."""
        if not np.isclose(noise.dt, self.dt, rtol=1e-12, atol=0.0):
            raise ValueError(f"noise dt {noise.dt} differs from solver dt {self.dt}")
        end, girsanov, states, _ = self._integrate(start, noise.increments, t0, guidance, keep_states)
        if np.ndim(girsanov) == 0:
            girsanov = float(girsanov)
        return PathSegment(np.asarray(start), end, noise, girsanov, t0, states)

    def simulate_segment(self, rng, start, t0: float, t1: float, guidance=None,
                         keep_states: bool = True) -> PathSegment:
        """Draw fresh noise and integrate over ``(t0, t1]``."""
        n = self.config.steps_for(t0, t1)
        start = np.asarray(start)
        noise = sample_noise(rng, self.noise, self.dt, n, size=start.shape[:-1])
        return self.resolve_from_noise(start, noise, t0, guidance, keep_states)

    def propagate(self, start, increments: np.ndarray, t0: float, guidance=None):
        """Batched integration returning ``(end, girsanov_log, ok)``.

        Rows whose trajectory becomes non-finite are flagged in ``ok`` (and get
        a ``-inf`` log-weight) instead of raising, so one bad particle does not
        abort an ensemble update.
        """
        end, girsanov, _, ok = self._integrate(start, increments, t0, guidance, False, strict=False)
        girsanov[~ok] = -np.inf
        return end, girsanov, ok
