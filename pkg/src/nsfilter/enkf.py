"""Stochastic (perturbed-observation) ensemble Kalman filter."""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .filtering import FilterModel, ParticleStreams
from .observation import Observer


def enkf_analysis(rng: np.random.Generator, members: np.ndarray, y: np.ndarray, observer: Observer,
                  noise_cov: np.ndarray | None = None) -> np.ndarray:
    """Analysis update of a forecast ensemble ``(N, K)``.

    Each member is moved by ``C_xy (C_yy + R)^{-1} (y + eta_i - F u_i)`` with
    ``eta_i ~ N(0, R)``, where the covariances are sample covariances of the
    forecast ensemble and ``R`` defaults to the observation noise covariance.
    """
    members = np.asarray(members, dtype=complex)
    N = len(members)
    if N < 2:
        raise ValueError("EnKF needs at least two members")
    R = observer.noise_cov if noise_cov is None else noise_cov
    hx = observer.predict(members)
    du = members - members.mean(axis=0)
    dh = hx - hx.mean(axis=0)
    cxy = du.T @ dh / (N - 1)  # (K, d_y), complex
    cyy = dh.T @ dh / (N - 1)
    chol = linalg.cho_factor(cyy + R, lower=True)
    eta = rng.standard_normal((N, observer.dim)) @ linalg.cholesky(R, lower=True).T
    innov = y + eta - hx
    return members + linalg.cho_solve(chol, innov.T).T @ cxy.T


class EnsembleKalmanFilter:
    """Forecast with the prior dynamics, then :func:`enkf_analysis`.

    Under Student-t observation noise the analysis uses the noise covariance
    ``Sigma * dof / (dof - 2)``.
    """

    def __init__(self, model: FilterModel, n_members: int, seed=0, init=None, t0: float = 0.0):
        if n_members < 2:
            raise ValueError("EnKF needs at least two members")
        self.model = model
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        s_init, s_stream, s_analysis = ss.spawn(3)
        self.streams = ParticleStreams(s_stream, n_members)
        self.rng = np.random.default_rng(s_analysis)
        K = model.dynamics.lattice.size
        if init is None:
            init = model.prior.sample(np.random.default_rng(s_init), n_members)
        self.members = np.array(np.broadcast_to(np.asarray(init, dtype=complex), (n_members, K)))
        self.t = t0

    def forecast(self, t1: float) -> np.ndarray:
        dyn = self.model.dynamics
        n_steps = dyn.config.steps_for(self.t, t1)
        inc = self.streams.complex_normal((n_steps, dyn.lattice.size), np.sqrt(dyn.dt))
        end, _, ok = dyn.propagate(self.members, inc, self.t, None)
        if not ok.all():
            raise FloatingPointError(f"{(~ok).sum()} EnKF member(s) diverged on ({self.t}, {t1}]")
        return end

    def assimilate(self, t1: float, y) -> np.ndarray:
        forecast = self.forecast(t1)
        self.members = enkf_analysis(self.rng, forecast, np.asarray(y, dtype=float), self.model.observer)
        self.t = t1
        return self.members.mean(axis=0)

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)
