"""Eulerian observations: ball-averaged velocities at fixed stations.

Observation vectors list, for each station ``l`` in order, the ``x1`` and
then the ``x2`` velocity component, so row ``2 l + c`` of the operator is
component ``c`` at station ``l``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, special

from .spectral import TWO_PI, Lattice

FAMILIES = ("gaussian", "student-t")


def uniform_stations(n_per_side: int) -> np.ndarray:
    """Cell centres of an ``n x n`` uniform grid on the torus, row-major."""
    x = TWO_PI * (np.arange(n_per_side) + 0.5) / n_per_side
    a, b = np.meshgrid(x, x, indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=1)


def ball_average_factor(kabs: np.ndarray, r: float) -> np.ndarray:
    """Average of ``exp(i k.(x - c))`` over the disc ``|x - c| <= r``: ``2 J1(|k|r) / (|k|r)``."""
    z = np.asarray(kabs, dtype=float) * r
    out = np.ones_like(z)
    nz = z > 0
    out[nz] = 2.0 * special.j1(z[nz]) / z[nz]
    return out


@dataclass(frozen=True, eq=False)
class Observer:
    """Linear observation operator with its noise model.

    ``F`` is complex ``(d_y, K)`` with the mirrored half of the lattice folded
    in, so that ``F V = Re(F @ u)`` for upper-half coefficients ``u``.
    """

    stations: np.ndarray
    radius: float
    lattice: Lattice
    F: np.ndarray
    Sigma: np.ndarray
    family: str = "gaussian"
    dof: float | None = None

    def __post_init__(self):
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        d = self.F.shape[0]
        if Sigma.shape != (d, d):
            raise ValueError(f"Sigma must be {d}x{d}, got {Sigma.shape}")
        if not np.allclose(Sigma, Sigma.T, rtol=1e-12, atol=0.0):
            raise ValueError("Sigma must be symmetric")
        try:
            chol = linalg.cholesky(Sigma, lower=True)
        except linalg.LinAlgError:
            raise ValueError("Sigma is not positive definite") from None
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "student-t" and not (self.dof is not None and self.dof > 0):
            raise ValueError("student-t noise needs positive degrees of freedom")
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_logdet", 2.0 * np.sum(np.log(np.diag(chol))))
        object.__setattr__(self, "_scale", np.sqrt(np.diag(Sigma)))
        Freal = np.empty((d, 2 * self.F.shape[1]))
        Freal[:, 0::2] = self.F.real
        Freal[:, 1::2] = -self.F.imag
        object.__setattr__(self, "F_real", Freal)

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    @property
    def noise_cov(self) -> np.ndarray:
        """Covariance of the additive noise (the t family has variance ``dof/(dof-2)`` times Sigma)."""
        if self.family == "student-t":
            if self.dof <= 2:
                raise ValueError("student-t noise with dof <= 2 has infinite variance")
            return self.Sigma * self.dof / (self.dof - 2.0)
        return self.Sigma

    def predict(self, field: np.ndarray) -> np.ndarray:
        u = np.ascontiguousarray(self.lattice.check(field), dtype=complex)
        return u.view(np.float64) @ self.F_real.T

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """``F* y`` with respect to the ``L^2`` inner product of fields."""
        out = np.asarray(y, dtype=float) @ self.F_real
        return 0.5 * np.ascontiguousarray(out).view(np.complex128)

    def log_likelihood(self, field: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.log_density(np.asarray(y, dtype=float) - self.predict(field))

    def log_density(self, resid: np.ndarray) -> np.ndarray:
        """Log density of the observation noise at ``resid`` (last axis ``d_y``)."""
        d = self.dim
        if self.family == "gaussian":
            z = linalg.solve_triangular(self._chol, np.moveaxis(resid, -1, 0), lower=True)
            return -0.5 * np.sum(z**2, axis=0) - 0.5 * self._logdet - 0.5 * d * np.log(TWO_PI)
        nu = self.dof
        s = self._scale
        const = special.gammaln(0.5 * (nu + 1)) - special.gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi)
        q = (resid / s) ** 2
        return np.sum(const - np.log(s) - 0.5 * (nu + 1) * np.log1p(q / nu), axis=-1)

    def sample_noise(self, rng: np.random.Generator, size=()) -> np.ndarray:
        size = tuple(np.atleast_1d(size)) if size != () else ()
        if self.family == "gaussian":
            z = rng.standard_normal(size + (self.dim,))
            return z @ self._chol.T
        return self._scale * rng.standard_t(self.dof, size=size + (self.dim,))


def observation_matrix(stations: np.ndarray, r: float, lattice: Lattice) -> np.ndarray:
    """Ball-average operator folded onto the upper-half coefficients."""
    stations = np.atleast_2d(np.asarray(stations, dtype=float))
    phase = np.exp(1j * stations @ lattice.k.T)  # (p, K)
    avg = ball_average_factor(lattice.kabs, r)
    # the mirror mode contributes the complex conjugate, hence the factor 2
    rows = [2.0 * phase * (lattice.kperp_unit[:, c] / TWO_PI) * avg for c in (0, 1)]
    return np.stack(rows, axis=1).reshape(2 * len(stations), lattice.size)


def build_observer(stations, r: float, lattice: Lattice, Sigma, family: str = "gaussian",
                   dof: float | None = None) -> Observer:
    """Observer averaging both velocity components over discs of radius ``r``.

    ``Sigma`` may be a scalar (meaning ``Sigma * I``), a vector (diagonal) or a
    full matrix.
    """
    if not r > 0 or not np.isfinite(r):
        raise ValueError(f"ball radius must be positive, got {r}")
    stations = np.atleast_2d(np.asarray(stations, dtype=float))
    if stations.shape[1] != 2:
        raise ValueError("stations must be an array of (x1, x2) points")
    if np.any(stations < 0) or np.any(stations > TWO_PI):
        raise ValueError("stations must lie in [0, 2pi]^2")
    d = 2 * len(stations)
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim == 0:
        Sigma = float(Sigma) * np.eye(d)
    elif Sigma.ndim == 1:
        Sigma = np.diag(Sigma)
    F = observation_matrix(stations, r, lattice)
    return Observer(stations, float(r), lattice, F, Sigma, family, dof)


@dataclass
class ObservationRecord:
    """Observation times and values, with provenance metadata."""

    times: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[0] != len(self.times):
            raise ValueError("one observation vector per time required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observation values must be finite")

    def __len__(self) -> int:
        return len(self.times)

    def to_dict(self) -> dict:
        return {
            "format": "nsfilter.observations/1",
            "metadata": self.metadata,
            "times": self.times.tolist(),
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationRecord":
        return cls(np.array(d["times"]), np.array(d["values"]), dict(d.get("metadata", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ObservationRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_data(rng: np.random.Generator, truth_init: np.ndarray, times, dynamics, observer: Observer,
                  t0: float = 0.0, metadata: dict | None = None):
    """Run the prior dynamics from ``truth_init`` and observe it at ``times``.

    Returns the truth at each observation time, shape ``(n, K)``, and the
    :class:`ObservationRecord`.
    """
    times = np.asarray(times, dtype=float)
    u = np.asarray(truth_init, dtype=complex)
    truth = np.empty((len(times), len(u)), dtype=complex)
    values = np.empty((len(times), observer.dim))
    t = t0
    for i, t1 in enumerate(times):
        seg = dynamics.simulate_segment(rng, u, t, t1, keep_states=False)
        u = seg.end
        truth[i] = u
        values[i] = observer.predict(u) + observer.sample_noise(rng)
        t = t1
    meta = {"noise_family": observer.family}
    if observer.family == "student-t":
        meta["dof"] = observer.dof
    meta.update(metadata or {})
    return truth, ObservationRecord(times, values, meta)
