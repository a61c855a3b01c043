"""Independent reference computations used by the test-suite.

Everything here is written against the mathematical definitions directly
(dense matrices, quadrature, closed forms) and shares no code paths with the
package besides the lattice bookkeeping.
"""

from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi


def basis_on_grid(lattice, M):
    """``psi_k`` on an ``M x M`` grid for every upper-half ``k``: shape ``(K, M, M, 2)`` complex."""
    x = TWO_PI * np.arange(M) / M
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    out = np.empty((lattice.size, M, M, 2), dtype=complex)
    for i, (k1, k2) in enumerate(lattice.k):
        kk = np.hypot(k1, k2)
        e = np.exp(1j * (k1 * X1 + k2 * X2)) / TWO_PI
        out[i, ..., 0] = -k2 / kk * e
        out[i, ..., 1] = k1 / kk * e
    return out


def field_on_grid(u, lattice, M):
    """Direct evaluation of ``sum_k u_k psi_k + conj`` (real velocity)."""
    psi = basis_on_grid(lattice, M)
    return 2.0 * np.real(np.tensordot(u, psi, axes=(0, 0)))


def convection_coefficients(lattice, M=64):
    """``b[k, m, p] = <(psi_m . grad) psi_p, psi_k>`` over the full lattice, by trapezoid quadrature.

    Returned over the full set of nonzero wavenumbers ``{upper} + {-upper}``
    so that the convolution can run over mirrored modes explicitly.
    """
    full_k = np.concatenate([lattice.k, -lattice.k])
    x = TWO_PI * np.arange(M) / M
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    n = len(full_k)
    psi = np.empty((n, M, M, 2), dtype=complex)
    dpsi = np.empty((n, M, M, 2, 2), dtype=complex)  # [..., component, derivative]
    for i, (k1, k2) in enumerate(full_k):
        kk = np.hypot(k1, k2)
        e = np.exp(1j * (k1 * X1 + k2 * X2)) / TWO_PI
        v = np.array([-k2 / kk, k1 / kk])
        for c in range(2):
            psi[i, ..., c] = v[c] * e
            dpsi[i, ..., c, 0] = 1j * k1 * v[c] * e
            dpsi[i, ..., c, 1] = 1j * k2 * v[c] * e
    w = (TWO_PI / M) ** 2
    K = lattice.size
    b = np.zeros((K, n, n), dtype=complex)
    for m in range(n):
        # (psi_m . grad) psi_p for all p
        conv = np.einsum("xyd,pxycd->pxyc", psi[m], dpsi)
        b[:, m, :] = w * np.einsum("pxyc,kxyc->kp", conv, np.conj(psi[:K]))
    return full_k, b


def brute_force_nonlinear(u, lattice, b):
    """``sum_{m,p} b[k,m,p] u_m u_p`` with the mirror ``u_{-k} = -conj(u_k)``."""
    full = np.concatenate([u, -np.conj(u)])
    return np.einsum("kmp,m,p->k", b, full, full)


class KalmanOracle:
    """Exact filter for the linear (no convection) Galerkin system.

    Works in real coordinates ``x = (Re u_1, Im u_1, Re u_2, ...)``; each
    coordinate is an independent OU process, and observations are
    ``y = F_real x + eps`` with Gaussian noise.
    """

    def __init__(self, lattice, nu, sigma, prior_mean, prior_std, F_real, Sigma):
        lam = nu * lattice.kabs2
        self.lam = np.repeat(lam, 2)
        self.sig2 = np.repeat(np.asarray(sigma) ** 2, 2)
        self.mean = np.asarray(prior_mean, dtype=complex).view(np.float64).copy()
        self.cov = np.diag(np.repeat(np.asarray(prior_std) ** 2, 2))
        self.F = F_real
        self.Sigma = Sigma

    def predict(self, dt):
        a = np.exp(-self.lam * dt)
        q = 0.5 * self.sig2 * (-np.expm1(-2 * self.lam * dt)) / (2 * self.lam)
        self.mean = a * self.mean
        self.cov = a[:, None] * self.cov * a[None, :] + np.diag(q)

    def update(self, y):
        S = self.F @ self.cov @ self.F.T + self.Sigma
        G = np.linalg.solve(S, self.F @ self.cov).T
        self.mean = self.mean + G @ (y - self.F @ self.mean)
        self.cov = self.cov - G @ self.F @ self.cov
        self.cov = 0.5 * (self.cov + self.cov.T)

    def step(self, dt, y):
        self.predict(dt)
        self.update(y)
        return self.mean_complex(), self.var_real()

    def mean_complex(self):
        return self.mean.view(np.complex128).copy()

    def var_real(self):
        """Posterior variance of ``Re u_k`` for each mode."""
        return np.diag(self.cov)[0::2].copy()
