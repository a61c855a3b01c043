"""Fourier representation of divergence-free velocity fields on the 2-torus.

A velocity field on ``[0, 2*pi]^2`` is stored as the complex coefficients
``u_k`` of the basis

    psi_k(x) = (1 / 2pi) * (k_perp / |k|) * exp(i k.x),   k_perp = (-k2, k1),

for wavenumbers ``k`` in the upper half of the truncated lattice
``{max(|k1|, |k2|) <= L}``.  The lower half is implied by
``u_{-k} = -conj(u_k)``, which keeps the physical field real.  Arrays of
coefficients have shape ``(..., K)``; any leading axes are batch axes
(typically particles).

Physical grids use ``x[i, j] = (2 pi i / M, 2 pi j / M)``: axis ``-2`` runs
along ``x1`` and axis ``-1`` along ``x2`` for scalar fields.  Velocity grids
carry the component on the last axis, ``(..., M, M, 2)``.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi


def upper_half_wavenumbers(L: int) -> np.ndarray:
    """Wavenumbers of the truncated upper half-plane, lexicographically sorted."""
    r = np.arange(-L, L + 1)
    k1, k2 = np.meshgrid(r, r, indexing="ij")
    k1 = k1.ravel()
    k2 = k2.ravel()
    s = k1 + k2
    keep = (s > 0) | ((s == 0) & (k1 > 0))
    return np.stack([k1[keep], k2[keep]], axis=1)


def default_grid_size(L: int) -> int:
    """Smallest FFT-friendly size (5-smooth) that is at least ``3L + 1``.

    Quadratic products of modes with ``|k|_inf <= L`` alias onto wavenumbers of
    modulus at least ``M - 2L``, so ``M > 3L`` keeps retained modes exact.
    """
    return max(4, sfft.next_fast_len(3 * int(L) + 1, real=True))


class Lattice:
    """Truncated wavenumber set plus the grid used for transforms.

    Parameters
    ----------
    L : int
        Truncation level, ``max(|k1|, |k2|) <= L``.
    grid_size : int, optional
        Physical resolution ``M``.  Must exceed ``2L`` for transforms to be
        exact on the lattice; the nonlinear term additionally needs
        ``M > 3L`` to be alias free.  Defaults to :func:`default_grid_size`.
    """

    def __init__(self, L: int, grid_size: int | None = None):
        if int(L) != L or L < 1:
            raise ValueError(f"L must be a positive integer, got {L!r}")
        self.L = int(L)
        self.M = default_grid_size(self.L) if grid_size is None else int(grid_size)
        if self.M <= 2 * self.L:
            raise ValueError(f"grid_size {self.M} too small for L={self.L} (need > {2 * self.L})")

        self.k = upper_half_wavenumbers(self.L)
        self.size = len(self.k)
        self.kabs2 = (self.k**2).sum(axis=1).astype(float)
        self.kabs = np.sqrt(self.kabs2)
        kperp = np.stack([-self.k[:, 1], self.k[:, 0]], axis=1)
        self.kperp_unit = kperp / self.kabs[:, None]
        self._index = {(int(a), int(b)): i for i, (a, b) in enumerate(self.k)}
        self._build_fft_maps()

    def _build_fft_maps(self) -> None:
        M = self.M
        ncol = M // 2 + 1
        k1, k2 = self.k[:, 0], self.k[:, 1]
        # direct writes for k2 >= 0, conjugate writes at -k for k2 <= 0
        direct = k2 >= 0
        mirror = k2 <= 0
        self._direct_sel = np.flatnonzero(direct)
        self._direct_idx = (k1[direct] % M) * ncol + k2[direct]
        self._mirror_sel = np.flatnonzero(mirror)
        self._mirror_idx = (-k1[mirror] % M) * ncol + (-k2[mirror])
        # reading: mode k lives at +k if k2 >= 0, otherwise conj at -k
        self._read_idx = np.where(direct, (k1 % M) * ncol + k2, (-k1 % M) * ncol - k2)
        self._read_conj = ~direct

    def __repr__(self) -> str:
        return f"Lattice(L={self.L}, grid_size={self.M}, modes={self.size})"

    def index(self, k) -> int:
        """Position of wavenumber ``k`` in the coefficient vector."""
        try:
            return self._index[(int(k[0]), int(k[1]))]
        except KeyError:
            raise KeyError(f"wavenumber {tuple(k)} is not in the upper-half lattice L={self.L}") from None

    def __contains__(self, k) -> bool:
        return (int(k[0]), int(k[1])) in self._index

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        x = TWO_PI * np.arange(self.M) / self.M
        return np.meshgrid(x, x, indexing="ij")

    def check(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs)
        if coeffs.shape[-1] != self.size:
            raise ValueError(f"field has {coeffs.shape[-1]} coefficients, lattice L={self.L} has {self.size}")
        return coeffs

    # -- scalar transforms on Fourier amplitudes of exp(i k.x) --------------

    def synthesize(self, amps: np.ndarray) -> np.ndarray:
        """Evaluate ``sum_k a_k e^{ik.x} + conj`` on the grid.

        ``amps`` holds the amplitude of ``e^{ik.x}`` for each upper-half ``k``;
        the amplitude at ``-k`` is taken to be ``conj(a_k)``.
        """
        amps = np.asarray(amps)
        M = self.M
        batch = amps.shape[:-1]
        spec = np.zeros(batch + (M * (M // 2 + 1),), dtype=complex)
        spec[..., self._direct_idx] = amps[..., self._direct_sel]
        spec[..., self._mirror_idx] = np.conj(amps[..., self._mirror_sel])
        spec = spec.reshape(batch + (M, M // 2 + 1))
        return sfft.irfft2(spec, s=(M, M), norm="forward")

    def analyze(self, values: np.ndarray) -> np.ndarray:
        """Amplitudes of ``e^{ik.x}`` (upper-half ``k``) in a real grid field."""
        values = np.asarray(values, dtype=float)
        M = self.M
        if values.shape[-2:] != (M, M):
            raise ValueError(f"grid shape {values.shape[-2:]} does not match M={M}")
        spec = sfft.rfft2(values, norm="forward")
        flat = spec.reshape(spec.shape[:-2] + (-1,))
        out = flat[..., self._read_idx]
        out[..., self._read_conj] = np.conj(out[..., self._read_conj])
        return out


def to_physical(field: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Velocity grid ``(..., M, M, 2)`` of a coefficient array."""
    u = lattice.check(field)
    comps = [lattice.synthesize(u * (lattice.kperp_unit[:, c] / TWO_PI)) for c in (0, 1)]
    return np.stack(comps, axis=-1)


def to_physical_complex(field: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Full complex reconstruction, keeping the round-off imaginary part.

    Slower than :func:`to_physical`; used to check that the mirror rule really
    produces a real field.
    """
    u = lattice.check(field)
    M = lattice.M
    out = np.zeros(u.shape[:-1] + (M, M, 2), dtype=complex)
    k1 = lattice.k[:, 0] % M
    k2 = lattice.k[:, 1] % M
    m1 = -lattice.k[:, 0] % M
    m2 = -lattice.k[:, 1] % M
    for c in (0, 1):
        spec = np.zeros(u.shape[:-1] + (M, M), dtype=complex)
        a = u * lattice.kperp_unit[:, c] / TWO_PI
        spec[..., k1, k2] = a
        # u_{-k} psi_{-k} = conj(u_k psi_k)
        spec[..., m1, m2] = np.conj(a)
        out[..., c] = sfft.ifft2(spec, norm="forward")
    return out


def from_physical(grid: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Project a velocity grid ``(..., M, M, 2)`` onto the lattice basis.

    This is ``u_k = <V, psi_k>``: divergence and modes outside the lattice are
    discarded.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.shape[-1] != 2:
        raise ValueError("velocity grid must have a trailing component axis of length 2")
    a1 = lattice.analyze(grid[..., 0])
    a2 = lattice.analyze(grid[..., 1])
    return TWO_PI * (lattice.kperp_unit[:, 0] * a1 + lattice.kperp_unit[:, 1] * a2)


def vorticity(field: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Scalar vorticity grid ``curl V``; the amplitude of mode ``k`` is ``i|k|u_k / 2pi``."""
    u = lattice.check(field)
    return lattice.synthesize(1j * lattice.kabs * u / TWO_PI)


def nonlinear_term(field: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Coefficients of ``P_L P((u.grad) u)`` computed pseudospectrally.

    Uses ``(u.grad)u = grad(|u|^2 / 2) + w * u_perp`` with ``w`` the vorticity;
    the gradient is removed by the projection, so only ``w * u_perp`` is
    transformed back.
    """
    u = lattice.check(field)
    kp = lattice.kperp_unit
    v1 = lattice.synthesize(u * (kp[:, 0] / TWO_PI))
    v2 = lattice.synthesize(u * (kp[:, 1] / TWO_PI))
    w = lattice.synthesize(1j * lattice.kabs * u / TWO_PI)
    a1 = lattice.analyze(-w * v2)
    a2 = lattice.analyze(w * v1)
    return TWO_PI * (kp[:, 0] * a1 + kp[:, 1] * a2)


def inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``L^2(torus)`` inner product of two fields, summed over mirrored pairs."""
    return 2.0 * np.real(np.sum(a * np.conj(b), axis=-1))


def energy(field: np.ndarray) -> np.ndarray:
    """``int |V|^2 dx``."""
    return 2.0 * np.sum(np.abs(field) ** 2, axis=-1)


def enstrophy(field: np.ndarray, lattice: Lattice) -> np.ndarray:
    """``int w^2 dx`` for the vorticity ``w`` of the field."""
    return 2.0 * np.sum(lattice.kabs2 * np.abs(field) ** 2, axis=-1)
