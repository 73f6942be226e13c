"""Discrete spatial operator gamma_s^2 - Laplacian on the lattice.

Finite differences with a lumped (diagonal) mass matrix stand in for FEM on
triangles: on a regular grid the two assemblies coincide up to boundary
terms. The Laplacian uses the 5-point stencil with Neumann reflection, so
the operator K = gamma_s^2 C + G is diagonalized exactly by the orthonormal
DCT-II basis, with eigenvalues c * (gamma_s^2 + mu_kx + mu_ky),
mu_k = (2 - 2 cos(pi k / n)) / h^2. A periodic variant (FFT-diagonalizable)
exists for stationarity tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import UnsupportedPower
from .lattice import LatticeSpec
from .sparsela import SparseSym


def _lap1d_neumann(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, 2.0)
    if n > 1:
        main[0] = main[-1] = 1.0
        off = np.full(n - 1, -1.0)
        return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2
    return sp.csr_matrix(np.zeros((1, 1)))


def _lap1d_periodic(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, 2.0)
    off = np.full(n - 1, -1.0)
    A = sp.diags([off, main, off], [-1, 0, 1], format="lil") / h**2
    if n > 2:
        A[0, n - 1] += -1.0 / h**2
        A[n - 1, 0] += -1.0 / h**2
    elif n == 2:
        A[0, 1] += -1.0 / h**2
        A[1, 0] += -1.0 / h**2
    return A.tocsr()


@dataclass(frozen=True)
class SpatialOperator:
    """C (lumped mass), G (scaled stiffness), K = gamma_s^2 C + G."""

    spec: LatticeSpec
    gamma_s: float
    periodic: bool
    C_diag: float                  # uniform lattice: C = c I with c = dx*dy
    G: sp.csc_matrix
    K: sp.csc_matrix

    @property
    def n(self) -> int:
        return self.spec.n_spatial

    def K_sym(self) -> SparseSym:
        return SparseSym.from_matrix(self.K)

    def eigenvalues(self) -> np.ndarray:
        """Grid (nby, nbx) of eigenvalues of C^{-1} K = gamma_s^2 - Delta_h."""
        s = self.spec
        kx = np.arange(s.nbx)
        ky = np.arange(s.nby)
        if self.periodic:
            mux = (2 - 2 * np.cos(2 * np.pi * kx / s.nbx)) / s.dx**2
            muy = (2 - 2 * np.cos(2 * np.pi * ky / s.nby)) / s.dy**2
        else:
            mux = (2 - 2 * np.cos(np.pi * kx / s.nbx)) / s.dx**2
            muy = (2 - 2 * np.cos(np.pi * ky / s.nby)) / s.dy**2
        return self.gamma_s**2 + muy[:, None] + mux[None, :]


def build_operator(
    spec: LatticeSpec, gamma_s: float, periodic: bool = False
) -> SpatialOperator:
    """Assemble C, G, K on the buffered spatial grid.

    Stencil weights: -dy/dx to x-neighbors, -dx/dy to y-neighbors, diagonal
    equal to minus the sum, so G rows sum to zero exactly.
    """
    if gamma_s <= 0:
        raise ValueError("gamma_s must be > 0")
    nbx, nby = spec.nbx, spec.nby
    c = spec.cell_area
    lap1x = _lap1d_periodic(nbx, spec.dx) if periodic else _lap1d_neumann(nbx, spec.dx)
    lap1y = _lap1d_periodic(nby, spec.dy) if periodic else _lap1d_neumann(nby, spec.dy)
    lap = sp.kron(sp.identity(nby), lap1x) + sp.kron(lap1y, sp.identity(nbx))
    G = (c * lap).tocsc()
    K = (gamma_s**2 * c * sp.identity(nbx * nby) + G).tocsc()
    return SpatialOperator(
        spec=spec, gamma_s=gamma_s, periodic=periodic, C_diag=c, G=G, K=K
    )


def operator_power(op: SpatialOperator, k: int) -> SparseSym:
    """K for k=1; the Matern nu=1 precision K C^{-1} K (13-point) for k=2."""
    if k == 1:
        return SparseSym.from_matrix(op.K)
    if k == 2:
        return SparseSym.from_matrix((op.K @ op.K) / op.C_diag)
    raise UnsupportedPower(f"operator power {k} not supported (only 1 and 2)")


# -- DCT machinery shared by the precision builders and the fast inference path --


def dct_basis_1d(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, Phi[i, k] = w_k cos(pi k (i + 1/2) / n)."""
    i = np.arange(n)[:, None]
    k = np.arange(n)[None, :]
    w = np.full(n, np.sqrt(2.0 / n))
    w[0] = np.sqrt(1.0 / n)
    return w[None, :] * np.cos(np.pi * k * (i + 0.5) / n)


def basis_sq_at(spec: LatticeSpec, ix: int, iy: int) -> np.ndarray:
    """Grid (nby, nbx) of squared orthonormal Neumann eigenvector values at a node."""
    px = dct_basis_1d(spec.nbx)[ix, :] ** 2
    py = dct_basis_1d(spec.nby)[iy, :] ** 2
    return py[:, None] * px[None, :]


def marginal_variance_at(
    op: SpatialOperator, mode_variances: np.ndarray, node: int
) -> float:
    """Variance at a node of a field whose per-mode variances are given.

    `mode_variances` has the (nby, nbx) eigenvalue-grid layout. Exact for
    the Neumann build (modes are the DCT-II basis).
    """
    s = op.spec
    iy, ix = divmod(node % s.n_spatial, s.nbx)
    return float(np.sum(mode_variances * basis_sq_at(s, ix, iy)))
