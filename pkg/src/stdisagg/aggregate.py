"""Projection from fine lattice nodes to aggregated space-time cells.

On a uniform lattice each aggregated cell averages an s_f x s_f block of
spatial cells over t_f consecutive time points, so every projection row has
s_f^2 t_f entries equal to 1/(s_f^2 t_f); weights are built as exact
rationals of the block size, not accumulated. Buffer nodes are excluded.
Cell row index = window * n_regions + region, time-major like the node
index. The general unequal-area weighting |R_ik||T_jp| / (|R_i||T_j|) is
available through `build_projection_general` with cell-center membership
deciding the spatial portions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, IndivisibleFactor
from .lattice import Field, LatticeSpec


@dataclass(frozen=True)
class AggScheme:
    s_f: int
    t_f: int

    def __post_init__(self):
        if self.s_f < 1 or self.t_f < 1:
            raise IndivisibleFactor("aggregation factors must be >= 1")

    def validate(self, spec: LatticeSpec):
        if spec.nx % self.s_f or spec.ny % self.s_f:
            raise IndivisibleFactor(
                f"spatial factor {self.s_f} does not divide {spec.nx}x{spec.ny}"
            )
        if spec.nt % self.t_f:
            raise IndivisibleFactor(
                f"temporal factor {self.t_f} does not divide nt={spec.nt}"
            )


@dataclass(frozen=True)
class Projection:
    """Sparse row-stochastic matrix from lattice nodes to aggregated cells."""

    spec: LatticeSpec
    scheme: AggScheme | None     # None for general (non-uniform) projections
    matrix: sp.csr_matrix        # (n_cells, n_nodes)
    ncx: int
    ncy: int
    nct: int

    @property
    def n_cells(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_regions(self) -> int:
        return self.ncx * self.ncy

    def cell_index(self, cx: int, cy: int, ct: int) -> int:
        """Row of spatial region (cx, cy) in temporal window ct."""
        if not (0 <= cx < self.ncx and 0 <= cy < self.ncy and 0 <= ct < self.nct):
            raise DimensionMismatch(f"cell ({cx},{cy},{ct}) out of range")
        return ct * self.n_regions + cy * self.ncx + cx

    def cell_of_row(self, row: int) -> tuple[int, int, int]:
        ct, reg = divmod(row, self.n_regions)
        cy, cx = divmod(reg, self.ncx)
        return cx, cy, ct

    def apply(self, f: Field) -> np.ndarray:
        if f.spec.n_nodes != self.matrix.shape[1]:
            raise DimensionMismatch("field does not match projection")
        return self.matrix @ f.values


def build_projection(spec: LatticeSpec, scheme: AggScheme) -> Projection:
    """Uniform block-averaging projection; buffer nodes get zero columns."""
    scheme.validate(spec)
    sf, tf = scheme.s_f, scheme.t_f
    ncx, ncy, nct = spec.nx // sf, spec.ny // sf, spec.nt // tf
    b = spec.buffer
    w = 1.0 / (sf * sf * tf)

    n_entries = spec.n_interior
    rows = np.empty(n_entries, dtype=np.int64)
    cols = np.empty(n_entries, dtype=np.int64)
    pos = 0
    n_reg = ncx * ncy
    for it in range(spec.nt):
        ct = it // tf
        for jy in range(spec.ny):
            cy = jy // sf
            iy = jy + b
            base = it * spec.n_spatial + iy * spec.nbx + b
            row0 = ct * n_reg + cy * ncx
            for jx in range(spec.nx):
                rows[pos] = row0 + jx // sf
                cols[pos] = base + jx
                pos += 1
    P = sp.csr_matrix(
        (np.full(n_entries, w), (rows, cols)),
        shape=(nct * n_reg, spec.n_nodes),
    )
    return Projection(spec=spec, scheme=scheme, matrix=P, ncx=ncx, ncy=ncy, nct=nct)


def build_projection_general(
    spec: LatticeSpec,
    x_edges: np.ndarray,
    y_edges: np.ndarray,
    t_edges: np.ndarray,
) -> Projection:
    """Projection onto arbitrary rectangular regions / time windows.

    Regions are the rectangles of the edge grids; a node belongs to the
    region containing its cell center (spatial) or grid point (temporal),
    and rows average their member nodes equally, which reproduces the
    |R_ik||T_jp| / (|R_i||T_j|) weights for cell-center membership.
    """
    from .lattice import node_coords

    x_edges = np.asarray(x_edges, float)
    y_edges = np.asarray(y_edges, float)
    t_edges = np.asarray(t_edges, float)
    ncx, ncy, nct = len(x_edges) - 1, len(y_edges) - 1, len(t_edges) - 1
    if min(ncx, ncy, nct) < 1:
        raise IndivisibleFactor("need at least one region per axis")
    n_reg = ncx * ncy
    rows, cols = [], []
    for idx in range(spec.n_nodes):
        x, y, t = node_coords(spec, idx)
        cx = np.searchsorted(x_edges, x, side="right") - 1
        cy = np.searchsorted(y_edges, y, side="right") - 1
        ct = np.searchsorted(t_edges, t, side="right") - 1
        if 0 <= cx < ncx and 0 <= cy < ncy and 0 <= ct < nct:
            rows.append(ct * n_reg + cy * ncx + cx)
            cols.append(idx)
    P = sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(nct * n_reg, spec.n_nodes)
    )
    counts = np.asarray(P.sum(axis=1)).ravel()
    if np.any(counts == 0):
        raise IndivisibleFactor("a region contains no lattice nodes")
    P = sp.diags(1.0 / counts) @ P
    return Projection(spec=spec, scheme=None, matrix=P.tocsr(), ncx=ncx, ncy=ncy, nct=nct)


def aggregate_observe(W: Field, P: Projection, tau_eps: float, seed) -> np.ndarray:
    """y = P W + e with e ~ N(0, 1/tau_eps); tau_eps = inf gives exact means."""
    if tau_eps <= 0:
        raise ValueError("tau_eps must be > 0")
    y = P.apply(W)
    if np.isinf(tau_eps):
        return y
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return y + rng.standard_normal(y.shape) / np.sqrt(tau_eps)


def aggregate_covariates(X: list[Field], P: Projection) -> np.ndarray:
    """Design matrix of cell means: intercept column plus one per covariate."""
    cols = [np.ones(P.n_cells)]
    for f in X:
        cols.append(P.apply(f))
    return np.column_stack(cols)
