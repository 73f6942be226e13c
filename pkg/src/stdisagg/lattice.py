"""Regular space-time lattice: node indexing, boundary buffer, field container.

Nodes sit at spatial cell centers and at the temporal grid points. The
spatial grid may carry a buffer of extra cells on each side; buffered cells
participate in precision construction but are excluded from aggregation and
scoring. Node index = t * G + (iy * NBX + ix), time-major, where NBX/NBY are
the buffered spatial counts and G = NBX * NBY.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, InvalidExtent

MAX_BUFFER = 8


@dataclass(frozen=True)
class LatticeSpec:
    nx: int
    ny: int
    nt: int
    x0: float
    y0: float
    dx: float
    dy: float
    t0: float
    dt: float
    buffer: int = 0

    def __post_init__(self):
        if min(self.nx, self.ny, self.nt) < 1:
            raise InvalidExtent("node counts must be >= 1")
        if min(self.dx, self.dy, self.dt) <= 0:
            raise InvalidExtent("spacings must be > 0")
        if self.buffer < 0:
            raise InvalidExtent("buffer must be >= 0")

    # -- buffered dimensions --

    @property
    def nbx(self) -> int:
        return self.nx + 2 * self.buffer

    @property
    def nby(self) -> int:
        return self.ny + 2 * self.buffer

    @property
    def n_spatial(self) -> int:
        return self.nbx * self.nby

    @property
    def n_nodes(self) -> int:
        return self.n_spatial * self.nt

    @property
    def n_interior(self) -> int:
        return self.nx * self.ny * self.nt

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    # -- indexing --

    def node_index(self, ix: int, iy: int, it: int) -> int:
        if not (0 <= ix < self.nbx and 0 <= iy < self.nby and 0 <= it < self.nt):
            raise IndexOutOfRange(f"node ({ix},{iy},{it}) outside lattice")
        return it * self.n_spatial + iy * self.nbx + ix

    def node_ixyt(self, index: int) -> tuple[int, int, int]:
        if not (0 <= index < self.n_nodes):
            raise IndexOutOfRange(f"index {index} outside lattice")
        it, rem = divmod(index, self.n_spatial)
        iy, ix = divmod(rem, self.nbx)
        return ix, iy, it

    def interior_mask(self) -> np.ndarray:
        """Boolean mask over all nodes, True on non-buffer nodes."""
        b = self.buffer
        m2 = np.zeros((self.nby, self.nbx), dtype=bool)
        m2[b : b + self.ny, b : b + self.nx] = True
        return np.tile(m2.ravel(), self.nt)

    def interior_spec(self) -> "LatticeSpec":
        return LatticeSpec(
            nx=self.nx, ny=self.ny, nt=self.nt,
            x0=self.x0, y0=self.y0, dx=self.dx, dy=self.dy,
            t0=self.t0, dt=self.dt, buffer=0,
        )

    def mid_node(self) -> int:
        """Index of a node near the domain center, at the middle time slice."""
        return self.node_index(self.nbx // 2, self.nby // 2, self.nt // 2)


def build_lattice(
    nx: int,
    ny: int,
    nt: int,
    extents: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0),
    buffer: int = 0,
    t0: float = 1.0,
    dt: float = 1.0,
) -> LatticeSpec:
    """Lattice of nx*ny spatial cells over `extents` = (xmin, xmax, ymin, ymax).

    Spacings are width/nx and height/ny; buffer cells extend beyond the
    extents and are excluded from aggregation and scoring.
    """
    xmin, xmax, ymin, ymax = extents
    if xmax <= xmin or ymax <= ymin:
        raise InvalidExtent(f"degenerate extents {extents}")
    if min(nx, ny, nt) < 1:
        raise InvalidExtent("node counts must be >= 1")
    return LatticeSpec(
        nx=nx, ny=ny, nt=nt,
        x0=xmin, y0=ymin,
        dx=(xmax - xmin) / nx, dy=(ymax - ymin) / ny,
        t0=t0, dt=dt, buffer=buffer,
    )


def default_buffer(range_s: float, dx: float) -> int:
    """ceil(r_s / dx), capped at MAX_BUFFER; guards Neumann variance inflation."""
    return min(int(np.ceil(range_s / dx)), MAX_BUFFER)


def node_coords(spec: LatticeSpec, index: int) -> tuple[float, float, float]:
    """(x, y, t) of a node: spatial cell center, temporal grid point."""
    ix, iy, it = spec.node_ixyt(index)
    b = spec.buffer
    x = spec.x0 + (ix - b + 0.5) * spec.dx
    y = spec.y0 + (iy - b + 0.5) * spec.dy
    t = spec.t0 + it * spec.dt
    return x, y, t


def coords_index(spec: LatticeSpec, x: float, y: float, t: float) -> int:
    """Inverse of node_coords (nearest node)."""
    b = spec.buffer
    ix = int(round((x - spec.x0) / spec.dx - 0.5)) + b
    iy = int(round((y - spec.y0) / spec.dy - 0.5)) + b
    it = int(round((t - spec.t0) / spec.dt))
    return spec.node_index(ix, iy, it)


@dataclass(frozen=True)
class Field:
    """Values over every node of a lattice (buffer included)."""

    spec: LatticeSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.spec.n_nodes,):
            raise IndexOutOfRange(
                f"field length {v.shape} != node count {self.spec.n_nodes}"
            )
        if not np.all(np.isfinite(v)):
            raise InvalidExtent("field contains non-finite values")
        object.__setattr__(self, "values", v)

    def cube(self) -> np.ndarray:
        """(nt, nby, nbx) view."""
        return self.values.reshape(self.spec.nt, self.spec.nby, self.spec.nbx)


def crop_interior(f: Field) -> Field:
    """Drop buffer cells; identity when buffer = 0."""
    s = f.spec
    if s.buffer == 0:
        return f
    b = s.buffer
    cube = f.cube()[:, b : b + s.ny, b : b + s.nx]
    return Field(spec=s.interior_spec(), values=np.ascontiguousarray(cube).ravel())


def embed_interior(f: Field, spec: LatticeSpec, fill: float = 0.0) -> Field:
    """Place an interior field into a buffered lattice, `fill` on the buffer."""
    if (f.spec.nx, f.spec.ny, f.spec.nt) != (spec.nx, spec.ny, spec.nt):
        raise IndexOutOfRange("interior shape does not match target lattice")
    b = spec.buffer
    cube = np.full((spec.nt, spec.nby, spec.nbx), fill)
    cube[:, b : b + spec.ny, b : b + spec.nx] = f.cube()
    return Field(spec=spec, values=cube.ravel())
