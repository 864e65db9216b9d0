"""Node-centered rectangular grids, region masks, and the Neumann Laplacian.

The computational window is the rectangle [0, Lx] x [0, Ly], discretized by
``nx`` by ``ny`` nodes so that the spacings are ``hx = Lx / (nx - 1)`` and
``hy = Ly / (ny - 1)``.  Fields are stored as arrays of shape ``(ny, nx)``
with row 0 the southernmost row, matching the mask file layout.

The five-point Laplacian uses homogeneous Neumann (zero normal flux)
boundaries closed by mirrored ghost nodes: the ghost value outside an edge
equals the boundary node's own value, so e.g. at the north edge

    (u[k-1, j] - 2 u[k, j] + u_ghost) / hy**2  ->  (u[k-1, j] - u[k, j]) / hy**2.

With this closure the operator matrix is symmetric and has zero row and
column sums, which is what makes the Crank-Nicolson scheme conserve the
integral of a diffused field exactly (up to round-off).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateRegionError, DimensionError, ParameterError

#: Refuse to build grids bigger than this unless the caller raises the limit.
DEFAULT_MAX_CELLS = 1_000_000


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a node-centered grid on [0, Lx] x [0, Ly].

    ``hx`` and ``hy`` are normally derived; they may be passed explicitly
    (e.g. when read back from a file) and are then checked against the
    derived values to relative 1e-12.
    """

    nx: int
    ny: int
    Lx: float
    Ly: float
    hx: float = field(default=0.0)
    hy: float = field(default=0.0)
    max_cells: int = field(default=DEFAULT_MAX_CELLS, repr=False, compare=False)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ParameterError(f"grid needs at least 2 nodes per axis, got {self.nx}x{self.ny}")
        if self.nx * self.ny > self.max_cells:
            raise ParameterError(
                f"grid has {self.nx * self.ny} cells, exceeding the maximum of {self.max_cells}"
            )
        if not (self.Lx > 0.0 and self.Ly > 0.0):
            raise ParameterError(f"window extents must be positive, got {self.Lx} x {self.Ly}")
        hx = self.Lx / (self.nx - 1)
        hy = self.Ly / (self.ny - 1)
        for name, given, derived in (("hx", self.hx, hx), ("hy", self.hy, hy)):
            if given and abs(given - derived) > 1e-12 * abs(derived):
                raise ParameterError(
                    f"{name}={given} inconsistent with derived value {derived}"
                )
        object.__setattr__(self, "hx", hx)
        object.__setattr__(self, "hy", hy)

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(ny, nx)`` of fields on this grid."""
        return (self.ny, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    def compatible(self, other: "GridSpec") -> bool:
        """Same node counts and extents (up to round-off)."""
        return (
            self.nx == other.nx
            and self.ny == other.ny
            and abs(self.Lx - other.Lx) <= 1e-9 * self.Lx
            and abs(self.Ly - other.Ly) <= 1e-9 * self.Ly
        )


@dataclass(frozen=True)
class RegionMask:
    """A named boolean field marking the cells that belong to one region."""

    name: str
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2:
            raise DimensionError(f"mask '{self.name}' must be 2-D, got ndim={cells.ndim}")
        if cells.dtype != np.bool_:
            if not np.isin(cells, (0, 1)).all():
                raise DimensionError(f"mask '{self.name}' contains values other than 0/1")
            cells = cells.astype(bool)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def cell_count(self) -> int:
        return int(self.cells.sum())

    def issubset(self, other: "RegionMask") -> bool:
        return bool((~other.cells[self.cells]).sum() == 0)

    def area(self, grid: GridSpec) -> float:
        self._check_grid(grid)
        return self.cell_count * grid.cell_area

    def _check_grid(self, grid: GridSpec):
        if self.cells.shape != grid.shape:
            raise DimensionError(
                f"mask '{self.name}' has shape {self.cells.shape}, grid expects {grid.shape}"
            )


def union_mask(masks, name: str = "district") -> RegionMask:
    """Union of several region masks (the district covered by data)."""
    masks = list(masks)
    if not masks:
        raise DegenerateRegionError("cannot form the union of zero masks")
    cells = np.zeros_like(masks[0].cells, dtype=bool)
    for m in masks:
        if m.cells.shape != cells.shape:
            raise DimensionError(f"mask '{m.name}' shape {m.cells.shape} differs from {cells.shape}")
        cells |= m.cells
    return RegionMask(name, cells)


@dataclass
class FieldSet:
    """A stack of same-shaped scalar fields at one instant.

    ``data`` has shape ``(len(names), ny, nx)``.  Used at API boundaries;
    inner solver loops work on the raw array.
    """

    names: tuple[str, ...]
    data: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[0] != len(self.names):
            raise DimensionError(
                f"expected data of shape ({len(self.names)}, ny, nx), got {self.data.shape}"
            )

    def validate(self, grid: GridSpec, normalized: bool = False, eps: float = 1e-9):
        """Check grid shape and, for fraction fields, the range [0, 1]."""
        if self.data.shape[1:] != grid.shape:
            raise DimensionError(
                f"fields have shape {self.data.shape[1:]}, grid expects {grid.shape}"
            )
        if normalized:
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < -eps or hi > 1.0 + eps:
                raise ParameterError(
                    f"normalized fields must stay in [0, 1], found range [{lo}, {hi}]"
                )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[self.names.index(name)]


def laplacian(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Apply the five-point Neumann Laplacian to one field of shape (ny, nx)."""
    if u.shape != grid.shape:
        raise DimensionError(f"field shape {u.shape} does not match grid {grid.shape}")
    out = np.empty_like(u, dtype=float)
    # x-direction second difference with mirrored ghosts
    out[:, 1:-1] = u[:, :-2] - 2.0 * u[:, 1:-1] + u[:, 2:]
    out[:, 0] = u[:, 1] - u[:, 0]
    out[:, -1] = u[:, -2] - u[:, -1]
    out /= grid.hx ** 2
    dyy = np.empty_like(u, dtype=float)
    dyy[1:-1, :] = u[:-2, :] - 2.0 * u[1:-1, :] + u[2:, :]
    dyy[0, :] = u[1, :] - u[0, :]
    dyy[-1, :] = u[-2, :] - u[-1, :]
    out += dyy / grid.hy ** 2
    return out


def _second_difference_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h ** 2


def laplacian_operator(grid: GridSpec) -> sp.csr_matrix:
    """Sparse matrix form of :func:`laplacian` acting on C-order flattened fields."""
    dxx = _second_difference_1d(grid.nx, grid.hx)
    dyy = _second_difference_1d(grid.ny, grid.hy)
    ix = sp.identity(grid.nx, format="csr")
    iy = sp.identity(grid.ny, format="csr")
    return (sp.kron(iy, dxx) + sp.kron(dyy, ix)).tocsr()


def region_total(u: np.ndarray, mask: RegionMask, grid: GridSpec) -> float:
    """Integral of a cell field over one region: sum of covered cells times hx*hy."""
    mask._check_grid(grid)
    if u.shape != grid.shape:
        raise DimensionError(f"field shape {u.shape} does not match grid {grid.shape}")
    return float(u[mask.cells].sum() * grid.cell_area)


def distribute_uniform(total: float, mask: RegionMask, grid: GridSpec) -> np.ndarray:
    """Spread a non-negative total uniformly over a region's cells.

    Returns the density field whose :func:`region_total` equals ``total``.
    """
    mask._check_grid(grid)
    if total < 0.0:
        raise ParameterError(f"cannot distribute a negative total ({total}) over '{mask.name}'")
    count = mask.cell_count
    if count == 0:
        raise DegenerateRegionError(f"region '{mask.name}' covers no cells")
    out = np.zeros(grid.shape)
    out[mask.cells] = total / (count * grid.cell_area)
    return out
