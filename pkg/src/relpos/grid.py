"""Square patch-lattice geometry.

Patches are numbered linearly in row-major order, ``index = row * side +
col``; central patches, 4-neighbor stencils and the dihedral symmetry
group all follow from that convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import IndexOutOfRangeError, NotPerfectSquareError, TooSmallError

MIN_PATCHES = 9


@dataclass(frozen=True)
class PatchGrid:
    """Square lattice of ``n`` patches, ``side`` patches per edge."""

    n: int
    side: int


class GridCoord(NamedTuple):
    row: int
    col: int


def grid_from_patch_count(n: int) -> PatchGrid:
    """Build the grid for ``n`` patches; ``n`` must be a perfect square >= 9."""
    if n < MIN_PATCHES:
        raise TooSmallError(f"patch count must be at least {MIN_PATCHES}, got {n}")
    side = math.isqrt(n)
    if side * side != n:
        raise NotPerfectSquareError(f"patch count {n} is not a perfect square")
    return PatchGrid(n=n, side=side)


def index_to_coords(grid: PatchGrid, index: int) -> GridCoord:
    """Map a linear patch index to its (row, col) lattice coordinate."""
    if not 0 <= index < grid.n:
        raise IndexOutOfRangeError(f"index {index} outside [0, {grid.n})")
    return GridCoord(*divmod(index, grid.side))


def coords_to_index(grid: PatchGrid, row: int, col: int) -> int:
    """Inverse of :func:`index_to_coords`."""
    if not (0 <= row < grid.side and 0 <= col < grid.side):
        raise IndexOutOfRangeError(
            f"coordinate ({row}, {col}) outside {grid.side}x{grid.side} grid"
        )
    return row * grid.side + col


def central_indices(grid: PatchGrid) -> list[int]:
    """Indices of the central patch set, ascending.

    Odd-sided grids have a single central patch, (n - 1) // 2; even-sided
    grids have the four patches straddling the lattice midpoint.
    """
    n, s = grid.n, grid.side
    if s % 2 == 1:
        return [(n - 1) // 2]
    half, offset = n // 2, s // 2
    return [half - offset - 1, half - offset, half + offset - 1, half + offset]


def four_neighbors(grid: PatchGrid, index: int) -> list[int]:
    """Up/left/right/down lattice neighbors of a patch, ascending.

    Candidates falling off the lattice are dropped, and the left/right
    candidates must share the row of ``index`` so the stencil never wraps
    around a row boundary.
    """
    row, col = index_to_coords(grid, index)
    s = grid.side
    out = []
    if row > 0:
        out.append(index - s)
    if col > 0:
        out.append(index - 1)
    if col < s - 1:
        out.append(index + 1)
    if row < s - 1:
        out.append(index + s)
    return out


def center_point(grid: PatchGrid) -> tuple[float, float]:
    """Symmetry center of the lattice in (row, col) coordinates.

    Coincides with the central patch on odd-sided grids and with the
    midpoint of the four central patches on even-sided ones.
    """
    mid = (grid.side - 1) / 2.0
    return (mid, mid)


def dihedral_index_maps(grid: PatchGrid) -> list[np.ndarray]:
    """Index permutations realizing the grid's eight symmetries.

    Each returned array ``m`` sends patch ``i`` to ``m[i]`` under one of:
    identity, horizontal flip, vertical flip, 180-degree rotation, the two
    diagonal flips, and the two quarter-turn rotations.
    """
    s = grid.side
    rows, cols = np.divmod(np.arange(grid.n), s)
    rflip, cflip = s - 1 - rows, s - 1 - cols
    images = [
        (rows, cols),
        (rows, cflip),
        (rflip, cols),
        (rflip, cflip),
        (cols, rows),
        (cols, rflip),
        (cflip, rows),
        (cflip, rflip),
    ]
    return [r * s + c for r, c in images]
