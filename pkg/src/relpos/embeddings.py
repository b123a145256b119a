"""Distance profiles over the patch lattice and the rank-one positional
embeddings generated from them.

Two profiles are built around the central patch set. The sequence profile
walks the linear patch order and grows by one unit per index step away
from the nearest central patch. The circle profile groups patches into
concentric rings around the grid's center point and gives ring k the
value unit * sqrt(2)**k, keeping the central ring pinned at exactly 1.
Either profile, taken as an N x 1 column, times a learnable length-D row
vector yields an N x D positional matrix with D learnable parameters
instead of the N * D a full learnable position embedding carries. The
matrix has the same shape as that full embedding, so it can replace it or
be added on top.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, as_tensor, concat_rows, matmul, reshape
from .errors import MissingParameterError, NonPositiveUnitError, ShapeMismatchError
from .grid import PatchGrid, central_indices

SQRT2 = math.sqrt(2.0)

MODES = ("none", "pe", "sre", "cre", "sre_plus_pe", "cre_plus_pe")
CLASS_TOKEN_POLICIES = ("zero_row", "learnable_row")

_PE_MODES = frozenset({"pe", "sre_plus_pe", "cre_plus_pe"})
_CORE_MODES = frozenset({"sre", "cre", "sre_plus_pe", "cre_plus_pe"})
_SEQUENCE_MODES = frozenset({"sre", "sre_plus_pe"})


@dataclass(frozen=True)
class DistanceVector:
    """Length-n vector of patch-to-center distances.

    ``kind`` is "sequence" or "circle"; ``unit`` is the hyperparameter the
    nonunit entries scale with. Central patches always carry exactly 1.
    """

    values: np.ndarray
    kind: str
    unit: float

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PositionalConfig:
    """Which positional signal is injected, and how the class token row is filled."""

    mode: str
    class_token_policy: str = "zero_row"
    unit: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown positional mode {self.mode!r}; choose from {MODES}")
        if self.class_token_policy not in CLASS_TOKEN_POLICIES:
            raise ValueError(
                f"unknown class token policy {self.class_token_policy!r}; "
                f"choose from {CLASS_TOKEN_POLICIES}"
            )
        if not self.unit > 0:
            raise NonPositiveUnitError(f"unit distance must be positive, got {self.unit}")

    @property
    def uses_pe(self) -> bool:
        return self.mode in _PE_MODES

    @property
    def uses_core(self) -> bool:
        return self.mode in _CORE_MODES


def sequence_distance_vector(grid: PatchGrid, unit: float = 1.0) -> DistanceVector:
    """Distances along the linear patch order.

    Entry i is 1 + unit * (index offset to the nearest central patch), so
    the profile is palindromic and every central patch reads exactly 1.
    """
    if not unit > 0:
        raise NonPositiveUnitError(f"unit distance must be positive, got {unit}")
    centrals = np.asarray(central_indices(grid))
    offsets = np.abs(np.arange(grid.n)[:, None] - centrals[None, :]).min(axis=1)
    return DistanceVector(values=1.0 + unit * offsets, kind="sequence", unit=float(unit))


def circle_classes(grid: PatchGrid) -> tuple[np.ndarray, int]:
    """Group patches into concentric rings around the grid center.

    Returns (ranks, class_count): ranks[i] is the 0-based position of patch
    i's Euclidean radius in the ascending list of distinct radii, and
    class_count the number of distinct radii (central ring included).
    Radii are compared through 4*r^2, an exact integer for every patch, so
    the grouping has no floating-point slack.
    """
    s = grid.side
    rows, cols = np.divmod(np.arange(grid.n), s)
    quad = (2 * rows - (s - 1)) ** 2 + (2 * cols - (s - 1)) ** 2
    distinct = np.unique(quad)
    ranks = np.searchsorted(distinct, quad).astype(np.int64)
    return ranks, int(distinct.size)


def circle_distance_vector(grid: PatchGrid, unit: float = 1.0) -> DistanceVector:
    """Ring distances: the central ring reads 1, ring k reads unit * sqrt(2)**k.

    Powers are computed as 2**(k // 2) times an optional sqrt(2) factor so
    even ring values stay exact integers in binary64.
    """
    if not unit > 0:
        raise NonPositiveUnitError(f"unit distance must be positive, got {unit}")
    ranks, _ = circle_classes(grid)
    values = unit * 2.0 ** (ranks // 2) * np.where(ranks % 2 == 1, SQRT2, 1.0)
    values[ranks == 0] = 1.0
    return DistanceVector(values=values, kind="circle", unit=float(unit))


def outer_embedding(dis: DistanceVector, core) -> Tensor:
    """Rank-one positional matrix: row i equals dis.values[i] * core.

    ``core`` is the single learnable length-D vector; pass it as a tracked
    Tensor to differentiate through the product.
    """
    core_t = as_tensor(core)
    if core_t.data.ndim != 1:
        raise ShapeMismatchError(f"core must be 1-D, got shape {core_t.shape}")
    column = Tensor(dis.values.reshape(-1, 1))
    return matmul(column, reshape(core_t, (1, core_t.size)))


def _accept(name: str, value, wanted: bool, expected: tuple[int, ...], mode: str) -> Tensor | None:
    if wanted and value is None:
        raise MissingParameterError(f"mode {mode!r} requires {name}")
    if not wanted and value is not None:
        raise ValueError(f"{name} is not used by mode {mode!r}")
    if value is None:
        return None
    t = as_tensor(value)
    if t.shape != expected:
        raise ShapeMismatchError(f"{name}: expected shape {expected}, got {t.shape}")
    return t


def compose_positional(
    cfg: PositionalConfig,
    grid: PatchGrid,
    dim: int,
    pe=None,
    core=None,
    cls_row=None,
) -> Tensor:
    """Assemble the (n + 1) x dim positional matrix for one configuration.

    Row 0 belongs to the class token (zeros, or the learnable ``cls_row``);
    the n patch rows hold the full position embedding ``pe``, the rank-one
    relation matrix from ``core``, their elementwise sum, or zeros,
    depending on ``cfg.mode``. Every mode produces the same output shape,
    which is what lets any of them stand in for any other in front of the
    first encoder block.
    """
    pe_t = _accept("pe", pe, cfg.uses_pe, (grid.n, dim), cfg.mode)
    core_t = _accept("core", core, cfg.uses_core, (dim,), cfg.mode)
    learnable_cls = cfg.class_token_policy == "learnable_row"
    cls_t = _accept("cls_row", cls_row, learnable_cls, (dim,), cfg.mode)

    if cfg.mode == "none":
        patch_rows: Tensor = Tensor(np.zeros((grid.n, dim)))
    else:
        parts = []
        if pe_t is not None:
            parts.append(pe_t)
        if core_t is not None:
            build = sequence_distance_vector if cfg.mode in _SEQUENCE_MODES else circle_distance_vector
            parts.append(outer_embedding(build(grid, cfg.unit), core_t))
        patch_rows = parts[0] if len(parts) == 1 else add(parts[0], parts[1])

    head = reshape(cls_t, (1, dim)) if cls_t is not None else Tensor(np.zeros((1, dim)))
    return concat_rows(head, patch_rows)


def learnable_param_count(cfg: PositionalConfig, n: int, dim: int) -> int:
    """Learnable positional parameters for one mode.

    A full position embedding costs n * dim; either rank-one relation mode
    costs just the dim-long core vector; combining adds them.
    """
    count = 0
    if cfg.uses_pe:
        count += n * dim
    if cfg.uses_core:
        count += dim
    if cfg.class_token_policy == "learnable_row":
        count += dim
    return count


# ---------------------------------------------------------------------------
# plain-text serialization: header "kind n d D", then one row per line


def save_matrix(path, kind: str, n: int, unit: float, matrix: np.ndarray) -> None:
    """Write a matrix with a `kind n d D` header, 17 significant digits per value."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeMismatchError(f"save_matrix: expected a 2-D matrix, got {matrix.shape}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{kind} {n} {unit:.17g} {matrix.shape[1]}\n")
        for row in matrix:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_matrix(path) -> tuple[str, int, float, np.ndarray]:
    """Read a matrix written by :func:`save_matrix`; round-trips binary64 exactly."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 4:
            raise ShapeMismatchError(f"{path}: malformed header {header!r}")
        kind, n, unit, dim = header[0], int(header[1]), float(header[2]), int(header[3])
        rows = [[float(v) for v in line.split()] for line in fh if line.strip()]
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    return kind, n, unit, matrix


def save_distance_vector(path, dis: DistanceVector) -> None:
    save_matrix(path, dis.kind, len(dis), dis.unit, dis.values.reshape(-1, 1))
