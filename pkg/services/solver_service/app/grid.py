"""Tensor-product meshes on d-rectangles with a one-layer ghost extension.

Multi-indices follow the 1-based mesh convention: mesh nodes have
``alpha_i in 1..J_i`` and ghost nodes sit at ``alpha_i = 0`` or ``J_i + 1``.
Because of that, a multi-index is also the position of the node in the dense
storage array of a :class:`GridFunction` (shape ``J_i + 2`` per axis).
Axes are 0-based, as everywhere else in numpy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Callable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MultiIndex = tuple[int, ...]
PointFunction = Callable[[np.ndarray], np.ndarray]


class GridError(ValueError):
    pass


class GridIndexError(IndexError):
    pass


class UnsetValueError(RuntimeError):
    pass


class NodeClass(str, Enum):
    INTERIOR = "interior"
    BOUNDARY = "boundary"
    BOUNDARY_AUX = "boundary_aux"
    GHOST = "ghost"
    EXCLUDED_GHOST = "excluded_ghost"


_CLASS_CODES: dict[int, NodeClass] = dict(enumerate(NodeClass))
_CODE_OF: dict[NodeClass, int] = {node_class: code for code, node_class in _CLASS_CODES.items()}


@dataclass(frozen=True)
class DomainBox:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lower) != len(self.upper) or not self.lower:
            raise GridError("Domain bounds must be non-empty vectors of equal length.")
        for axis, (low, high) in enumerate(zip(self.lower, self.upper)):
            if not high > low:
                raise GridError(f"Domain upper bound must exceed lower bound on axis {axis}: {low} >= {high}")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def extents(self) -> tuple[float, ...]:
        return tuple(high - low for low, high in zip(self.lower, self.upper))


def unit_box(dim: int = 2) -> DomainBox:
    return DomainBox(lower=(0.0,) * dim, upper=(1.0,) * dim)


@dataclass(frozen=True)
class GridSpec:
    domain: DomainBox
    sizes: tuple[int, ...]
    spacings: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.sizes)

    @property
    def h_max(self) -> float:
        return max(self.spacings)

    @property
    def h_min(self) -> float:
        return min(self.spacings)

    @property
    def cell_diameter(self) -> float:
        return float(np.sqrt(sum(h * h for h in self.spacings)))

    @property
    def extended_shape(self) -> tuple[int, ...]:
        return tuple(size + 2 for size in self.sizes)

    @property
    def interior_shape(self) -> tuple[int, ...]:
        return tuple(max(size - 2, 0) for size in self.sizes)

    @property
    def mesh_node_count(self) -> int:
        return int(np.prod(self.sizes))

    @property
    def interior_count(self) -> int:
        return int(np.prod(self.interior_shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    @property
    def interior_slices(self) -> tuple[slice, ...]:
        return tuple(slice(2, size) for size in self.sizes)

    @property
    def mesh_slices(self) -> tuple[slice, ...]:
        return tuple(slice(1, size + 1) for size in self.sizes)

    def shifted_interior_slices(self, offset: Sequence[int]) -> tuple[slice, ...]:
        return tuple(slice(2 + shift, size + shift) for size, shift in zip(self.sizes, offset))

    def in_extended_range(self, idx: MultiIndex) -> bool:
        return len(idx) == self.dim and all(0 <= alpha <= size + 1 for alpha, size in zip(idx, self.sizes))

    def axis_coordinates(self, axis: int) -> np.ndarray:
        """Coordinates of extended positions 0..J_i+1 along one axis."""
        lower = self.domain.lower[axis]
        spacing = self.spacings[axis]
        return np.array([lower + (alpha - 1) * spacing for alpha in range(self.sizes[axis] + 2)])

    @cached_property
    def coordinates(self) -> np.ndarray:
        """Node coordinates over the extended index box, shape ``(*extended_shape, d)``."""
        axes = [self.axis_coordinates(axis) for axis in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack(mesh, axis=-1)
        points.setflags(write=False)
        return points

    @cached_property
    def class_codes(self) -> np.ndarray:
        interior = np.zeros(self.extended_shape, dtype=bool)
        interior[self.interior_slices] = True
        mesh = np.zeros(self.extended_shape, dtype=bool)
        mesh[self.mesh_slices] = True
        boundary = mesh & ~interior

        near_interior = np.zeros(self.extended_shape, dtype=bool)
        ghost = np.zeros(self.extended_shape, dtype=bool)
        for axis in range(self.dim):
            for shift in (-1, 1):
                near_interior |= _shift_mask(interior, axis, shift)
            for shift in (-2, 2):
                ghost |= _shift_mask(interior, axis, shift)
        aux = boundary & near_interior
        ghost &= ~mesh

        codes = np.full(self.extended_shape, _CODE_OF[NodeClass.EXCLUDED_GHOST], dtype=np.int8)
        codes[ghost] = _CODE_OF[NodeClass.GHOST]
        codes[boundary] = _CODE_OF[NodeClass.BOUNDARY]
        codes[aux] = _CODE_OF[NodeClass.BOUNDARY_AUX]
        codes[interior] = _CODE_OF[NodeClass.INTERIOR]
        codes.setflags(write=False)
        return codes

    def class_mask(self, *node_classes: NodeClass) -> np.ndarray:
        wanted = [_CODE_OF[node_class] for node_class in node_classes]
        return np.isin(self.class_codes, wanted)

    @property
    def boundary_mask(self) -> np.ndarray:
        return self.class_mask(NodeClass.BOUNDARY, NodeClass.BOUNDARY_AUX)

    @property
    def interior_mask(self) -> np.ndarray:
        return self.class_mask(NodeClass.INTERIOR)

    def iter_indices(self, *node_classes: NodeClass) -> Iterator[MultiIndex]:
        mask = self.class_mask(*node_classes)
        for position in zip(*np.nonzero(mask)):
            yield tuple(int(alpha) for alpha in position)


def _shift_mask(mask: np.ndarray, axis: int, shift: int) -> np.ndarray:
    """Mask of nodes ``x`` such that ``x - shift * e_axis`` is set in ``mask``."""
    shifted = np.zeros_like(mask)
    length = mask.shape[axis]
    source = [slice(None)] * mask.ndim
    target = [slice(None)] * mask.ndim
    if shift >= 0:
        source[axis] = slice(0, length - shift)
        target[axis] = slice(shift, length)
    else:
        source[axis] = slice(-shift, length)
        target[axis] = slice(0, length + shift)
    shifted[tuple(target)] = mask[tuple(source)]
    return shifted


def build_grid(domain: DomainBox, sizes: Sequence[int]) -> GridSpec:
    sizes = tuple(sizes)
    if len(sizes) != domain.dim:
        raise GridError(f"Expected {domain.dim} grid sizes, got {len(sizes)}.")
    for axis, size in enumerate(sizes):
        if int(size) != size or size < 2:
            raise GridError(f"Grid size on axis {axis} must be an integer >= 2, got {size}.")

    sizes = tuple(int(size) for size in sizes)
    spacings = tuple(
        (high - low) / (size - 1) for low, high, size in zip(domain.lower, domain.upper, sizes)
    )
    return GridSpec(domain=domain, sizes=sizes, spacings=spacings)


def grid_size_for_h(h: float, extent: float, dim: int) -> int:
    """Mesh size J whose cells have diagonal ``h`` when all ``dim`` axes are refined alike.

    The published spacings are cell diagonals ``sqrt(sum h_i^2)``, so
    ``J = round(sqrt(dim) * extent / h) + 1``.
    """
    if h <= 0:
        raise GridError(f"Spacing must be positive, got {h}.")
    if dim < 1:
        raise GridError(f"Dimension must be at least 1, got {dim}.")
    return int(round(np.sqrt(dim) * extent / h)) + 1


def _check_index(grid: GridSpec, idx: MultiIndex) -> MultiIndex:
    idx = tuple(int(alpha) for alpha in idx)
    if not grid.in_extended_range(idx):
        raise GridIndexError(f"Multi-index {idx} outside the extended range of grid {grid.sizes}.")
    return idx


def classify(grid: GridSpec, idx: MultiIndex) -> NodeClass:
    idx = _check_index(grid, idx)
    return _CLASS_CODES[int(grid.class_codes[idx])]


def node_coord(grid: GridSpec, idx: MultiIndex) -> tuple[float, ...]:
    idx = _check_index(grid, idx)
    return tuple(
        low + (alpha - 1) * spacing
        for low, alpha, spacing in zip(grid.domain.lower, idx, grid.spacings)
    )


class GridFunction:
    """Real values over the extended index box; unset entries hold NaN."""

    def __init__(self, grid: GridSpec, values: np.ndarray | None = None):
        self.grid = grid
        if values is None:
            values = np.full(grid.extended_shape, np.nan)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != grid.extended_shape:
            raise GridError(f"Values of shape {values.shape} do not match extended grid {grid.extended_shape}.")
        self.values = values

    @classmethod
    def zeros(cls, grid: GridSpec) -> GridFunction:
        function = cls(grid)
        function.values[grid.mesh_slices] = 0.0
        return function

    @classmethod
    def from_function(cls, grid: GridSpec, fn: PointFunction, *, include_ghosts: bool = False) -> GridFunction:
        function = cls(grid)
        if include_ghosts:
            mask = ~grid.class_mask(NodeClass.EXCLUDED_GHOST)
            function.values[mask] = fn(grid.coordinates[mask])
        else:
            function.values[grid.mesh_slices] = fn(grid.coordinates[grid.mesh_slices])
        return function

    def copy(self) -> GridFunction:
        return GridFunction(self.grid, self.values.copy())

    @property
    def interior(self) -> np.ndarray:
        return self.values[self.grid.interior_slices]

    @property
    def mesh(self) -> np.ndarray:
        return self.values[self.grid.mesh_slices]

    def interior_vector(self) -> np.ndarray:
        return self.interior.reshape(-1).copy()

    def set_interior_vector(self, vector: np.ndarray) -> None:
        self.values[self.grid.interior_slices] = np.asarray(vector, dtype=np.float64).reshape(self.grid.interior_shape)

    def clear_ghosts(self) -> None:
        self.values[self.grid.class_mask(NodeClass.GHOST, NodeClass.EXCLUDED_GHOST)] = np.nan

    def value(self, idx: MultiIndex) -> float:
        idx = _check_index(self.grid, idx)
        node_class = classify(self.grid, idx)
        if node_class is NodeClass.EXCLUDED_GHOST:
            raise UnsetValueError(f"Node {idx} is an excluded ghost and carries no value.")
        value = float(self.values[idx])
        if np.isnan(value):
            raise UnsetValueError(f"Value at {node_class.value} node {idx} is unset.")
        return value

    def set_value(self, idx: MultiIndex, value: float) -> None:
        idx = _check_index(self.grid, idx)
        if classify(self.grid, idx) is NodeClass.EXCLUDED_GHOST:
            raise GridIndexError(f"Node {idx} is an excluded ghost and cannot hold a value.")
        self.values[idx] = value
