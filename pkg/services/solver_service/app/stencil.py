"""First- and second-order difference operators on grid functions.

Every operator is written once against a *sampler*: a callable returning the
grid-function value at ``idx + offset``. The pointwise sampler returns floats
for one node; the interior sampler returns arrays over every interior node at
once, so the batched forms used on the solve path evaluate the very same
expressions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Literal, Sequence

import numpy as np

from app.grid import GridFunction, GridIndexError, MultiIndex, UnsetValueError

logger = logging.getLogger(__name__)

Offset = tuple[int, ...]
Sample = float | np.ndarray
Sampler = Callable[[Offset], Sample]
Side = Literal["+", "-"]


class StencilDataError(RuntimeError):
    pass


class HessianFlavor(str, Enum):
    HAT = "hat"
    TILDE = "tilde"
    BAR = "bar"


class DiagonalDirection(str, Enum):
    XI = "xi"
    ETA = "eta"


@dataclass(frozen=True)
class DiscreteGradients:
    forward: np.ndarray
    backward: np.ndarray
    central: np.ndarray


@dataclass(frozen=True)
class DiscreteHessians:
    hat: np.ndarray
    tilde: np.ndarray
    bar: np.ndarray
    std: np.ndarray


def point_sampler(U: GridFunction, idx: MultiIndex) -> Sampler:
    idx = tuple(int(alpha) for alpha in idx)

    def at(offset: Offset) -> float:
        target = tuple(alpha + shift for alpha, shift in zip(idx, offset))
        try:
            return U.value(target)
        except (UnsetValueError, GridIndexError) as error:
            raise StencilDataError(f"Stencil at {idx} needs data at {target}: {error}") from error

    return at


def interior_sampler(U: GridFunction) -> Sampler:
    grid = U.grid

    def at(offset: Offset) -> np.ndarray:
        return U.values[grid.shifted_interior_slices(offset)]

    return at


def _step(dim: int, axis: int, shift: int, other_axis: int | None = None, other_shift: int = 0) -> Offset:
    offset = [0] * dim
    offset[axis] += shift
    if other_axis is not None:
        offset[other_axis] += other_shift
    return tuple(offset)


def sided(at: Sampler, spacings: Sequence[float], axis: int, side: Side) -> Sample:
    dim = len(spacings)
    h = spacings[axis]
    if side == "+":
        return (at(_step(dim, axis, 1)) - at(_step(dim, axis, 0))) / h
    if side == "-":
        return (at(_step(dim, axis, 0)) - at(_step(dim, axis, -1))) / h
    raise ValueError(f"Unknown side {side!r}; use '+' or '-'.")


def second(at: Sampler, spacings: Sequence[float], axis: int, width: int = 1) -> Sample:
    if width not in (1, 2):
        raise ValueError(f"Second difference width must be 1 or 2 steps, got {width}.")
    dim = len(spacings)
    span = width * spacings[axis]
    return (at(_step(dim, axis, width)) - 2.0 * at(_step(dim, axis, 0)) + at(_step(dim, axis, -width))) / (span * span)


def tilde_diagonal(at: Sampler, spacings: Sequence[float], axis: int) -> Sample:
    """``(delta+ delta+ + delta- delta-) / 2`` along one axis: the five-point wide operator."""
    dim = len(spacings)
    h = spacings[axis]
    return (
        at(_step(dim, axis, 2))
        - 2.0 * at(_step(dim, axis, 1))
        + 2.0 * at(_step(dim, axis, 0))
        - 2.0 * at(_step(dim, axis, -1))
        + at(_step(dim, axis, -2))
    ) / (2.0 * h * h)


def mixed(at: Sampler, spacings: Sequence[float], axes: tuple[int, int], flavor: HessianFlavor) -> Sample:
    i, j = axes
    if i == j:
        raise ValueError("Mixed differences need two distinct axes; use second() on the diagonal.")
    dim = len(spacings)
    hi, hj = spacings[i], spacings[j]
    center = at(_step(dim, i, 0))
    flavor = HessianFlavor(flavor)

    if flavor is HessianFlavor.HAT:
        return (
            -(at(_step(dim, i, 1, j, -1)) - at(_step(dim, i, 1)) - (at(_step(dim, j, -1)) - center)) / (2.0 * hi * hj)
            - (at(_step(dim, i, -1, j, 1)) - at(_step(dim, i, -1)) - (at(_step(dim, j, 1)) - center)) / (2.0 * hi * hj)
        )
    if flavor is HessianFlavor.TILDE:
        return (
            (at(_step(dim, i, 1, j, 1)) - at(_step(dim, i, 1)) - (at(_step(dim, j, 1)) - center)) / (2.0 * hi * hj)
            + (at(_step(dim, i, -1, j, -1)) - at(_step(dim, i, -1)) - (at(_step(dim, j, -1)) - center)) / (2.0 * hi * hj)
        )
    return (
        (at(_step(dim, i, 1, j, 1)) + at(_step(dim, i, -1, j, -1))) / (4.0 * hi * hj)
        - (at(_step(dim, i, -1, j, 1)) + at(_step(dim, i, 1, j, -1))) / (4.0 * hi * hj)
    )


def diagonal(at: Sampler, spacings: Sequence[float], axes: tuple[int, int], direction: DiagonalDirection) -> Sample:
    i, j = axes
    if i == j:
        raise ValueError("Diagonal differences need two distinct axes.")
    dim = len(spacings)
    hi, hj = spacings[i], spacings[j]
    center = at(_step(dim, i, 0))
    if DiagonalDirection(direction) is DiagonalDirection.XI:
        return (at(_step(dim, i, -1, j, 1)) - 2.0 * center + at(_step(dim, i, 1, j, -1))) / (hi * hi + hj * hj)
    return (at(_step(dim, i, 1, j, 1)) - 2.0 * center + at(_step(dim, i, -1, j, -1))) / (hi * hi + hj * hj)


def _matrix(entries: list[list[Sample]]) -> np.ndarray:
    rows = [np.stack(np.broadcast_arrays(*row), axis=-1) for row in entries]
    return np.stack(rows, axis=-2)


def assemble_gradients(at: Sampler, spacings: Sequence[float]) -> DiscreteGradients:
    dim = len(spacings)
    forward = np.stack(np.broadcast_arrays(*[sided(at, spacings, axis, "+") for axis in range(dim)]), axis=-1)
    backward = np.stack(np.broadcast_arrays(*[sided(at, spacings, axis, "-") for axis in range(dim)]), axis=-1)
    return DiscreteGradients(forward=forward, backward=backward, central=(forward + backward) / 2.0)


def assemble_hessians(at: Sampler, spacings: Sequence[float]) -> DiscreteHessians:
    dim = len(spacings)
    hat: list[list[Sample]] = [[0.0] * dim for _ in range(dim)]
    tilde: list[list[Sample]] = [[0.0] * dim for _ in range(dim)]
    bar: list[list[Sample]] = [[0.0] * dim for _ in range(dim)]

    for i in range(dim):
        hat[i][i] = second(at, spacings, i, width=1)
        tilde[i][i] = tilde_diagonal(at, spacings, i)
        bar[i][i] = second(at, spacings, i, width=2)
        for j in range(i + 1, dim):
            for target, flavor in ((hat, HessianFlavor.HAT), (tilde, HessianFlavor.TILDE), (bar, HessianFlavor.BAR)):
                entry = mixed(at, spacings, (i, j), flavor)
                target[i][j] = entry
                target[j][i] = entry

    std = [[hat[i][j] if i == j else bar[i][j] for j in range(dim)] for i in range(dim)]
    return DiscreteHessians(hat=_matrix(hat), tilde=_matrix(tilde), bar=_matrix(bar), std=_matrix(std))


def _require_finite(result: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(result)):
        raise StencilDataError(f"{what} touched unset grid data; fill ghost values first.")
    return result


# Pointwise operators


def diff_sided(U: GridFunction, idx: MultiIndex, axis: int, side: Side) -> float:
    return float(sided(point_sampler(U, idx), U.grid.spacings, axis, side))


def second_diff(U: GridFunction, idx: MultiIndex, axis: int, width: int = 1) -> float:
    return float(second(point_sampler(U, idx), U.grid.spacings, axis, width))


def mixed_second(U: GridFunction, idx: MultiIndex, axes: tuple[int, int], flavor: HessianFlavor) -> float:
    return float(mixed(point_sampler(U, idx), U.grid.spacings, axes, flavor))


def diag_second(U: GridFunction, idx: MultiIndex, axes: tuple[int, int], direction: DiagonalDirection) -> float:
    return float(diagonal(point_sampler(U, idx), U.grid.spacings, axes, direction))


def gradients(U: GridFunction, idx: MultiIndex) -> DiscreteGradients:
    return assemble_gradients(point_sampler(U, idx), U.grid.spacings)


def hessians(U: GridFunction, idx: MultiIndex) -> DiscreteHessians:
    return assemble_hessians(point_sampler(U, idx), U.grid.spacings)


def moment_difference(U: GridFunction, idx: MultiIndex) -> np.ndarray:
    result = hessians(U, idx)
    return result.tilde - result.hat


# Interior-batched operators: arrays of shape (*interior_shape, ...)


def interior_second_diff(U: GridFunction, axis: int, width: int = 1) -> np.ndarray:
    return _require_finite(second(interior_sampler(U), U.grid.spacings, axis, width), "Second difference")


def interior_gradients(U: GridFunction) -> DiscreteGradients:
    result = assemble_gradients(interior_sampler(U), U.grid.spacings)
    _require_finite(result.forward, "Forward gradient")
    _require_finite(result.backward, "Backward gradient")
    return result


def interior_hessians(U: GridFunction) -> DiscreteHessians:
    result = assemble_hessians(interior_sampler(U), U.grid.spacings)
    _require_finite(result.tilde, "Wide Hessian")
    _require_finite(result.hat, "Narrow Hessian")
    return result


def interior_moment_difference(U: GridFunction) -> np.ndarray:
    result = interior_hessians(U)
    return result.tilde - result.hat
