"""Numerical operator with numerical moment and numerical viscosity.

``F_hat = F(D_bar^2 U, grad_h U, U, x) + gamma * sum_ij (D_tilde^2 U - D_hat^2 U)_ij
- beta * sum_i h_i delta^2_i U``, evaluated at interior nodes once the ghost
values have been closed by the auxiliary condition ``Delta_h U = 0`` on the
boundary nodes next to the interior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from app.grid import GridFunction, GridSpec, MultiIndex, NodeClass, classify, node_coord
from app.pde_problems import BoundControls, BoundEvaluate, EllipticityData, PdeOperator, ScalarField
from app.stencil import (
    gradients,
    hessians,
    interior_gradients,
    interior_hessians,
    interior_second_diff,
    interior_moment_difference,
    second_diff,
)

logger = logging.getLogger(__name__)


class SchemeError(RuntimeError):
    pass


class GhostClosureError(SchemeError):
    pass


@dataclass(frozen=True)
class SchemeParams:
    """Constant moment coefficient ``gamma`` (matrix ``gamma * 1``) and viscosity ``beta``."""

    gamma: float = 0.0
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.gamma < 0 or self.beta < 0:
            raise ValueError(f"Scheme coefficients must be non-negative, got gamma={self.gamma}, beta={self.beta}.")

    @classmethod
    def for_operator(cls, op: PdeOperator, gamma: float, beta: float = 0.0) -> SchemeParams:
        params = cls(gamma=gamma, beta=beta)
        params.check_thresholds(op.ellipticity)
        return params

    def check_thresholds(self, ellipticity: EllipticityData) -> bool:
        ok = True
        if self.gamma < ellipticity.K_ss / 2:
            logger.warning(
                "gamma=%s is below K_ss/2=%s; generalized monotonicity is not guaranteed", self.gamma, ellipticity.K_ss / 2
            )
            ok = False
        if self.beta < ellipticity.K_s / 2:
            logger.warning(
                "beta=%s is below K_s/2=%s; generalized monotonicity is not guaranteed", self.beta, ellipticity.K_s / 2
            )
            ok = False
        return ok


@dataclass(frozen=True)
class Residual:
    values: GridFunction
    max_abs: float

    @property
    def interior(self) -> np.ndarray:
        return self.values.interior


def _face(grid: GridSpec, axis: int, position: int, offset: tuple[int, ...] | None = None) -> tuple:
    slices = list(grid.shifted_interior_slices(offset or (0,) * grid.dim))
    slices[axis] = position
    return tuple(slices)


def _fill_ghosts_inplace(U: GridFunction) -> None:
    grid = U.grid
    values = U.values
    for axis, size in enumerate(grid.sizes):
        if size < 3:
            continue
        h2 = grid.spacings[axis] ** 2
        for ghost_pos, aux_pos, inner_pos in ((0, 1, 2), (size + 1, size, size - 1)):
            aux = values[_face(grid, axis, aux_pos)]
            tangential = np.zeros_like(aux)
            for other in range(grid.dim):
                if other == axis:
                    continue
                plus = [0] * grid.dim
                plus[other] = 1
                minus = [0] * grid.dim
                minus[other] = -1
                tangential += (
                    values[_face(grid, axis, aux_pos, tuple(plus))] - 2.0 * aux + values[_face(grid, axis, aux_pos, tuple(minus))]
                ) / grid.spacings[other] ** 2
            ghost = -values[_face(grid, axis, inner_pos)] + 2.0 * aux - h2 * tangential
            if not np.all(np.isfinite(ghost)):
                raise GhostClosureError(
                    f"Auxiliary closure on axis {axis} at position {aux_pos} needs unset mesh values."
                )
            values[_face(grid, axis, ghost_pos)] = ghost


def ghost_fill(U: GridFunction) -> GridFunction:
    """Copy of ``U`` with every ghost value solved from ``Delta_h U = 0`` at its auxiliary node."""
    filled = U.copy()
    filled.clear_ghosts()
    _fill_ghosts_inplace(filled)
    return filled


def impose_boundary(U: GridFunction, g: ScalarField) -> GridFunction:
    mask = U.grid.boundary_mask
    U.values[mask] = g(U.grid.coordinates[mask])
    return U


def hat_f_slots(
    op: PdeOperator | BoundEvaluate,
    params: SchemeParams,
    hat: np.ndarray,
    tilde: np.ndarray,
    grad_plus: np.ndarray,
    grad_minus: np.ndarray,
    u,
    x: np.ndarray | None = None,
):
    """Independent-slot form: every Hessian and gradient slot is supplied explicitly."""
    M = (hat + tilde) / 2.0
    p = (grad_plus + grad_minus) / 2.0
    if isinstance(op, PdeOperator):
        value = op.evaluate(M, p, u, x)
    else:
        value = op(M, p, u)
    moment = np.sum(tilde - hat, axis=(-2, -1))
    viscosity = np.sum(grad_plus - grad_minus, axis=-1)
    return value + params.gamma * moment - params.beta * viscosity


def hat_f_at(U: GridFunction, idx: MultiIndex, params: SchemeParams, op: PdeOperator) -> float:
    """Physical form at one interior node; ghosts must already be filled."""
    if classify(U.grid, idx) is not NodeClass.INTERIOR:
        raise SchemeError(f"Node {tuple(idx)} is not an interior node.")
    x = np.array(node_coord(U.grid, idx))
    H = hessians(U, idx)
    G = gradients(U, idx)
    value = op.evaluate(H.bar, G.central, U.value(idx), x)
    viscosity = sum(U.grid.spacings[axis] * second_diff(U, idx, axis) for axis in range(U.grid.dim))
    return float(value + params.gamma * np.sum(H.tilde - H.hat) - params.beta * viscosity)


class SchemeAssembler:
    """Residual assembly over all interior nodes for one grid, operator and boundary datum.

    Coefficients and boundary values are computed once; ``prepare`` enforces the
    boundary data and closes the ghosts in place, ``interior_residual`` evaluates
    ``F_hat`` on a prepared grid function.
    """

    def __init__(self, grid: GridSpec, params: SchemeParams, op: PdeOperator, g: ScalarField | None = None):
        self.grid = grid
        self.params = params
        self.op = op
        self.points = grid.coordinates[grid.interior_slices]
        self._bound = op.at_points(self.points)
        self._boundary_mask = grid.boundary_mask
        self._boundary_values = None if g is None else np.asarray(g(grid.coordinates[self._boundary_mask]), dtype=np.float64)

    def prepare(self, U: GridFunction) -> GridFunction:
        if self._boundary_values is not None:
            U.values[self._boundary_mask] = self._boundary_values
        _fill_ghosts_inplace(U)
        return U

    def interior_residual(self, U: GridFunction, evaluate: BoundEvaluate | None = None) -> np.ndarray:
        H = interior_hessians(U)
        G = interior_gradients(U)
        value = (evaluate or self._bound)(H.bar, G.central, U.interior)
        result = value + self.params.gamma * np.sum(H.tilde - H.hat, axis=(-2, -1))
        if self.params.beta:
            viscosity = sum(
                self.grid.spacings[axis] * interior_second_diff(U, axis) for axis in range(self.grid.dim)
            )
            result = result - self.params.beta * viscosity
        return result

    def active_policy(self, U: GridFunction) -> np.ndarray | None:
        """Index of the minimizing control at every interior node, ``None`` without a control set."""
        if not isinstance(self._bound, BoundControls):
            return None
        H = interior_hessians(U)
        G = interior_gradients(U)
        return self._bound.evaluate(H.bar, G.central, U.interior)[1]

    def linearized(self, U: GridFunction) -> BoundEvaluate | None:
        """Evaluator with the control frozen at its current minimizer; the residual it gives is affine in ``U``."""
        policy = self.active_policy(U)
        if policy is None:
            return None
        return self._bound.with_policy(policy)

    def residual(self, U: GridFunction) -> Residual:
        prepared = self.prepare(U.copy())
        values = GridFunction(self.grid)
        values.values[self.grid.interior_slices] = self.interior_residual(prepared)
        interior = values.interior
        max_abs = float(np.max(np.abs(interior))) if interior.size else 0.0
        return Residual(values=values, max_abs=max_abs)


def residual(U: GridFunction, params: SchemeParams, op: PdeOperator, g: ScalarField | None = None) -> Residual:
    """``F_hat`` at every interior node after enforcing ``g`` on the boundary and closing ghosts."""
    return SchemeAssembler(U.grid, params, op, g).residual(U)


def moment_energy(U: GridFunction) -> float:
    """``sum_alpha U_alpha * sum_ij (D_tilde^2 U - D_hat^2 U)_ij`` over interior nodes, ghosts closed first."""
    filled = ghost_fill(U)
    moment = np.sum(interior_moment_difference(filled), axis=(-2, -1))
    return float(np.sum(filled.interior * moment))


class SlotKind(str, Enum):
    HAT = "hat"
    TILDE = "tilde"
    GRAD_PLUS = "grad_plus"
    GRAD_MINUS = "grad_minus"
    U = "u"


@dataclass(frozen=True)
class ProbeSlot:
    kind: SlotKind
    i: int | None = None
    j: int | None = None

    def __post_init__(self) -> None:
        kind = SlotKind(self.kind)
        if kind in (SlotKind.HAT, SlotKind.TILDE) and (self.i is None or self.j is None):
            raise ValueError(f"Slot {kind.value} needs both matrix indices.")
        if kind in (SlotKind.GRAD_PLUS, SlotKind.GRAD_MINUS) and self.i is None:
            raise ValueError(f"Slot {kind.value} needs a component index.")

    @property
    def expected_sign(self) -> int:
        """-1 where F_hat must be nonincreasing, +1 where it must be nondecreasing."""
        return -1 if SlotKind(self.kind) in (SlotKind.HAT, SlotKind.GRAD_PLUS) else 1


def monotonicity_probe(
    U: GridFunction,
    idx: MultiIndex,
    params: SchemeParams,
    op: PdeOperator,
    slot: ProbeSlot,
    epsilon: float = 1e-6,
) -> float:
    """``F_hat(slots + epsilon e_slot) - F_hat(slots)`` in the independent-slot form at ``idx``."""
    if epsilon <= 0:
        raise ValueError(f"Probe epsilon must be positive, got {epsilon}.")
    if not isinstance(slot, ProbeSlot):
        raise ValueError(f"Invalid probe slot {slot!r}.")
    filled = ghost_fill(U)
    H = hessians(filled, idx)
    G = gradients(filled, idx)
    slots = {
        SlotKind.HAT: H.hat.copy(),
        SlotKind.TILDE: H.tilde.copy(),
        SlotKind.GRAD_PLUS: G.forward.copy(),
        SlotKind.GRAD_MINUS: G.backward.copy(),
        SlotKind.U: np.array(filled.value(idx)),
    }
    x = np.array(node_coord(U.grid, idx))
    base = hat_f_slots(op, params, slots[SlotKind.HAT], slots[SlotKind.TILDE],
                       slots[SlotKind.GRAD_PLUS], slots[SlotKind.GRAD_MINUS], slots[SlotKind.U], x)

    kind = SlotKind(slot.kind)
    if kind in (SlotKind.HAT, SlotKind.TILDE):
        slots[kind][slot.i, slot.j] += epsilon
    elif kind in (SlotKind.GRAD_PLUS, SlotKind.GRAD_MINUS):
        slots[kind][slot.i] += epsilon
    else:
        slots[kind] = slots[kind] + epsilon
    perturbed = hat_f_slots(op, params, slots[SlotKind.HAT], slots[SlotKind.TILDE],
                            slots[SlotKind.GRAD_PLUS], slots[SlotKind.GRAD_MINUS], slots[SlotKind.U], x)
    return float(perturbed - base)


def all_probe_slots(dim: int) -> list[ProbeSlot]:
    slots = [ProbeSlot(SlotKind.U)]
    for i in range(dim):
        slots.append(ProbeSlot(SlotKind.GRAD_PLUS, i))
        slots.append(ProbeSlot(SlotKind.GRAD_MINUS, i))
        for j in range(dim):
            slots.append(ProbeSlot(SlotKind.HAT, i, j))
            slots.append(ProbeSlot(SlotKind.TILDE, i, j))
    return slots
