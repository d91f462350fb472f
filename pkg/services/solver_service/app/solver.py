"""Pseudo-time Euler fixed-point iteration and damped Newton for the scheme residual."""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from app.grid import GridFunction, GridSpec
from app.models import SolverConfig
from app.pde_problems import PdeOperator, ScalarField
from app.scheme import SchemeAssembler, SchemeParams
from app.solver_config import get_solver_defaults

logger = logging.getLogger(__name__)

JACOBIAN_COLOR_PERIOD = 5
MIN_LINE_SEARCH_STEP = 2.0**-12


class SolverError(RuntimeError):
    pass


class DivergenceError(SolverError):
    pass


class NonConvergenceError(SolverError):
    def __init__(self, message: str, report: SolveReport):
        super().__init__(message)
        self.report = report


@dataclass
class SolveReport:
    solution: GridFunction
    iterations: int
    final_residual: float
    final_update_norm: float
    contraction_estimates: list[float] = field(default_factory=list)
    converged: bool = False
    method: str = "euler"
    rho: float | None = None
    message: str | None = None


def _residual_norms(R: np.ndarray) -> tuple[float, float]:
    if not np.all(np.isfinite(R)):
        raise DivergenceError("Scheme residual became non-finite.")
    if R.size == 0:
        return 0.0, 0.0
    return float(np.max(np.abs(R))), float(np.linalg.norm(R))


def _initial(assembler: SchemeAssembler, U0: GridFunction) -> GridFunction:
    U = U0.copy()
    interior = U.interior
    interior[np.isnan(interior)] = 0.0
    return assembler.prepare(U)


def auto_rho(params: SchemeParams, op: PdeOperator, grid: GridSpec) -> float:
    """Initial pseudo time-step from the Lipschitz bounds of F and the moment/viscosity norms."""
    data = op.ellipticity
    h = grid.spacings
    hessian_part = sum(data.K_ss * 4.0 / (hi * hi) for hi in h)
    moment_part = params.gamma * sum(8.0 / (hi * hj) for hi in h for hj in h)
    viscosity_part = params.beta * sum(2.0 / hi for hi in h)
    scale = data.K0 + hessian_part + moment_part + viscosity_part
    if scale <= 0:
        return 1.0
    return 1.0 / scale


def euler_step(U: GridFunction, rho: float, params: SchemeParams, op: PdeOperator, g: ScalarField) -> GridFunction:
    """``U - rho * F_hat[U]`` on interior nodes, ``g`` on the boundary, ghosts re-closed."""
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}.")
    assembler = SchemeAssembler(U.grid, params, op, g)
    return _euler_update(assembler, assembler.prepare(U.copy()), rho)[0]


def _euler_update(assembler: SchemeAssembler, U: GridFunction, rho: float) -> tuple[GridFunction, np.ndarray]:
    R = assembler.interior_residual(U)
    _residual_norms(R)
    updated = U.copy()
    updated.values[assembler.grid.interior_slices] -= rho * R
    return assembler.prepare(updated), R


def solve_fixed_point(
    U0: GridFunction,
    cfg: SolverConfig,
    params: SchemeParams,
    op: PdeOperator,
    g: ScalarField,
) -> SolveReport:
    assembler = SchemeAssembler(U0.grid, params, op, g)
    return _fixed_point(assembler, _initial(assembler, U0), cfg)


def _fixed_point(assembler: SchemeAssembler, U: GridFunction, cfg: SolverConfig, iterations_before: int = 0) -> SolveReport:
    grid = assembler.grid
    automatic = cfg.rho == "auto"
    rho = auto_rho(assembler.params, assembler.op, grid) if automatic else float(cfg.rho)
    progress_every = get_solver_defaults().progress_log_every
    logger.info("Euler solve on grid %s with rho=%.3e (auto=%s)", grid.sizes, rho, automatic)

    R = assembler.interior_residual(U)
    residual_max, _ = _residual_norms(R)
    ratios: list[float] = []
    previous_norm: float | None = None
    update_norm = float("inf")
    halvings = 0
    expanding = 0
    iterations = 0

    while residual_max > cfg.tol_residual and iterations < cfg.max_iters:
        step = rho * R
        updated = U.copy()
        updated.values[grid.interior_slices] -= step
        assembler.prepare(updated)
        update_norm = float(np.linalg.norm(step))
        iterations += 1

        if previous_norm:
            ratio = update_norm / previous_norm
            ratios.append(ratio)
            if ratio > 1.0:
                if automatic and halvings < cfg.max_rho_halvings:
                    rho /= 2.0
                    halvings += 1
                    logger.warning("Update ratio %.4f > 1 at iteration %s; halving rho to %.3e", ratio, iterations, rho)
                else:
                    expanding += 1
            else:
                expanding = 0
        previous_norm = update_norm

        U = updated
        R = assembler.interior_residual(U)
        residual_max, _ = _residual_norms(R)

        if expanding >= cfg.divergence_window:
            report = _report(U, iterations_before + iterations, residual_max, update_norm, ratios, cfg, "euler", rho)
            raise NonConvergenceError(
                f"Update norm grew for {expanding} consecutive iterations with rho={rho:.3e}.", report
            )
        if iterations % progress_every == 0:
            logger.debug("Euler iteration %s: residual=%.3e update=%.3e", iterations, residual_max, update_norm)
        if update_norm <= cfg.tol_update:
            break

    report = _report(U, iterations_before + iterations, residual_max, update_norm, ratios, cfg, "euler", rho)
    logger.info(
        "Euler solve finished after %s iterations: residual=%.3e converged=%s",
        report.iterations,
        report.final_residual,
        report.converged,
    )
    return report


def _stop_message(residual_max: float, update_norm: float, cfg: SolverConfig) -> str | None:
    if residual_max <= cfg.tol_residual:
        return None
    if update_norm <= cfg.tol_update:
        return f"update stalled at residual {residual_max:.3e}"
    return f"iteration cap reached at residual {residual_max:.3e}"


def _report(U, iterations, residual_max, update_norm, ratios, cfg, method, rho=None) -> SolveReport:
    return SolveReport(
        solution=U,
        iterations=iterations,
        final_residual=residual_max,
        final_update_norm=update_norm,
        contraction_estimates=ratios,
        converged=residual_max <= cfg.tol_residual,
        method=method,
        rho=rho,
        message=_stop_message(residual_max, update_norm, cfg),
    )


def assemble_jacobian(assembler: SchemeAssembler, U: GridFunction, R: np.ndarray, epsilon: float | None = None) -> csr_matrix:
    """Sparse Jacobian of the interior residual by colored differences.

    Every residual row depends on unknowns within two steps per axis, ghosts
    included, so nodes sharing ``(alpha - 2) mod 5`` on every axis are perturbed
    together: ``5**d`` residual evaluations regardless of the grid size.

    For control-set operators the control is frozen at its current minimizer
    first. The frozen residual is affine, so its differences are exact and give
    the semismooth (policy iteration) Newton matrix instead of a difference
    quotient straddling control switches.
    """
    grid = assembler.grid
    shape = grid.interior_shape
    count = grid.interior_count
    evaluate = assembler.linearized(U)
    if evaluate is not None:
        base = assembler.interior_residual(U, evaluate)
        if epsilon is None:
            epsilon = 1.0
    else:
        base = R
        if epsilon is None:
            epsilon = 1e-7 * max(1.0, float(np.max(np.abs(U.interior))) if count else 1.0)

    positions = np.indices(shape)
    node_ids = np.arange(count).reshape(shape)
    rows, cols, data = [], [], []

    for color in itertools.product(range(JACOBIAN_COLOR_PERIOD), repeat=grid.dim):
        color_array = np.array(color).reshape((grid.dim,) + (1,) * grid.dim)
        in_color = np.all(positions % JACOBIAN_COLOR_PERIOD == color_array, axis=0)
        if not in_color.any():
            continue

        perturbed = U.copy()
        perturbed.values[grid.interior_slices][in_color] += epsilon
        assembler.prepare(perturbed)
        derivative = (assembler.interior_residual(perturbed, evaluate) - base) / epsilon

        delta = (positions - color_array + 2) % JACOBIAN_COLOR_PERIOD - 2
        column_positions = positions - delta
        valid = np.all((column_positions >= 0) & (column_positions < np.array(shape).reshape(color_array.shape)), axis=0)
        keep = valid & (derivative != 0.0)
        rows.append(node_ids[keep])
        cols.append(np.ravel_multi_index(tuple(column_positions[:, keep]), shape))
        data.append(derivative[keep])

    if not rows:
        return csr_matrix((count, count))
    jacobian = coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(count, count))
    return jacobian.tocsr()


def _newton_direction(jacobian: csr_matrix, R: np.ndarray) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("error", MatrixRankWarning)
        try:
            direction = spsolve(jacobian.tocsc(), -R.reshape(-1))
        except (MatrixRankWarning, RuntimeError, ValueError) as error:
            raise SolverError(f"Jacobian solve failed: {error}") from error
    if not np.all(np.isfinite(direction)):
        raise SolverError("Jacobian solve produced non-finite values.")
    return np.asarray(direction).reshape(R.shape)


def _trial(assembler: SchemeAssembler, U: GridFunction, direction: np.ndarray, step: float) -> tuple[GridFunction, np.ndarray]:
    trial = U.copy()
    trial.values[assembler.grid.interior_slices] += step * direction
    assembler.prepare(trial)
    return trial, assembler.interior_residual(trial)


def _line_search(
    assembler: SchemeAssembler,
    U: GridFunction,
    direction: np.ndarray,
    residual_l2: float,
    damping: float,
    policy_step: bool,
) -> tuple[float, GridFunction, np.ndarray]:
    """Halve the step until the l2 residual decreases.

    With a frozen-control Newton matrix the full step solves the linear problem
    of the current policy, so it is taken when no shorter step decreases the
    residual.
    """
    step = damping
    while step >= MIN_LINE_SEARCH_STEP:
        trial, trial_R = _trial(assembler, U, direction, step)
        if np.all(np.isfinite(trial_R)) and np.linalg.norm(trial_R) < residual_l2:
            return step, trial, trial_R
        step /= 2.0
    if policy_step:
        trial, trial_R = _trial(assembler, U, direction, 1.0)
        if np.all(np.isfinite(trial_R)):
            logger.debug("No residual decrease along the Newton direction; taking the full policy step")
            return 1.0, trial, trial_R
    raise SolverError("Line search failed to reduce the residual.")


def solve_newton(
    U0: GridFunction,
    cfg: SolverConfig,
    params: SchemeParams,
    op: PdeOperator,
    g: ScalarField,
) -> SolveReport:
    """Semismooth Newton on the interior residual.

    Iterates until the residual tolerance or the Newton iteration cap. A small
    update alone does not stop the iteration.
    """
    assembler = SchemeAssembler(U0.grid, params, op, g)
    U = _initial(assembler, U0)
    grid = U.grid
    fallback = cfg.method == "newton_with_euler_fallback"
    policy_step = assembler.active_policy(U) is not None
    logger.info("Newton solve on grid %s (fallback=%s, damping=%s)", grid.sizes, fallback, cfg.damping)

    R = assembler.interior_residual(U)
    residual_max, residual_l2 = _residual_norms(R)
    ratios: list[float] = []
    previous_norm: float | None = None
    update_norm = float("inf")
    iterations = 0

    while residual_max > cfg.tol_residual and iterations < cfg.newton_max_iters:
        try:
            direction = _newton_direction(assemble_jacobian(assembler, U, R), R)
            step, trial, trial_R = _line_search(assembler, U, direction, residual_l2, cfg.damping, policy_step)
        except SolverError as error:
            if not fallback:
                raise
            logger.warning("Newton failed on grid %s (%s); continuing with Euler iteration", grid.sizes, error)
            report = _fixed_point(assembler, U, cfg, iterations_before=iterations)
            return replace(report, method="newton_with_euler_fallback")

        iterations += 1
        update_norm = step * float(np.linalg.norm(direction))
        if previous_norm:
            ratios.append(update_norm / previous_norm)
        previous_norm = update_norm
        U, R = trial, trial_R
        residual_max, residual_l2 = _residual_norms(R)
        logger.debug(
            "Newton iteration %s: residual=%.3e step=%.3g update=%.3e", iterations, residual_max, step, update_norm
        )
        if update_norm <= cfg.tol_update and residual_max > cfg.tol_residual:
            logger.debug("Newton update stalled at residual %.3e; continuing", residual_max)

    report = _report(U, iterations, residual_max, update_norm, ratios, cfg, cfg.method)
    logger.info(
        "Newton solve finished after %s iterations: residual=%.3e converged=%s",
        report.iterations,
        report.final_residual,
        report.converged,
    )
    return report


def solve(
    U0: GridFunction,
    cfg: SolverConfig,
    params: SchemeParams,
    op: PdeOperator,
    g: ScalarField,
) -> SolveReport:
    params.check_thresholds(op.ellipticity)
    if cfg.method == "euler":
        return solve_fixed_point(U0, cfg, params, op, g)
    return solve_newton(U0, cfg, params, op, g)
