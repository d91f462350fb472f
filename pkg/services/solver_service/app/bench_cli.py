"""Convergence studies against manufactured solutions: error tables and observed orders.

Usage:
    hjb-bench --problem test1 --gamma 4
    hjb-bench --problem test2 --grids 12,17,23 --nphi 8 --nrot 16 --format markdown
    hjb-bench --config services/solver_service/test_cases/test1_desk.json --out test1.csv
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from pydantic import ValidationError

from app.grid import GridFunction, GridSpec, build_grid, grid_size_for_h
from app.logging_setup import configure_solver_logging
from app.models import ConvergenceReport, ConvergenceRow, RunConfig
from app.pde_problems import PROBLEM_NAMES, ManufacturedProblem, ProblemError, ScalarField, get_problem
from app.scheme import SchemeParams, ghost_fill
from app.solver import NonConvergenceError, SolverError, solve
from app.solver_config import get_solver_defaults
from app.stencil import interior_second_diff
from app.table_formats import SUPPORTED_FORMATS, render, render_csv, render_markdown

logger = logging.getLogger(__name__)

# Mesh spacings of the published error tables, coarse to fine.
PUBLISHED_SPACINGS: dict[str, tuple[float, ...]] = {
    "test1": (3.63e-02, 2.40e-02, 1.79e-02, 1.19e-02, 8.89e-03, 7.11e-03),
    "test2": (9.43e-02, 6.15e-02, 4.56e-02, 3.63e-02, 2.89e-02),
    "test3": (6.15e-02, 4.56e-02, 3.63e-02, 2.89e-02, 2.24e-02, 1.43e-02),
    "test3_infinity_laplacian": (6.15e-02, 4.56e-02, 3.63e-02, 2.89e-02, 2.24e-02, 1.43e-02),
}


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolutionNorms:
    linf: float
    weighted_l2: float
    h2_diag: tuple[float, ...]


def compute_order(e_coarse: float, e_fine: float, h_coarse: float, h_fine: float) -> float:
    """Observed order ``ln(e_coarse / e_fine) / ln(h_coarse / h_fine)``."""
    if min(e_coarse, e_fine, h_coarse, h_fine) <= 0:
        raise ValueError("Errors and spacings must be positive to compute an order.")
    if h_coarse == h_fine:
        raise ValueError("Spacings of the two grids must differ to compute an order.")
    return math.log(e_coarse / e_fine) / math.log(h_coarse / h_fine)


def norms(U: GridFunction, u_ex: ScalarField | None, grid: GridSpec) -> SolutionNorms:
    """Nodal max error over all mesh nodes, plus the weighted l2 and discrete H2 stability quantities of U."""
    mesh = U.mesh
    if u_ex is None:
        error = np.abs(mesh)
    else:
        error = np.abs(mesh - u_ex(grid.coordinates[grid.mesh_slices]))
    weight = math.sqrt(grid.cell_volume)
    filled = ghost_fill(U)
    h2_diag = tuple(
        weight * float(np.linalg.norm(interior_second_diff(filled, axis, width=2))) for axis in range(grid.dim)
    )
    return SolutionNorms(
        linf=float(np.max(error)),
        weighted_l2=weight * float(np.linalg.norm(U.interior)),
        h2_diag=h2_diag,
    )


def preset_grid_sizes(problem: ManufacturedProblem) -> list[tuple[int, ...]]:
    spacings = PUBLISHED_SPACINGS.get(problem.name)
    if spacings is None:
        raise ProblemError(f"No preset grids for problem {problem.name!r}.")
    dim = problem.domain.dim
    return [tuple(grid_size_for_h(h, extent, dim) for extent in problem.domain.extents) for h in spacings]


def resolve_grid_sizes(cfg: RunConfig, problem: ManufacturedProblem) -> list[tuple[int, ...]]:
    limit = get_solver_defaults().desk_grid_limit
    if cfg.grid_sizes is None:
        sizes = preset_grid_sizes(problem)
        if cfg.finest_unlock:
            return sizes
        kept = [grid for grid in sizes if max(grid) <= limit]
        if len(kept) < len(sizes):
            logger.info("Skipping %s preset grids above the desk limit J=%s", len(sizes) - len(kept), limit)
        return kept

    sizes = [tuple(grid) * (problem.domain.dim if len(grid) == 1 else 1) for grid in cfg.grid_sizes]
    for grid in sizes:
        if len(grid) != problem.domain.dim:
            raise ValueError(f"Grid {grid} does not match the {problem.domain.dim}-dimensional domain.")
        if max(grid) > limit and not cfg.finest_unlock:
            raise ValueError(f"Grid {grid} exceeds the desk limit J={limit}; pass finest_unlock to run it.")
    return sizes


def solve_row(cfg: RunConfig, sizes: tuple[int, ...], problem: ManufacturedProblem | None = None) -> ConvergenceRow:
    if problem is None:
        problem = get_problem(cfg.problem, cfg.n_phi, cfg.n_rot)
    grid = build_grid(problem.domain, sizes)
    params = SchemeParams(gamma=cfg.gamma, beta=cfg.beta)
    try:
        report = solve(GridFunction.zeros(grid), cfg.solver, params, problem.operator, problem.boundary_g)
        message = report.message
    except NonConvergenceError as error:
        logger.warning("Grid %s did not converge: %s", sizes, error)
        report, message = error.report, str(error)
    except SolverError as error:
        logger.warning("Solver failed on grid %s: %s", sizes, error)
        return ConvergenceRow(
            h=grid.cell_diameter, sizes=list(sizes), error_linf=float("nan"), converged=False, message=str(error)
        )

    solution_norms = norms(report.solution, problem.exact_solution, grid)
    return ConvergenceRow(
        h=grid.cell_diameter,
        sizes=list(sizes),
        error_linf=solution_norms.linf,
        converged=report.converged,
        iterations=report.iterations,
        final_residual=report.final_residual,
        solution_linf=float(np.max(np.abs(report.solution.mesh))),
        weighted_l2=solution_norms.weighted_l2,
        h2_diag=list(solution_norms.h2_diag),
        message=message,
    )


def with_orders(rows: list[ConvergenceRow]) -> list[ConvergenceRow]:
    ordered = [rows[0].model_copy(update={"order": None})] if rows else []
    for coarse, fine in zip(rows, rows[1:]):
        order = None
        if np.isfinite(coarse.error_linf) and np.isfinite(fine.error_linf) and coarse.error_linf > 0 and fine.error_linf > 0:
            order = compute_order(coarse.error_linf, fine.error_linf, coarse.h, fine.h)
        ordered.append(fine.model_copy(update={"order": order}))
    return ordered


def run_convergence(cfg: RunConfig) -> list[ConvergenceRow]:
    problem = get_problem(cfg.problem, cfg.n_phi, cfg.n_rot)
    if problem.exact_solution is None:
        raise ProblemError(f"Problem {problem.name!r} has no exact solution to measure errors against.")
    grid_sizes = resolve_grid_sizes(cfg, problem)
    logger.info("Convergence run for %s on %s grids (gamma=%s, beta=%s)", problem.name, len(grid_sizes), cfg.gamma, cfg.beta)

    if cfg.parallel and len(grid_sizes) > 1:
        with ProcessPoolExecutor(max_workers=len(grid_sizes)) as executor:
            rows = list(executor.map(solve_row, [cfg] * len(grid_sizes), grid_sizes))
    else:
        rows = [solve_row(cfg, sizes, problem) for sizes in grid_sizes]
    return with_orders(rows)


def build_report(cfg: RunConfig, rows: list[ConvergenceRow]) -> ConvergenceReport:
    return ConvergenceReport(
        problem=cfg.problem,
        gamma=cfg.gamma,
        beta=cfg.beta,
        rows=rows,
        all_converged=all(row.converged for row in rows),
        csv=render_csv(rows),
        markdown=render_markdown(rows),
    )


def emit(rows: list[ConvergenceRow], table_format: str, path: str | Path) -> Path:
    path = Path(path)
    text = render(rows, table_format)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as error:
        raise BenchError(f"Cannot write {table_format} table to {path}: {error}") from error
    logger.info("Wrote %s rows to %s", len(rows), path)
    return path


def parse_grids(text: str) -> list[tuple[int, ...]]:
    """``"17,33"`` or ``"17x9,33x17"`` into per-run mesh sizes."""
    grids = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            grids.append(tuple(int(part) for part in item.lower().split("x")))
        except ValueError as error:
            raise ValueError(f"Invalid grid specification {item!r}; use J or J1xJ2.") from error
    return grids


# CLI key -> RunConfig field; solver keys live under "solver".
_CLI_KEYS: dict[str, tuple[str, ...]] = {
    "problem": ("problem",),
    "grids": ("grid_sizes",),
    "gamma": ("gamma",),
    "beta": ("beta",),
    "solver": ("solver", "method"),
    "nphi": ("n_phi",),
    "nrot": ("n_rot",),
    "out": ("output_path",),
    "format": ("output_format",),
    "finest_unlock": ("finest_unlock",),
    "parallel": ("parallel",),
    "tol_residual": ("solver", "tol_residual"),
    "max_iters": ("solver", "max_iters"),
}


def _coerce_flat(key: str, value: str) -> Any:
    if key == "grids":
        return parse_grids(value)
    if key in ("finest_unlock", "parallel"):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return value.strip()


def _set(settings: dict[str, Any], key: str, value: Any) -> None:
    target = _CLI_KEYS.get(key)
    if target is None:
        raise ValueError(f"Unknown configuration key {key!r}.")
    node = settings
    for part in target[:-1]:
        node = node.setdefault(part, {})
    node[target[-1]] = value


def load_config_file(path: str | Path) -> dict[str, Any]:
    """JSON with the RunConfig schema, or flat ``key = value`` lines with CLI flag names."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return json.loads(text)
    settings: dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{number}: expected 'key = value'.")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        _set(settings, key, _coerce_flat(key, value))
    return settings


def build_run_config(args: argparse.Namespace) -> RunConfig:
    settings: dict[str, Any] = load_config_file(args.config) if args.config else {}
    for key in _CLI_KEYS:
        value = getattr(args, key, None)
        if value is None or value is False:
            continue
        _set(settings, key, parse_grids(value) if key == "grids" else value)
    return RunConfig.model_validate(settings)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Convergence study of the narrow-stencil HJB scheme")
    parser.add_argument("--problem", choices=PROBLEM_NAMES, help="Manufactured problem (default from --config)")
    parser.add_argument("--grids", help="Comma-separated mesh sizes, J or J1xJ2 (default: published spacings)")
    parser.add_argument("--gamma", type=float, help="Numerical moment coefficient (default 4)")
    parser.add_argument("--beta", type=float, help="Numerical viscosity coefficient (default 0)")
    parser.add_argument("--solver", choices=["euler", "newton", "newton_with_euler_fallback"], help="Nonlinear solver")
    parser.add_argument("--nphi", type=int, help="Angle samples of the sampled control set")
    parser.add_argument("--nrot", type=int, help="Rotation samples of the sampled control set")
    parser.add_argument("--out", help="Write the table to this file instead of stdout")
    parser.add_argument("--format", choices=sorted(SUPPORTED_FORMATS), help="Table format (default csv)")
    parser.add_argument("--finest-unlock", action="store_true", dest="finest_unlock", help="Allow grids above the desk limit")
    parser.add_argument("--parallel", action="store_true", help="Solve grids in parallel processes")
    parser.add_argument("--tol-residual", type=float, dest="tol_residual", help="Residual tolerance")
    parser.add_argument("--max-iters", type=int, dest="max_iters", help="Euler iteration cap")
    parser.add_argument("--config", help="JSON or key=value file; flags override its values")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_solver_logging(logging.DEBUG if args.verbose else logging.INFO)

    try:
        cfg = build_run_config(args)
        rows = run_convergence(cfg)
    except (ValidationError, ValueError, OSError) as error:
        logger.error("Invalid configuration: %s", error)
        return 1

    try:
        if cfg.output_path:
            emit(rows, cfg.output_format, cfg.output_path)
        else:
            sys.stdout.write(render(rows, cfg.output_format))
    except BenchError as error:
        logger.error("%s", error)
        return 1

    flagged = [row for row in rows if not row.converged]
    if flagged:
        logger.warning("%s of %s grids did not converge", len(flagged), len(rows))
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
