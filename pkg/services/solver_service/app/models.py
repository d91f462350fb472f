from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator

from app.solver_config import get_solver_defaults

SolveMethodName = Literal["euler", "newton", "newton_with_euler_fallback"]
OutputFormat = Literal["csv", "markdown"]


class SolverConfig(BaseModel):
    rho: float | Literal["auto"] = Field(default="auto", description="Pseudo time-step of the Euler iteration, or 'auto'")
    tol_residual: float = Field(
        default_factory=lambda: get_solver_defaults().tol_residual, gt=0.0, description="Stop when max |residual| falls below"
    )
    tol_update: float = Field(
        default_factory=lambda: get_solver_defaults().tol_update, gt=0.0, description="Euler stops when the l2 update norm falls below"
    )
    max_iters: int = Field(default_factory=lambda: get_solver_defaults().max_iters, ge=1, description="Euler iteration cap")
    newton_max_iters: int = Field(
        default_factory=lambda: get_solver_defaults().newton_max_iters, ge=1, description="Newton iteration cap"
    )
    method: SolveMethodName = Field(
        default_factory=lambda: get_solver_defaults().method, description="Nonlinear solver strategy"
    )
    damping: float = Field(
        default_factory=lambda: get_solver_defaults().newton_damping, gt=0.0, le=1.0, description="Initial Newton step length"
    )
    divergence_window: int = Field(
        default_factory=lambda: get_solver_defaults().divergence_window,
        ge=1,
        description="Consecutive expanding updates tolerated once rho halvings are exhausted",
    )
    max_rho_halvings: int = Field(
        default_factory=lambda: get_solver_defaults().auto_rho_max_halvings, ge=0, description="Cap on automatic rho halvings"
    )

    @field_validator("rho")
    @classmethod
    def _positive_rho(cls, value: float | str) -> float | str:
        if value != "auto" and not value > 0:
            raise ValueError("rho must be positive or 'auto'")
        return value


class RunConfig(BaseModel):
    problem: str = Field(..., description="Manufactured problem name, e.g. 'test1'")
    grid_sizes: list[tuple[int, ...]] | None = Field(
        default=None, description="Mesh sizes per run, coarse to fine; the problem preset when omitted"
    )
    gamma: float = Field(default=4.0, ge=0.0, description="Numerical moment coefficient")
    beta: float = Field(default=0.0, ge=0.0, description="Numerical viscosity coefficient")
    solver: SolverConfig = Field(default_factory=SolverConfig, description="Nonlinear solver settings")
    n_phi: int | None = Field(default=None, ge=1, description="Angle samples of a sampled control set")
    n_rot: int | None = Field(default=None, ge=1, description="Rotation samples of a sampled control set")
    finest_unlock: bool = Field(default=False, description="Allow grids above the desk size limit")
    parallel: bool = Field(default=False, description="Solve the grids in parallel worker processes")
    output_format: OutputFormat = Field(default="csv", description="Emitted table format")
    output_path: str | None = Field(default=None, description="Destination file of the emitted table")

    @field_validator("grid_sizes")
    @classmethod
    def _valid_sizes(cls, value: list[tuple[int, ...]] | None) -> list[tuple[int, ...]] | None:
        if value is None:
            return value
        if not value:
            raise ValueError("grid_sizes must not be empty")
        for sizes in value:
            if any(size < 3 for size in sizes):
                raise ValueError(f"every grid needs at least 3 nodes per axis, got {sizes}")
        return value

    @model_validator(mode="after")
    def _strictly_refining(self) -> "RunConfig":
        if self.grid_sizes:
            coarsest = [min(sizes) for sizes in self.grid_sizes]
            if any(fine <= coarse for coarse, fine in zip(coarsest, coarsest[1:])):
                raise ValueError("grid_sizes must be strictly refining (h decreasing)")
        return self


class ConvergenceRow(BaseModel):
    h: float = Field(..., description="Cell diagonal of the grid, sqrt(sum h_i^2)")
    sizes: list[int] = Field(..., description="Mesh nodes per axis")
    error_linf: float = Field(..., description="Max nodal error against the exact solution")
    order: float | None = Field(default=None, description="Observed order against the previous row")
    converged: bool = Field(..., description="Whether the solver met its residual tolerance")
    iterations: int = Field(default=0, description="Solver iterations spent")
    final_residual: float = Field(default=0.0, description="Max |residual| of the returned solution")
    solution_linf: float = Field(default=0.0, description="Max |U| over mesh nodes")
    weighted_l2: float = Field(default=0.0, description="Volume-weighted l2 norm of U over interior nodes")
    h2_diag: list[float] = Field(default_factory=list, description="Per-axis weighted l2 norm of the 2h second differences")
    message: str | None = Field(default=None, description="Failure details of a flagged row")


class ConvergenceReport(BaseModel):
    problem: str
    gamma: float
    beta: float
    rows: list[ConvergenceRow] = Field(default_factory=list)
    all_converged: bool
    csv: str = Field(..., description="Rows rendered as CSV")
    markdown: str = Field(..., description="Rows rendered as a Markdown table")


class ProblemsResponse(BaseModel):
    problems: list[str]
