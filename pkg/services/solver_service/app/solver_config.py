import os
from dataclasses import dataclass
from functools import lru_cache


@dataclass(frozen=True)
class SolverDefaults:
    tol_residual: float = float(os.getenv("SOLVER_TOL_RESIDUAL", "1e-8"))
    tol_update: float = float(os.getenv("SOLVER_TOL_UPDATE", "1e-10"))
    max_iters: int = int(os.getenv("SOLVER_MAX_ITERS", "200000"))
    newton_max_iters: int = int(os.getenv("SOLVER_NEWTON_MAX_ITERS", "50"))
    method: str = os.getenv("SOLVER_METHOD", "newton")
    newton_damping: float = float(os.getenv("SOLVER_NEWTON_DAMPING", "1.0"))
    divergence_window: int = int(os.getenv("SOLVER_DIVERGENCE_WINDOW", "20"))
    auto_rho_max_halvings: int = int(os.getenv("SOLVER_AUTO_RHO_MAX_HALVINGS", "40"))
    progress_log_every: int = int(os.getenv("SOLVER_PROGRESS_LOG_EVERY", "5000"))
    desk_grid_limit: int = int(os.getenv("BENCH_DESK_GRID_LIMIT", "120"))
    default_n_phi: int = int(os.getenv("BENCH_NPHI", "8"))
    default_n_rot: int = int(os.getenv("BENCH_NROT", "16"))


@lru_cache(maxsize=1)
def get_solver_defaults() -> SolverDefaults:
    return SolverDefaults()
