import logging

from fastapi import FastAPI, HTTPException, status
from fastapi.concurrency import run_in_threadpool

from app.bench_cli import build_report, run_convergence
from app.logging_setup import configure_solver_logging
from app.models import ConvergenceReport, ProblemsResponse, RunConfig
from app.pde_problems import PROBLEM_NAMES
from app.solver import SolverError

logger = logging.getLogger(__name__)
configure_solver_logging()

app = FastAPI(
    title="Narrow-Stencil HJB Solver API",
    version="0.1.0",
    description="Convergence runs of the narrow-stencil finite difference scheme on manufactured HJB problems.",
)


@app.get("/health")
async def health() -> dict[str, str]:
    return {"status": "ok"}


@app.get("/problems", response_model=ProblemsResponse)
async def problems() -> ProblemsResponse:
    return ProblemsResponse(problems=list(PROBLEM_NAMES))


@app.post("/convergence-runs", response_model=ConvergenceReport)
async def convergence_runs(cfg: RunConfig) -> ConvergenceReport:
    logger.info("Received /convergence-runs request for problem: %s", cfg.problem)
    if cfg.parallel:
        cfg = cfg.model_copy(update={"parallel": False})

    try:
        rows = await run_in_threadpool(run_convergence, cfg)

    except ValueError as error:
        logger.warning("Invalid run configuration for problem %s: %s", cfg.problem, error)
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=str(error),
        ) from error

    except SolverError as error:
        logger.warning("Solver failure for problem %s: %s", cfg.problem, error)
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(error),
        ) from error

    except Exception as error:
        logger.exception("Unexpected failure during convergence run for problem %s", cfg.problem)
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Convergence run failed unexpectedly.",
        ) from error

    report = build_report(cfg, rows)
    logger.info(
        "Finished convergence run for %s: %s rows, all_converged=%s", cfg.problem, len(report.rows), report.all_converged
    )
    return report
