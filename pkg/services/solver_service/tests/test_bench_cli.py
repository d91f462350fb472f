import json
import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.bench_cli import (
    BenchError,
    build_parser,
    build_report,
    build_run_config,
    compute_order,
    emit,
    load_config_file,
    main,
    norms,
    parse_grids,
    preset_grid_sizes,
    resolve_grid_sizes,
    solve_row,
    with_orders,
)
from app.grid import GridFunction
from app.models import ConvergenceRow, RunConfig, SolverConfig
from app.pde_problems import get_problem
from app.table_formats import render, render_csv, render_markdown


def _row(h: float, error: float, order: float | None = None, converged: bool = True) -> ConvergenceRow:
    return ConvergenceRow(h=h, sizes=[round(1 / h) + 1] * 2, error_linf=error, order=order, converged=converged)


def _published_rows() -> list[ConvergenceRow]:
    return [_row(3.63e-02, 7.25e-01), _row(2.40e-02, 3.72e-01, 1.61), _row(1.79e-02, 2.25e-01, 1.714)]


@pytest.mark.parametrize(
    "errors, spacings, expected",
    [
        ((1.0, 0.5), (0.2, 0.1), 1.0),
        ((0.4, 0.1), (0.2, 0.1), 2.0),
        ((3.72e-01, 2.25e-01), (2.40e-02, 1.79e-02), 1.714),
    ],
)
def test_compute_order(errors, spacings, expected):
    assert compute_order(*errors, *spacings) == pytest.approx(expected, abs=1e-3)


def test_compute_order_is_antisymmetric():
    forward = compute_order(3.72e-01, 2.25e-01, 2.40e-02, 1.79e-02)

    assert compute_order(2.25e-01, 3.72e-01, 1.79e-02, 2.40e-02) == pytest.approx(forward, rel=1e-12)


@pytest.mark.parametrize("arguments", [(0.0, 0.1, 0.2, 0.1), (0.2, 0.1, -0.2, 0.1), (0.2, 0.1, 0.1, 0.1)])
def test_compute_order_rejects_invalid_input(arguments):
    with pytest.raises(ValueError):
        compute_order(*arguments)


def test_norms_of_exact_interpolant(grid9):
    def linear(x):
        return 1.0 + 2.0 * x[..., 0] - x[..., 1]

    U = GridFunction.from_function(grid9, linear)
    result = norms(U, linear, grid9)

    assert result.linf == 0.0
    assert len(result.h2_diag) == 2
    assert max(result.h2_diag) <= 1e-10


def test_norms_against_constant(grid5):
    U = GridFunction.zeros(grid5)
    result = norms(U, lambda x: np.full(x.shape[:-1], 2.0), grid5)

    assert result.linf == 2.0
    assert result.weighted_l2 == 0.0

    U.set_interior_vector(np.ones(grid5.interior_count))
    assert norms(U, None, grid5).weighted_l2 == pytest.approx(0.25 * 3.0)


def test_with_orders():
    rows = with_orders([_row(0.5, 0.4), _row(0.25, 0.1), _row(0.125, float("nan"), converged=False)])

    assert rows[0].order is None
    assert rows[1].order == pytest.approx(2.0)
    assert rows[2].order is None
    assert with_orders([]) == []


def test_render_csv():
    expected = "h,error_linf,order\n3.630e-02,7.250e-01,\n2.400e-02,3.720e-01,1.61\n1.790e-02,2.250e-01,1.71\n"

    assert render_csv(_published_rows()) == expected
    assert render(_published_rows(), "csv") == expected


def test_render_markdown():
    expected = (
        "| h | Error | Order |\n"
        "| --- | --- | --- |\n"
        "| 3.630e-02 | 7.250e-01 |  |\n"
        "| 2.400e-02 | 3.720e-01 | 1.61 |\n"
        "| 1.790e-02 | 2.250e-01 | 1.71 |\n"
    )

    assert render_markdown(_published_rows()) == expected


def test_render_rejects_unknown_format():
    with pytest.raises(ValueError):
        render(_published_rows(), "latex")


def test_emit_writes_file(tmp_path):
    path = emit(_published_rows(), "markdown", tmp_path / "tables" / "test1.md")

    assert path.read_text(encoding="utf-8").startswith("| h | Error | Order |")


def test_emit_reports_unwritable_destination(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory", encoding="utf-8")

    with pytest.raises(BenchError):
        emit(_published_rows(), "csv", blocker / "test1.csv")


@pytest.mark.parametrize(
    "text, expected",
    [("17,33", [(17,), (33,)]), ("17x9, 33X17", [(17, 9), (33, 17)]), ("9,", [(9,)])],
)
def test_parse_grids(text, expected):
    assert parse_grids(text) == expected


def test_parse_grids_rejects_garbage():
    with pytest.raises(ValueError):
        parse_grids("17,fine")


def test_json_config_with_flag_override(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"problem": "test1", "gamma": 2.0, "grid_sizes": [[5, 5], [9, 9]]}), encoding="utf-8")
    args = build_parser().parse_args(["--config", str(path), "--gamma", "3"])
    cfg = build_run_config(args)

    assert cfg.problem == "test1"
    assert cfg.gamma == 3.0
    assert cfg.grid_sizes == [(5, 5), (9, 9)]


def test_flat_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# sampled controls\nproblem = test2\ngrids = 5,9\nnphi = 3\n--tol-residual = 1e-9\nparallel = yes\n",
        encoding="utf-8",
    )
    settings = load_config_file(path)
    cfg = RunConfig.model_validate(settings)

    assert settings["grid_sizes"] == [(5,), (9,)]
    assert cfg.n_phi == 3
    assert cfg.parallel
    assert cfg.solver.tol_residual == 1e-9


@pytest.mark.parametrize("text", ["problem test1\n", "colour = blue\n"])
def test_flat_config_errors(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")

    with pytest.raises(ValueError):
        load_config_file(path)


def test_run_config_requires_refinement():
    with pytest.raises(ValidationError):
        RunConfig(problem="test1", grid_sizes=[(9, 9), (5, 5)])
    with pytest.raises(ValidationError):
        RunConfig(problem="test1", grid_sizes=[(2, 2)])
    with pytest.raises(ValidationError):
        RunConfig(problem="test1", grid_sizes=[])


def test_preset_grids_for_test1():
    problem = get_problem("test1")

    assert preset_grid_sizes(problem) == [(40, 40), (60, 60), (80, 80), (120, 120), (160, 160), (200, 200)]
    assert resolve_grid_sizes(RunConfig(problem="test1"), problem) == [(40, 40), (60, 60), (80, 80), (120, 120)]
    assert len(resolve_grid_sizes(RunConfig(problem="test1", finest_unlock=True), problem)) == 6


def test_explicit_grid_sizes():
    problem = get_problem("test1")

    assert resolve_grid_sizes(RunConfig(problem="test1", grid_sizes=[(9,), (17,)]), problem) == [(9, 9), (17, 17)]
    with pytest.raises(ValueError):
        resolve_grid_sizes(RunConfig(problem="test1", grid_sizes=[(121,)]), problem)
    with pytest.raises(ValueError):
        resolve_grid_sizes(RunConfig(problem="test1", grid_sizes=[(9, 9, 9)]), problem)


def test_solve_row_is_deterministic():
    cfg = RunConfig(problem="test1")
    first = solve_row(cfg, (9, 9))
    second = solve_row(cfg, (9, 9))

    assert first.converged
    assert first.error_linf == second.error_linf
    assert first.iterations == second.iterations
    assert math.isfinite(first.weighted_l2)


def test_build_report():
    rows = _published_rows()
    report = build_report(RunConfig(problem="test1"), rows)

    assert report.all_converged
    assert report.csv == render_csv(rows)
    assert report.markdown.count("\n") == 5


def test_main_rejects_invalid_configuration():
    assert main(["--problem", "test1", "--grids", "9,5"]) == 1
    assert main(["--problem", "test1", "--grids", "121"]) == 1


def test_main_writes_table(tmp_path):
    out = tmp_path / "test1.csv"
    code = main(["--problem", "test1", "--grids", "5,9", "--out", str(out)])

    assert code in (0, 2)
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "h,error_linf,order"
    assert len(lines) == 3
    assert lines[1].startswith("3.536e-01,")


def test_test3_presets_keep_the_origin_off_the_mesh():
    problem = get_problem("test3")
    sizes = preset_grid_sizes(problem)

    assert sizes[:4] == [(24, 24), (32, 32), (40, 40), (50, 50)]
    assert all((size - 1) % 2 == 1 for grid in sizes for size in grid)


def test_unconverged_row_explains_itself():
    cfg = RunConfig(problem="test1", solver=SolverConfig(method="euler", max_iters=3))
    row = solve_row(cfg, (9, 9))

    assert not row.converged
    assert row.message == f"iteration cap reached at residual {row.final_residual:.3e}"


def test_stalled_update_is_reported_in_the_row():
    cfg = RunConfig(problem="test1", solver=SolverConfig(method="euler", tol_update=1e3))
    row = solve_row(cfg, (9, 9))

    assert not row.converged
    assert row.iterations == 1
    assert row.message.startswith("update stalled at residual ")
