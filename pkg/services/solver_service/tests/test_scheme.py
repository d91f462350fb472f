import numpy as np
import pytest

from app.grid import GridFunction, NodeClass, build_grid, unit_box
from app.pde_problems import hjb_eval, make_linear_operator, make_test2
from app.scheme import (
    GhostClosureError,
    ProbeSlot,
    SchemeAssembler,
    SchemeError,
    SchemeParams,
    SlotKind,
    all_probe_slots,
    ghost_fill,
    hat_f_at,
    hat_f_slots,
    impose_boundary,
    moment_energy,
    monotonicity_probe,
    residual,
)
from app.stencil import second_diff

from conftest import random_grid_function, random_quadratic


def _laplacian(U, idx):
    return sum(second_diff(U, idx, axis) for axis in range(U.grid.dim))


def test_ghost_fill_of_zero_function(grid9):
    filled = ghost_fill(GridFunction.zeros(grid9))

    assert np.all(filled.values[grid9.class_mask(NodeClass.GHOST)] == 0.0)
    assert np.all(np.isnan(filled.values[grid9.class_mask(NodeClass.EXCLUDED_GHOST)]))


def test_ghost_fill_reproduces_harmonic_quadratic(anisotropic_grid):
    def harmonic(x):
        return x[..., 0] ** 2 - x[..., 1] ** 2 + 0.5 * x[..., 0] * x[..., 1]

    grid = anisotropic_grid
    filled = ghost_fill(GridFunction.from_function(grid, harmonic))
    ghosts = grid.class_mask(NodeClass.GHOST)

    np.testing.assert_allclose(filled.values[ghosts], harmonic(grid.coordinates[ghosts]), rtol=0, atol=1e-12)


@pytest.mark.parametrize("sizes", [(5, 5), (9, 9), (6, 11)])
def test_auxiliary_closure_on_random_functions(sizes, rng):
    grid = build_grid(unit_box(2), sizes)
    scale = 1.0 / grid.h_min**2
    for _ in range(100):
        filled = ghost_fill(random_grid_function(grid, rng, include_ghosts=False))
        for idx in grid.iter_indices(NodeClass.BOUNDARY_AUX):
            largest = max(scale * float(np.nanmax(np.abs(filled.mesh))), 1.0)
            assert abs(_laplacian(filled, idx)) <= 1e-12 * largest


def test_ghost_on_top_face_follows_tangential_closure(grid9, rng):
    U = random_grid_function(grid9, rng, include_ghosts=False)
    filled = ghost_fill(U)
    h_x, h_y = grid9.spacings
    top, inner = (4, 9), (4, 8)
    tangential = (U.value((5, 9)) - 2.0 * U.value(top) + U.value((3, 9))) / h_x**2

    expected = -U.value(inner) + 2.0 * U.value(top) - h_y**2 * tangential
    assert filled.value((4, 10)) == pytest.approx(expected, rel=1e-13, abs=1e-13)


def test_ghost_fill_needs_mesh_values(grid5):
    U = GridFunction.zeros(grid5)
    U.values[1, 3] = np.nan

    with pytest.raises(GhostClosureError):
        ghost_fill(U)


def test_ghost_fill_leaves_input_untouched(grid5):
    U = GridFunction.zeros(grid5)
    ghost_fill(U)

    assert np.isnan(U.values[0, 3])


def test_impose_boundary(grid5):
    U = impose_boundary(GridFunction.zeros(grid5), lambda x: x[..., 0] + x[..., 1])

    assert U.value((1, 1)) == 0.0
    assert U.value((5, 3)) == pytest.approx(1.5)
    assert U.value((3, 3)) == 0.0


def test_hat_f_on_quadratic_equals_operator(grid9, rng, test1_problem):
    op = test1_problem.operator
    value, gradient, P = random_quadratic(rng, 2)
    U = GridFunction.from_function(grid9, value, include_ghosts=True)

    for idx in [(2, 2), (5, 4), (8, 7)]:
        x = grid9.coordinates[idx]
        expected, _ = hjb_eval(test1_problem.controls, P, gradient(x), value(x), x)
        assert hat_f_at(U, idx, SchemeParams(gamma=4.0), op) == pytest.approx(expected, rel=1e-9, abs=1e-9)

        viscosity = sum(h * P[axis, axis] for axis, h in enumerate(grid9.spacings))
        damped = hat_f_at(U, idx, SchemeParams(gamma=4.0, beta=0.5), op)
        assert damped == pytest.approx(expected - 0.5 * viscosity, rel=1e-9, abs=1e-9)


def test_slot_form_is_consistent(rng, test1_problem):
    op = test1_problem.operator
    params = SchemeParams(gamma=3.0, beta=1.5)
    for _ in range(20):
        G = rng.standard_normal((2, 2))
        P = G + G.T
        q = rng.standard_normal(2)
        u = float(rng.standard_normal())
        x = rng.random(2)
        assert hat_f_slots(op, params, P, P, q, q, u, x) == op.evaluate(P, q, u, x)


def test_hat_f_of_zero_function(grid9, test1_problem):
    U = ghost_fill(GridFunction.zeros(grid9))
    idx = (4, 6)
    x = grid9.coordinates[idx]
    expected, _ = hjb_eval(test1_problem.controls, np.zeros((2, 2)), np.zeros(2), 0.0, x)

    assert hat_f_at(U, idx, SchemeParams(gamma=4.0), test1_problem.operator) == pytest.approx(expected, rel=1e-14)


def test_hat_f_at_requires_interior_node(grid9, test1_problem):
    U = ghost_fill(GridFunction.zeros(grid9))

    with pytest.raises(SchemeError):
        hat_f_at(U, (1, 4), SchemeParams(gamma=4.0), test1_problem.operator)


def test_batched_residual_matches_pointwise(anisotropic_grid, rng, test1_problem):
    grid = anisotropic_grid
    params = SchemeParams(gamma=2.0, beta=0.5)
    U = random_grid_function(grid, rng, include_ghosts=False)
    result = residual(U, params, test1_problem.operator)
    filled = ghost_fill(U)

    for idx in grid.iter_indices(NodeClass.INTERIOR):
        expected = hat_f_at(filled, idx, params, test1_problem.operator)
        assert result.values.value(idx) == pytest.approx(expected, rel=1e-12, abs=1e-10)
    assert result.max_abs == pytest.approx(float(np.max(np.abs(result.interior))))
    assert np.isnan(result.values.values[1, 1])


def test_residual_of_zero_function_is_minus_forcing(grid9):
    op = make_linear_operator(-np.eye(2), 3.0, name="poisson")
    result = residual(GridFunction.zeros(grid9), SchemeParams(gamma=4.0), op, lambda x: np.zeros(x.shape[:-1]))

    np.testing.assert_allclose(result.interior, -3.0)
    assert result.max_abs == 3.0


def test_residual_enforces_boundary_data(grid5):
    op = make_linear_operator(-np.eye(2), 0.0)
    U = GridFunction.zeros(grid5)
    assembler = SchemeAssembler(grid5, SchemeParams(gamma=1.0), op, lambda x: np.ones(x.shape[:-1]))
    prepared = assembler.prepare(U.copy())

    assert prepared.value((1, 3)) == 1.0
    assert prepared.value((0, 3)) == pytest.approx(2.0)
    assert U.value((1, 3)) == 0.0


def test_interpolant_residual_is_second_order():
    problem = make_test2(n_phi=3, n_rot=4)
    params = SchemeParams(gamma=4.0)
    maxima = []
    for stride, size in ((1, 9), (2, 17), (4, 33)):
        grid = build_grid(problem.domain, (size, size))
        U = GridFunction.from_function(grid, problem.exact_solution)
        values = residual(U, params, problem.operator, problem.boundary_g).interior
        # the same physical nodes on every grid, clear of the auxiliary closure
        common = slice(2 * stride - 1, 6 * stride, stride)
        maxima.append(float(np.max(np.abs(values[common, common]))))

    assert maxima[0] / maxima[1] >= 3.0
    assert maxima[1] / maxima[2] >= 3.0


def test_scheme_params_validation(test1_problem):
    with pytest.raises(ValueError):
        SchemeParams(gamma=-1.0)
    with pytest.raises(ValueError):
        SchemeParams(beta=-0.1)

    assert SchemeParams(gamma=1.0).check_thresholds(test1_problem.operator.ellipticity)
    assert not SchemeParams(gamma=0.5).check_thresholds(test1_problem.operator.ellipticity)
    assert SchemeParams.for_operator(test1_problem.operator, 4.0).gamma == 4.0


def test_generalized_monotonicity_probes(grid9, rng, test1_problem):
    data = test1_problem.operator.ellipticity
    params = SchemeParams(gamma=data.K_ss / 2 + 0.1, beta=data.K_s / 2 + 0.1)
    slots = all_probe_slots(2)
    nodes = list(grid9.iter_indices(NodeClass.INTERIOR))

    for _ in range(200):
        U = random_grid_function(grid9, rng, include_ghosts=False)
        idx = nodes[int(rng.integers(len(nodes)))]
        slot = slots[int(rng.integers(len(slots)))]
        probe = monotonicity_probe(U, idx, params, test1_problem.operator, slot)
        assert slot.expected_sign * probe >= -1e-12, (slot, probe)


def test_every_slot_has_the_mandated_sign(grid9, rng, test1_problem):
    params = SchemeParams(gamma=1.1, beta=0.1)
    U = random_grid_function(grid9, rng, include_ghosts=False)
    for slot in all_probe_slots(2):
        probe = monotonicity_probe(U, (5, 5), params, test1_problem.operator, slot)
        assert slot.expected_sign * probe >= -1e-12, slot
        if SlotKind(slot.kind) in (SlotKind.HAT, SlotKind.TILDE):
            assert abs(probe) > 0.0


def test_probe_closed_forms(grid5, rng):
    op = make_linear_operator(-np.eye(2), 0.0, c=1.0)
    U = random_grid_function(grid5, rng, include_ghosts=False)
    params = SchemeParams(gamma=1.0)

    tilde = monotonicity_probe(U, (3, 3), params, op, ProbeSlot(SlotKind.TILDE, 0, 0))
    assert tilde == pytest.approx(0.5e-6, rel=1e-6)
    reaction = monotonicity_probe(U, (3, 3), params, op, ProbeSlot(SlotKind.U))
    assert reaction == pytest.approx(1e-6, rel=1e-6)


def test_hat_probe_at_threshold(grid9, rng, test1_problem):
    params = SchemeParams(gamma=test1_problem.operator.ellipticity.K_ss / 2)
    for _ in range(20):
        U = random_grid_function(grid9, rng, include_ghosts=False)
        probe = monotonicity_probe(U, (5, 5), params, test1_problem.operator, ProbeSlot(SlotKind.HAT, 0, 1))
        assert probe <= 1e-12


def test_invalid_probe_slots(grid5, test1_problem):
    U = GridFunction.zeros(grid5)
    params = SchemeParams(gamma=1.0)

    with pytest.raises(ValueError):
        ProbeSlot(SlotKind.HAT, 0)
    with pytest.raises(ValueError):
        ProbeSlot(SlotKind.GRAD_MINUS)
    with pytest.raises(ValueError):
        ProbeSlot("laplacian")
    with pytest.raises(ValueError):
        monotonicity_probe(U, (3, 3), params, test1_problem.operator, "hat")
    with pytest.raises(ValueError):
        monotonicity_probe(U, (3, 3), params, test1_problem.operator, ProbeSlot(SlotKind.U), epsilon=0.0)


@pytest.mark.parametrize("sizes", [(5, 5), (9, 9), (7, 10)])
def test_moment_energy_is_nonnegative(sizes, rng):
    grid = build_grid(unit_box(2), sizes)
    for _ in range(20):
        U = GridFunction.zeros(grid)
        U.set_interior_vector(rng.standard_normal(grid.interior_count))
        assert moment_energy(U) >= -1e-10
