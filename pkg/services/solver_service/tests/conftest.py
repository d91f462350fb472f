from __future__ import annotations

import numpy as np
import pytest

from app.grid import DomainBox, GridFunction, GridSpec, NodeClass, build_grid, unit_box
from app.pde_problems import make_test1


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


@pytest.fixture
def grid5() -> GridSpec:
    return build_grid(unit_box(2), (5, 5))


@pytest.fixture
def grid9() -> GridSpec:
    return build_grid(unit_box(2), (9, 9))


@pytest.fixture
def anisotropic_grid() -> GridSpec:
    return build_grid(DomainBox(lower=(0.0, -1.0), upper=(1.0, 1.0)), (9, 9))


@pytest.fixture(scope="session")
def test1_problem():
    return make_test1()


def random_grid_function(grid: GridSpec, rng: np.random.Generator, *, include_ghosts: bool = True) -> GridFunction:
    U = GridFunction(grid)
    mask = ~grid.class_mask(NodeClass.EXCLUDED_GHOST) if include_ghosts else None
    if mask is None:
        U.values[grid.mesh_slices] = rng.standard_normal(grid.sizes)
    else:
        U.values[mask] = rng.standard_normal(int(mask.sum()))
    return U


def random_quadratic(rng: np.random.Generator, dim: int):
    """``q(x) = x.Px/2 + b.x + c`` with its constant Hessian and its gradient field."""
    G = rng.standard_normal((dim, dim))
    P = G + G.T
    b = rng.standard_normal(dim)
    c = float(rng.standard_normal())

    def value(x):
        x = np.asarray(x)
        return 0.5 * np.einsum("...i,ij,...j->...", x, P, x) + x @ b + c

    def gradient(x):
        return np.asarray(x) @ P + b

    return value, gradient, P
