"""Fully nonlinear operators F(M, p, u, x), HJB control sets and manufactured problems.

All fields are vectorized: they take points of shape ``(..., d)`` and return
arrays broadcasting against that leading shape. Operators follow the
convention ``H[u] = min_theta (A^theta : D^2u + b^theta . grad u + c^theta u - f_theta)``
with every ``A^theta`` negative semidefinite, so ``F`` is nonincreasing in ``M``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from app.grid import DomainBox, unit_box
from app.solver_config import get_solver_defaults

logger = logging.getLogger(__name__)

ScalarField = Callable[[np.ndarray], np.ndarray]
VectorField = Callable[[np.ndarray], np.ndarray]
MatrixField = Callable[[np.ndarray], np.ndarray]
Evaluate = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
BoundEvaluate = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

TEST1_MATRICES: tuple[tuple[tuple[float, float], tuple[float, float]], ...] = (
    ((-1.0, 1.0), (1.0, -1.0)),
    ((-2.0, 1.0), (1.0, -1.0)),
    ((-1.0, -1.0), (-1.0, -1.0)),
    ((-1.0, -1.0), (-1.0, -2.0)),
    ((-2.0, 1.0), (1.0, -2.0)),
    ((-2.0, -1.0), (-1.0, -2.0)),
    ((-2.0, -1.0), (-1.0, -1.0)),
    ((-1.0, -1.0), (-1.0, -2.0)),
)
TEST2_PHI_RANGE = (0.0, math.pi / 3.0)
TEST2_REACTION = math.pi**2
TEST3_DOMAIN = DomainBox(lower=(-0.5, -0.5), upper=(0.5, 0.5))


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class EllipticityData:
    """Lipschitz and ellipticity bounds of F.

    ``k_ss``/``K_ss`` bound the Hessian partials (``K_ss`` covers every entry,
    diagonal included), ``K_s`` the gradient partials and ``k0``/``K0`` the
    partial in ``u``. ``lambda_min``/``lambda_max`` are the uniform ellipticity
    bounds; ``lambda_min == 0`` marks a degenerate problem.
    """

    k0: float = 0.0
    K0: float = 0.0
    k_ss: float = 0.0
    K_ss: float = 0.0
    K_s: float = 0.0
    lambda_min: float = 0.0
    lambda_max: float = 0.0

    def __post_init__(self) -> None:
        for name in ("k0", "K0", "k_ss", "K_ss", "K_s", "lambda_min", "lambda_max"):
            if getattr(self, name) < 0:
                raise ProblemError(f"Ellipticity bound {name} must be non-negative, got {getattr(self, name)}.")
        if self.k0 > self.K0:
            raise ProblemError(f"k0={self.k0} exceeds K0={self.K0}.")
        if self.lambda_min > self.lambda_max:
            raise ProblemError(f"lambda_min={self.lambda_min} exceeds lambda_max={self.lambda_max}.")

    @property
    def uniformly_elliptic(self) -> bool:
        return self.lambda_min > 0


@dataclass(frozen=True)
class PdeOperator:
    evaluate: Evaluate
    ellipticity: EllipticityData
    dimension: int
    name: str = "operator"
    bind: Callable[[np.ndarray], BoundEvaluate] | None = None

    def at_points(self, x: np.ndarray) -> BoundEvaluate:
        """Evaluator with the coefficients frozen at ``x``; reuse it across iterations."""
        x = np.asarray(x, dtype=np.float64)
        if self.bind is not None:
            return self.bind(x)
        return lambda M, p, u: self.evaluate(M, p, u, x)


@dataclass(frozen=True)
class Control:
    A: MatrixField
    f: ScalarField
    b: VectorField | None = None
    c: ScalarField | None = None
    label: str = ""


class ControlKind(str, Enum):
    FINITE = "finite"
    SAMPLED = "sampled"


@dataclass(frozen=True)
class ControlSampling:
    phi_range: tuple[float, float]
    n_phi: int
    n_rot: int


@dataclass(frozen=True)
class ControlCoefficients:
    """Coefficients of every control stacked on a leading axis."""

    A: np.ndarray
    b: np.ndarray | None
    c: np.ndarray | None
    f: np.ndarray


@dataclass(frozen=True)
class ControlSet:
    controls: tuple[Control, ...]
    dimension: int
    kind: ControlKind = ControlKind.FINITE
    sampling: ControlSampling | None = None
    shared_rhs: ScalarField | None = None

    def __post_init__(self) -> None:
        if not self.controls:
            raise ProblemError("Control set is empty.")

    def __len__(self) -> int:
        return len(self.controls)

    def coefficients(self, x: np.ndarray) -> ControlCoefficients:
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        d = self.dimension

        A = np.stack([np.broadcast_to(control.A(x), lead + (d, d)) for control in self.controls])
        f = np.stack([np.broadcast_to(control.f(x), lead) for control in self.controls]).astype(np.float64)
        if self.shared_rhs is not None:
            f = f + np.broadcast_to(self.shared_rhs(x), lead)

        b = None
        if any(control.b is not None for control in self.controls):
            b = np.stack([
                np.zeros(lead + (d,)) if control.b is None else np.broadcast_to(control.b(x), lead + (d,))
                for control in self.controls
            ])
        c = None
        if any(control.c is not None for control in self.controls):
            c = np.stack([
                np.zeros(lead) if control.c is None else np.broadcast_to(control.c(x), lead)
                for control in self.controls
            ])
        return ControlCoefficients(A=A, b=b, c=c, f=f)


@dataclass(frozen=True)
class ExactSolution:
    value: ScalarField
    gradient: VectorField
    hessian: MatrixField

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.value(x)


@dataclass(frozen=True)
class ManufacturedProblem:
    name: str
    operator: PdeOperator
    domain: DomainBox
    boundary_g: ScalarField
    exact_solution: ExactSolution | None = None
    controls: ControlSet | None = None
    metadata: dict = field(default_factory=dict)

    def exact_residual(self, x: np.ndarray) -> np.ndarray:
        """F evaluated on the analytic derivatives of the exact solution."""
        if self.exact_solution is None:
            raise ProblemError(f"Problem {self.name!r} has no exact solution.")
        exact = self.exact_solution
        x = np.asarray(x, dtype=np.float64)
        return self.operator.evaluate(exact.hessian(x), exact.gradient(x), exact.value(x), x)


def constant_matrix(matrix: np.ndarray | Sequence[Sequence[float]]) -> MatrixField:
    matrix = np.asarray(matrix, dtype=np.float64)
    matrix.setflags(write=False)
    return lambda x: np.broadcast_to(matrix, np.shape(x)[:-1] + matrix.shape)


def constant_vector(vector: np.ndarray | Sequence[float]) -> VectorField:
    vector = np.asarray(vector, dtype=np.float64)
    vector.setflags(write=False)
    return lambda x: np.broadcast_to(vector, np.shape(x)[:-1] + vector.shape)


def constant_scalar(value: float) -> ScalarField:
    return lambda x: np.full(np.shape(x)[:-1], float(value))


def _control_values(coefficients: ControlCoefficients, M: np.ndarray, p: np.ndarray, u: np.ndarray) -> np.ndarray:
    values = np.einsum("n...ij,...ij->n...", coefficients.A, M)
    if coefficients.b is not None:
        values = values + np.einsum("n...i,...i->n...", coefficients.b, p)
    if coefficients.c is not None:
        values = values + coefficients.c * u
    return values - coefficients.f


def _minimize(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    argmin = np.argmin(values, axis=0)
    value = np.take_along_axis(values, argmin[np.newaxis, ...], axis=0)[0]
    return value, argmin


def hjb_eval(controls: ControlSet, M, p, u, x) -> tuple[np.ndarray | float, np.ndarray | int]:
    """Minimum over the control list of ``A:M + b.p + c u - f`` and the first minimizing index."""
    M = np.asarray(M, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    coefficients = controls.coefficients(np.asarray(x, dtype=np.float64))
    value, argmin = _minimize(_control_values(coefficients, M, p, u))
    if value.ndim == 0:
        return float(value), int(argmin)
    return value, argmin


@dataclass(frozen=True)
class BoundControls:
    """Control coefficients frozen at a set of points.

    Calling it gives the minimum over the controls. ``with_policy`` fixes one
    control per point and returns the resulting linear evaluator, which is the
    operator the semismooth Newton iteration differentiates.
    """

    coefficients: ControlCoefficients

    def __call__(self, M, p, u) -> np.ndarray:
        return self.evaluate(M, p, u)[0]

    def evaluate(self, M, p, u) -> tuple[np.ndarray, np.ndarray]:
        return _minimize(_control_values(self.coefficients, np.asarray(M), np.asarray(p), np.asarray(u)))

    def with_policy(self, active: np.ndarray) -> BoundEvaluate:
        active = np.asarray(active, dtype=np.intp)
        coefficients = self.coefficients
        if active.shape != coefficients.f.shape[1:]:
            raise ProblemError(f"Policy shape {active.shape} does not match the bound points {coefficients.f.shape[1:]}.")

        def pick(stacked: np.ndarray | None, trailing: int) -> np.ndarray | None:
            if stacked is None:
                return None
            index = active.reshape((1,) + active.shape + (1,) * trailing)
            return np.take_along_axis(stacked, index, axis=0)

        selected = ControlCoefficients(
            A=pick(coefficients.A, 2),
            b=pick(coefficients.b, 1),
            c=pick(coefficients.c, 0),
            f=pick(coefficients.f, 0),
        )

        def frozen(M, p, u):
            return _control_values(selected, np.asarray(M), np.asarray(p), np.asarray(u))[0]

        return frozen


def make_hjb_operator(controls: ControlSet, ellipticity: EllipticityData, name: str = "hjb") -> PdeOperator:
    def evaluate(M, p, u, x):
        return hjb_eval(controls, M, p, u, x)[0]

    def bind(x: np.ndarray) -> BoundControls:
        return BoundControls(controls.coefficients(x))

    return PdeOperator(evaluate=evaluate, ellipticity=ellipticity, dimension=controls.dimension, name=name, bind=bind)


def make_linear_operator(
    A: MatrixField | np.ndarray,
    f: ScalarField | float = 0.0,
    *,
    b: VectorField | np.ndarray | None = None,
    c: ScalarField | float | None = None,
    dimension: int | None = None,
    ellipticity: EllipticityData | None = None,
    name: str = "linear",
) -> PdeOperator:
    """``A:M + b.p + c u - f`` as a single-control HJB operator."""
    if not callable(A):
        matrix = np.asarray(A, dtype=np.float64)
        dimension = matrix.shape[0]
        A = constant_matrix(matrix)
    if dimension is None:
        raise ProblemError("Dimension is required when A is given as a field.")
    if b is not None and not callable(b):
        b = constant_vector(b)
    if c is not None and not callable(c):
        c = constant_scalar(c)
    if not callable(f):
        f = constant_scalar(f)

    controls = ControlSet(controls=(Control(A=A, b=b, c=c, f=f, label=name),), dimension=dimension)
    if ellipticity is None:
        ellipticity = EllipticityData()
    return make_hjb_operator(controls, ellipticity, name=name)


def manufactured_rhs(
    controls: ControlSet,
    exact: ExactSolution,
    theta_part: Sequence[ScalarField] | None = None,
) -> ScalarField:
    """``g(x) = min_theta (L_theta u_ex(x) - s_theta(x))``; ``f_theta = s_theta + g`` then zeroes the residual."""
    if theta_part is not None and len(theta_part) != len(controls):
        raise ProblemError(f"Expected {len(controls)} control-dependent parts, got {len(theta_part)}.")
    linear_part = ControlSet(
        controls=tuple(
            Control(A=control.A, b=control.b, c=control.c, f=constant_scalar(0.0) if theta_part is None else theta_part[k])
            for k, control in enumerate(controls.controls)
        ),
        dimension=controls.dimension,
    )

    def rhs(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        value, _ = hjb_eval(linear_part, exact.hessian(x), exact.gradient(x), exact.value(x), x)
        return value

    return rhs


def ellipticity_from_matrices(
    matrices: np.ndarray,
    *,
    reaction: tuple[float, float] = (0.0, 0.0),
    K_s: float = 0.0,
) -> EllipticityData:
    """Bounds from a stack of negative semidefinite coefficient matrices, shape ``(n, d, d)``."""
    matrices = np.asarray(matrices, dtype=np.float64)
    diffusion = -matrices
    eigenvalues = np.linalg.eigvalsh(diffusion)
    diagonals = np.diagonal(diffusion, axis1=-2, axis2=-1)
    return EllipticityData(
        k0=reaction[0],
        K0=reaction[1],
        k_ss=max(float(diagonals.min()), 0.0),
        K_ss=float(np.abs(matrices).max()),
        K_s=K_s,
        lambda_min=max(float(eigenvalues.min()), 0.0),
        lambda_max=max(float(eigenvalues.max()), 0.0),
    )


# Test 1: finite control set, smooth solution with a discontinuous optimal control

_TEST1_WAVE = np.array([2.0 * math.pi * 1.2, -2.0 * math.pi])


def _test1_exact() -> ExactSolution:
    def phase(x):
        return np.asarray(x) @ _TEST1_WAVE

    return ExactSolution(
        value=lambda x: np.sin(phase(x)),
        gradient=lambda x: np.cos(phase(x))[..., np.newaxis] * _TEST1_WAVE,
        hessian=lambda x: -np.sin(phase(x))[..., np.newaxis, np.newaxis] * np.outer(_TEST1_WAVE, _TEST1_WAVE),
    )


def make_test1() -> ManufacturedProblem:
    exact = _test1_exact()
    matrices = np.array(TEST1_MATRICES)
    bare = ControlSet(
        controls=tuple(
            Control(A=constant_matrix(matrix), f=constant_scalar(0.0), label=f"A{k}") for k, matrix in enumerate(matrices)
        ),
        dimension=2,
    )
    controls = ControlSet(controls=bare.controls, dimension=2, shared_rhs=manufactured_rhs(bare, exact))
    ellipticity = ellipticity_from_matrices(matrices)
    logger.debug("Built test1 with %s controls, K_ss=%s", len(controls), ellipticity.K_ss)
    return ManufacturedProblem(
        name="test1",
        operator=make_hjb_operator(controls, ellipticity, name="test1"),
        domain=unit_box(2),
        boundary_g=exact.value,
        exact_solution=exact,
        controls=controls,
    )


# Test 2: sampled rotations and angles between two Wiener diffusions


def rotation(angle: float) -> np.ndarray:
    return np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])


def diffusion_matrix(phi: float, angle: float) -> np.ndarray:
    """Positive semidefinite ``a = sigma sigma^T / 2`` with ``sigma = R^T [[1, sin phi], [0, cos phi]]``."""
    sigma = rotation(angle).T @ np.array([[1.0, math.sin(phi)], [0.0, math.cos(phi)]])
    return 0.5 * sigma @ sigma.T


def _test2_exact() -> ExactSolution:
    pi = math.pi

    def parts(x):
        x = np.asarray(x)
        X, Y = x[..., 0], x[..., 1]
        return X, Y, np.exp(X * Y), np.sin(pi * X), np.cos(pi * X), np.sin(pi * Y), np.cos(pi * Y)

    def value(x):
        _, _, E, Sx, _, Sy, _ = parts(x)
        return E * Sx * Sy

    def gradient(x):
        X, Y, E, Sx, Cx, Sy, Cy = parts(x)
        return np.stack([E * (Y * Sx + pi * Cx) * Sy, E * Sx * (X * Sy + pi * Cy)], axis=-1)

    def hessian(x):
        X, Y, E, Sx, Cx, Sy, Cy = parts(x)
        u_xx = E * Sy * (Y * Y * Sx + 2.0 * pi * Y * Cx - pi * pi * Sx)
        u_yy = E * Sx * (X * X * Sy + 2.0 * pi * X * Cy - pi * pi * Sy)
        u_xy = E * ((Y * Sx + pi * Cx) * (X * Sy + pi * Cy) + Sx * Sy)
        return np.stack([np.stack([u_xx, u_xy], axis=-1), np.stack([u_xy, u_yy], axis=-1)], axis=-2)

    return ExactSolution(value=value, gradient=gradient, hessian=hessian)


def control_lattice(n_phi: int, n_rot: int) -> list[tuple[float, float]]:
    """(phi, rotation angle) pairs: phi with both endpoints, angles over [0, 2 pi)."""
    if n_phi < 1 or n_rot < 1:
        raise ProblemError(f"Control sample counts must be positive, got n_phi={n_phi}, n_rot={n_rot}.")
    phis = np.linspace(*TEST2_PHI_RANGE, n_phi) if n_phi > 1 else np.array([TEST2_PHI_RANGE[0]])
    angles = [2.0 * math.pi * m / n_rot for m in range(n_rot)]
    return [(float(phi), angle) for phi in phis for angle in angles]


def make_test2(n_phi: int = 8, n_rot: int = 16) -> ManufacturedProblem:
    exact = _test2_exact()
    lattice = control_lattice(n_phi, n_rot)
    matrices = np.array([-diffusion_matrix(phi, angle) for phi, angle in lattice])
    reaction = constant_scalar(TEST2_REACTION)
    theta_part = [constant_scalar(math.sqrt(3.0) * math.sin(phi / math.pi**2) ** 2) for phi, _ in lattice]

    bare = ControlSet(
        controls=tuple(
            Control(A=constant_matrix(matrix), c=reaction, f=part, label=f"phi={phi:.4f},angle={angle:.4f}")
            for matrix, part, (phi, angle) in zip(matrices, theta_part, lattice)
        ),
        dimension=2,
    )
    controls = ControlSet(
        controls=bare.controls,
        dimension=2,
        kind=ControlKind.SAMPLED,
        sampling=ControlSampling(phi_range=TEST2_PHI_RANGE, n_phi=n_phi, n_rot=n_rot),
        shared_rhs=manufactured_rhs(bare, exact, theta_part),
    )
    ellipticity = ellipticity_from_matrices(matrices, reaction=(TEST2_REACTION, TEST2_REACTION))
    logger.debug("Built test2 with %s sampled controls (n_phi=%s, n_rot=%s)", len(controls), n_phi, n_rot)
    return ManufacturedProblem(
        name="test2",
        operator=make_hjb_operator(controls, ellipticity, name="test2"),
        domain=unit_box(2),
        boundary_g=exact.value,
        exact_solution=exact,
        controls=controls,
        metadata={"n_phi": n_phi, "n_rot": n_rot},
    )


# Test 3: degenerate linear problem with a non-C2 solution


def _test3_exact() -> ExactSolution:
    def value(x):
        x = np.asarray(x)
        return np.cbrt(x[..., 0]) ** 4 - np.cbrt(x[..., 1]) ** 4

    def gradient(x):
        x = np.asarray(x)
        return np.stack([4.0 / 3.0 * np.cbrt(x[..., 0]), -4.0 / 3.0 * np.cbrt(x[..., 1])], axis=-1)

    def hessian(x):
        x = np.asarray(x)
        with np.errstate(divide="ignore"):
            u_xx = 4.0 / 9.0 / np.cbrt(x[..., 0]) ** 2
            u_yy = -4.0 / 9.0 / np.cbrt(x[..., 1]) ** 2
        zero = np.zeros_like(u_xx)
        return np.stack([np.stack([u_xx, zero], axis=-1), np.stack([zero, u_yy], axis=-1)], axis=-2)

    return ExactSolution(value=value, gradient=gradient, hessian=hessian)


def _test3_coefficient(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    cx, cy = np.cbrt(x[..., 0]), np.cbrt(x[..., 1])
    row0 = np.stack([cx * cx, -cx * cy], axis=-1)
    row1 = np.stack([-cx * cy, cy * cy], axis=-1)
    return -16.0 / 9.0 * np.stack([row0, row1], axis=-2)


def _frozen_gradient_coefficient(exact: ExactSolution) -> MatrixField:
    """``-grad u_ex (x) grad u_ex``: the infinity Laplacian with the gradient fixed."""

    def coefficient(x):
        gradient = exact.gradient(x)
        return -np.einsum("...i,...j->...ij", gradient, gradient)

    return coefficient


def make_test3(variant: str = "linear") -> ManufacturedProblem:
    exact = _test3_exact()
    if variant == "linear":
        coefficient, name = _test3_coefficient, "test3"
    elif variant == "infinity_laplacian":
        coefficient, name = _frozen_gradient_coefficient(exact), "test3_infinity_laplacian"
    else:
        raise ProblemError(f"Unknown test3 variant {variant!r}.")

    corner = 0.5 ** (2.0 / 3.0)
    ellipticity = EllipticityData(K_ss=16.0 / 9.0 * corner, lambda_max=16.0 / 9.0 * 2.0 * corner)
    operator = make_linear_operator(coefficient, 0.0, dimension=2, ellipticity=ellipticity, name=name)
    return ManufacturedProblem(
        name=name,
        operator=operator,
        domain=TEST3_DOMAIN,
        boundary_g=exact.value,
        exact_solution=exact,
        metadata={"variant": variant},
    )


def check_degenerate_ellipticity(
    op: PdeOperator,
    rng: np.random.Generator,
    domain: DomainBox,
    samples: int = 100,
    tol: float = 1e-10,
) -> bool:
    """Spot-check ``F(M + P) <= F(M)`` for random symmetric M and positive semidefinite P."""
    d = op.dimension
    lower, upper = np.array(domain.lower), np.array(domain.upper)
    violations = 0
    for _ in range(samples):
        G = rng.standard_normal((d, d))
        M = G + G.T
        H = rng.standard_normal((d, d))
        P = H.T @ H
        p = rng.standard_normal(d)
        u = float(rng.standard_normal())
        x = lower + (upper - lower) * rng.random(d)
        if float(op.evaluate(M + P, p, u, x)) > float(op.evaluate(M, p, u, x)) + tol:
            violations += 1
    if violations:
        logger.warning("Operator %s failed degenerate ellipticity at %s of %s samples", op.name, violations, samples)
    return violations == 0


def check_control_ellipticity(
    controls: ControlSet,
    rng: np.random.Generator,
    domain: DomainBox,
    lambda_min: float = 0.0,
    lambda_max: float = math.inf,
    samples: int = 100,
    tol: float = 1e-12,
) -> bool:
    """Spot-check symmetry and ``-lambda_max |xi|^2 <= A xi . xi <= -lambda_min |xi|^2`` for every control."""
    d = controls.dimension
    lower, upper = np.array(domain.lower), np.array(domain.upper)
    x = lower + (upper - lower) * rng.random((samples, d))
    xi = rng.standard_normal((samples, d))
    A = controls.coefficients(x).A
    if not np.allclose(A, np.swapaxes(A, -1, -2), rtol=0.0, atol=tol):
        logger.warning("Control set has non-symmetric coefficient matrices")
        return False
    quadratic = np.einsum("...i,n...ij,...j->n...", xi, A, xi)
    norm2 = np.sum(xi * xi, axis=-1)
    scale = tol * max(1.0, float(np.abs(A).max()))
    upper_ok = np.all(quadratic <= -lambda_min * norm2 + scale * norm2)
    lower_ok = np.all(quadratic >= -lambda_max * norm2 - scale * norm2)
    return bool(upper_ok and lower_ok)


PROBLEM_NAMES = ("test1", "test2", "test3", "test3_infinity_laplacian")


def get_problem(name: str, n_phi: int | None = None, n_rot: int | None = None) -> ManufacturedProblem:
    if name == "test1":
        return make_test1()
    if name == "test2":
        defaults = get_solver_defaults()
        return make_test2(n_phi=n_phi or defaults.default_n_phi, n_rot=n_rot or defaults.default_n_rot)
    if name == "test3":
        return make_test3()
    if name == "test3_infinity_laplacian":
        return make_test3(variant="infinity_laplacian")
    raise ProblemError(f"Unknown problem {name!r}; available: {', '.join(PROBLEM_NAMES)}.")
