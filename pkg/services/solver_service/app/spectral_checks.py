"""Dense matrix representations of the difference operators and matrix-inequality checks.

Only meant for small grids: every matrix is assembled column by column by
applying the batched stencils to unit vectors with homogeneous Dirichlet data
and the auxiliary ghost closure, exactly as the residual assembly sees them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import linalg

from app.grid import GridFunction, GridSpec
from app.scheme import ghost_fill
from app.stencil import interior_hessians, interior_second_diff

logger = logging.getLogger(__name__)

MAX_DENSE_UNKNOWNS = 400
PSD_BOUNDARY_TOL = 1e-10
SYMMETRY_TOL = 1e-13


class SpectralCheckError(ValueError):
    pass


class OperatorLabel(str, Enum):
    WIDE = "A_i"  # -delta^2 with step 2h, ghost closure folded in
    NARROW = "L_i"  # -delta^2 with step h, Dirichlet
    MOMENT = "moment_ij"  # (D_tilde^2 - D_hat^2)_ij
    TILDE = "tilde_ij"
    HAT = "hat_ij"


class SpdStatus(str, Enum):
    SPD = "spd"
    PSD_BOUNDARY = "psd_boundary"
    INDEFINITE = "indefinite"
    NON_SYMMETRIC = "non_symmetric"


class LemmaOutcome(str, Enum):
    HELD = "held"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass(frozen=True)
class OperatorMatrix:
    label: OperatorLabel
    axes: tuple[int, ...]
    entries: np.ndarray

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def apply(self, U: GridFunction) -> np.ndarray:
        return (self.entries @ U.interior.reshape(-1)).reshape(U.grid.interior_shape)


@dataclass(frozen=True)
class SpdCheck:
    status: SpdStatus
    min_eig: float
    symmetric: bool

    @property
    def is_spd(self) -> bool:
        return self.status is SpdStatus.SPD


@dataclass
class LemmaTally:
    held: int = 0
    failed: int = 0
    skipped: int = 0
    failures: list[str] = field(default_factory=list)

    def record(self, outcome: LemmaOutcome, note: str = "") -> LemmaOutcome:
        if outcome is LemmaOutcome.HELD:
            self.held += 1
        elif outcome is LemmaOutcome.FAILED:
            self.failed += 1
            self.failures.append(note)
        else:
            self.skipped += 1
        return outcome

    @property
    def tested(self) -> int:
        return self.held + self.failed


@dataclass(frozen=True)
class CorollaryScan:
    outcome: LemmaOutcome
    largest_holding_tau: float | None
    smallest_failing_tau: float | None
    taus: tuple[float, ...] = ()


def _apply(U: GridFunction, label: OperatorLabel, axes: tuple[int, ...]) -> np.ndarray:
    if label is OperatorLabel.WIDE:
        return -interior_second_diff(U, axes[0], width=2)
    if label is OperatorLabel.NARROW:
        return -interior_second_diff(U, axes[0], width=1)
    hessians = interior_hessians(U)
    i, j = axes
    if label is OperatorLabel.MOMENT:
        return hessians.tilde[..., i, j] - hessians.hat[..., i, j]
    if label is OperatorLabel.TILDE:
        return hessians.tilde[..., i, j]
    return hessians.hat[..., i, j]


def build_operator_matrix(grid: GridSpec, label: OperatorLabel | str, i: int, j: int | None = None) -> OperatorMatrix:
    label = OperatorLabel(label)
    count = grid.interior_count
    if count > MAX_DENSE_UNKNOWNS:
        raise SpectralCheckError(f"Grid {grid.sizes} has {count} unknowns; dense checks allow at most {MAX_DENSE_UNKNOWNS}.")
    if label in (OperatorLabel.WIDE, OperatorLabel.NARROW):
        axes: tuple[int, ...] = (i,)
    else:
        axes = (i, i if j is None else j)

    entries = np.zeros((count, count))
    basis = GridFunction.zeros(grid)
    for column in range(count):
        unit = np.zeros(count)
        unit[column] = 1.0
        basis.set_interior_vector(unit)
        entries[:, column] = _apply(ghost_fill(basis), label, axes).reshape(-1)
    logger.debug("Assembled %s%s on grid %s", label.value, axes, grid.sizes)
    return OperatorMatrix(label=label, axes=axes, entries=entries)


def check_spd(M: OperatorMatrix | np.ndarray) -> SpdCheck:
    entries = M.entries if isinstance(M, OperatorMatrix) else np.asarray(M, dtype=np.float64)
    scale = float(np.max(np.abs(entries))) if entries.size else 0.0
    symmetric = bool(np.allclose(entries, entries.T, rtol=0.0, atol=SYMMETRY_TOL * max(scale, 1e-300)))
    if not symmetric:
        return SpdCheck(status=SpdStatus.NON_SYMMETRIC, min_eig=float("nan"), symmetric=False)

    eigenvalues = linalg.eigvalsh((entries + entries.T) / 2.0)
    min_eig = float(eigenvalues[0]) if eigenvalues.size else 0.0
    norm = float(np.max(np.abs(eigenvalues))) if eigenvalues.size else 0.0
    if min_eig > 0.0:
        status = SpdStatus.SPD
    elif min_eig > -PSD_BOUNDARY_TOL * norm or norm == 0.0:
        status = SpdStatus.PSD_BOUNDARY
    else:
        status = SpdStatus.INDEFINITE
    return SpdCheck(status=status, min_eig=min_eig, symmetric=True)


def _is_spd(matrix: np.ndarray) -> bool:
    return check_spd(matrix).is_spd


def _is_orthogonal(Q: np.ndarray, tol: float = 1e-10) -> bool:
    return bool(np.allclose(Q.T @ Q, np.eye(Q.shape[0]), rtol=0.0, atol=tol))


def lemma_a1(A: np.ndarray, B: np.ndarray, Q: np.ndarray) -> LemmaOutcome:
    """``A - Q^T B Q`` SPD with Q orthogonal implies ``A - B`` SPD."""
    A, B, Q = (np.asarray(m, dtype=np.float64) for m in (A, B, Q))
    if not (_is_spd(A) and _is_orthogonal(Q)) or not (_is_spd(B) or not np.any(B)):
        return LemmaOutcome.SKIPPED
    if not _is_spd(A - Q.T @ B @ Q):
        return LemmaOutcome.SKIPPED
    return LemmaOutcome.HELD if _is_spd(A - B) else LemmaOutcome.FAILED


def lemma_a3(A: np.ndarray, F_mat: np.ndarray, sigma: float, rtol: float = 1e-12) -> LemmaOutcome:
    """``||sigma I - F A||_2 <= sigma`` once ``sigma`` exceeds the spectrum of ``R A R^T`` (``F = R^T R``)."""
    A, F_mat = np.asarray(A, dtype=np.float64), np.asarray(F_mat, dtype=np.float64)
    if not (_is_spd(A) and _is_spd(F_mat)):
        return LemmaOutcome.SKIPPED
    R = linalg.cholesky(F_mat)
    largest = float(linalg.eigvalsh(R @ A @ R.T)[-1])
    if not sigma > largest:
        return LemmaOutcome.SKIPPED
    norm = float(np.linalg.norm(sigma * np.eye(A.shape[0]) - F_mat @ A, 2))
    return LemmaOutcome.HELD if norm <= sigma * (1.0 + rtol) else LemmaOutcome.FAILED


def _bound_holds(B: np.ndarray, C: np.ndarray, tau: float, vectors: np.ndarray, rtol: float) -> bool:
    lhs = np.linalg.norm((B - tau * C) @ vectors, axis=0)
    rhs = np.linalg.norm(B @ vectors, axis=0)
    return bool(np.all(lhs <= rhs * (1.0 + rtol)))


def corollary_a1(
    A: np.ndarray,
    B: np.ndarray,
    F_mat: np.ndarray,
    n_tau: int = 30,
    rng: np.random.Generator | None = None,
    n_vectors: int = 200,
    rtol: float = 1e-12,
) -> CorollaryScan:
    """Scan ``tau`` down a halving sequence for ``||(B - tau F A) x|| <= ||B x||``.

    Sampled unit vectors are complemented by the eigenvectors of
    ``sym(B^T F A)``, whose smallest eigenvalue decides the bound as ``tau -> 0``.
    """
    A, B, F_mat = (np.asarray(m, dtype=np.float64) for m in (A, B, F_mat))
    if not (_is_spd(A) and _is_spd(B) and _is_spd(F_mat)):
        return CorollaryScan(outcome=LemmaOutcome.SKIPPED, largest_holding_tau=None, smallest_failing_tau=None)
    rng = rng or np.random.default_rng(0)
    n = A.shape[0]
    C = F_mat @ A

    sampled = rng.standard_normal((n, n_vectors))
    sampled /= np.linalg.norm(sampled, axis=0)
    cross = B.T @ C
    _, critical = linalg.eigh((cross + cross.T) / 2.0)
    vectors = np.hstack([sampled, critical])

    tau_max = 2.0 * float(np.linalg.norm(B, 2)) / float(np.linalg.norm(C, 2))
    taus = tuple(tau_max * 0.5**k for k in range(n_tau))
    holds = [_bound_holds(B, C, tau, vectors, rtol) for tau in taus]

    failing = [tau for tau, ok in zip(taus, holds) if not ok]
    largest = None
    for tau, ok in zip(reversed(taus), reversed(holds)):
        if not ok:
            break
        largest = tau
    outcome = LemmaOutcome.HELD if holds[-1] else LemmaOutcome.FAILED
    return CorollaryScan(
        outcome=outcome,
        largest_holding_tau=largest,
        smallest_failing_tau=min(failing) if failing else None,
        taus=taus,
    )


def lemma_a2(A: np.ndarray, B: np.ndarray, n_tau: int = 30, rng: np.random.Generator | None = None) -> CorollaryScan:
    """``||(B - tau A) x|| <= ||B x||`` for small ``tau``: the identity-weight case of the corollary."""
    A = np.asarray(A, dtype=np.float64)
    return corollary_a1(A, B, np.eye(A.shape[0]), n_tau=n_tau, rng=rng)


def random_spd(rng: np.random.Generator, n: int, shift: float = 1e-3) -> np.ndarray:
    G = rng.standard_normal((n, n))
    return G.T @ G + shift * np.eye(n)


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def random_commuting_spd(
    rng: np.random.Generator,
    n: int,
    count: int,
    basis: np.ndarray | None = None,
    spectrum: tuple[float, float] = (0.1, 10.0),
) -> list[np.ndarray]:
    """SPD matrices sharing one orthogonal eigenbasis, like tensor-product difference matrices."""
    V = random_orthogonal(rng, n) if basis is None else basis
    return [V @ np.diag(rng.uniform(*spectrum, size=n)) @ V.T for _ in range(count)]


def run_lemma_suite(rng: np.random.Generator, instances: int = 100, sizes: tuple[int, int] = (2, 20)) -> dict[str, LemmaTally]:
    """Randomized checks on commuting families; keeps drawing until ``instances`` pass the preconditions."""
    tallies = {name: LemmaTally() for name in ("lemma_a1", "lemma_a2", "lemma_a3", "corollary_a1")}
    attempts = 0
    while min(tally.tested for tally in tallies.values()) < instances and attempts < 20 * instances:
        attempts += 1
        n = int(rng.integers(sizes[0], sizes[1] + 1))
        V = random_orthogonal(rng, n)
        A, B, F_mat = random_commuting_spd(rng, n, 3, basis=V)

        Q = V @ np.diag(rng.choice([-1.0, 1.0], size=n)) @ V.T
        shifted = Q.T @ B @ Q + random_commuting_spd(rng, n, 1, basis=V)[0]
        tallies["lemma_a1"].record(lemma_a1(shifted, B, Q), f"n={n}")

        tallies["lemma_a2"].record(lemma_a2(A, B, rng=rng).outcome, f"n={n}")

        R = linalg.cholesky(F_mat)
        sigma = 1.01 * float(linalg.eigvalsh(R @ A @ R.T)[-1])
        tallies["lemma_a3"].record(lemma_a3(A, F_mat, sigma), f"n={n}")

        tallies["corollary_a1"].record(corollary_a1(A, B, F_mat, rng=rng).outcome, f"n={n}")

    for name, tally in tallies.items():
        logger.info("%s: held=%s failed=%s skipped=%s", name, tally.held, tally.failed, tally.skipped)
    return tallies
