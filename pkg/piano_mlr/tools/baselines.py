"""
Reference solvers used to cross-check PIANO's fixed points: IRLS (Newton),
Bohning-bound MM, cyclic coordinate soft-threshold MM for l1, and an
exhaustive l0 oracle for tiny problems. All single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from piano_mlr.data.models import Dataset, FitConfig, Regularization, WeightMatrix
from piano_mlr.tools.objective import (
    HESSIAN_MAX_DIM,
    mlr_gradient,
    mlr_hessian,
    mlr_objective,
    penalized_objective,
    softmax_posteriors,
)
from piano_mlr.tools.trace import FitResult, run_outer_loop
from piano_mlr.utils.errors import ConfigError, DimensionMismatchError, SizeGuardError, SolverError
from piano_mlr.utils.logger import get_logger

logger = get_logger(__name__)

RIDGE_SCALE = 1e-8
MAX_STEP_HALVINGS = 30
BRUTE_FORCE_MAX_DIM = 12
BRUTE_FORCE_MAX_BETA = 4

RestrictedSolver = Callable[[Dataset, Tuple[int, ...]], float]


def soft_threshold(a, b):
    """sign(a) * max(0, |a| - b); exact zeros inside [-b, b]."""
    return np.sign(a) * np.maximum(np.abs(a) - b, 0.0)


def _ridge(matrix: np.ndarray) -> float:
    size = matrix.shape[0]
    trace = float(np.trace(matrix))
    return max(RIDGE_SCALE * trace / size, np.finfo(np.float64).tiny) if size else 0.0


def _factor(matrix: np.ndarray, what: str):
    try:
        return cho_factor(matrix + _ridge(matrix) * np.eye(matrix.shape[0]))
    except LinAlgError as e:
        raise SolverError(f"{what}: Cholesky factorization failed: {e}") from e


def _check_inputs(data: Dataset, W_0: WeightMatrix) -> None:
    if W_0.m != data.m or W_0.d != data.d:
        raise DimensionMismatchError(f"initial weights are {W_0.m}x{W_0.d}, data needs {data.m}x{data.d}")
    dm = data.m * data.d
    if dm > HESSIAN_MAX_DIM:
        raise SizeGuardError(f"d*m={dm} exceeds the dense-matrix guard {HESSIAN_MAX_DIM}")


@dataclass(frozen=True, eq=False)
class BohningBound:
    """
    B = 1/2 (I_m - 11^T/m) kron sum_j x_j x_j^T, and a Cholesky factor of
    B + eps I with eps = 1e-8 trace(B) / dm (B itself has rank (m-1)d).
    """

    B: np.ndarray
    ridge: float
    factor: tuple

    @classmethod
    def build(cls, data: Dataset) -> "BohningBound":
        m = data.m
        class_part = 0.5 * (np.eye(m) - np.ones((m, m)) / m)
        B = np.kron(class_part, data.features.T @ data.features)
        return cls(B=B, ridge=_ridge(B), factor=_factor(B, "bohning"))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self.factor, rhs)

    @property
    def diagonal(self) -> np.ndarray:
        """Ridged per-coordinate curvature B_ii + eps."""
        return np.diag(self.B) + self.ridge


def irls_fit(
    data: Dataset,
    W_0: WeightMatrix,
    config: FitConfig,
    support: Optional[Sequence[int]] = None,
    target_objective: Optional[float] = None,
) -> FitResult:
    """
    Newton steps with the exact Hessian ridged by 1e-8 trace/dm.

    With `support`, only those flat coordinates move (the rest stay as in
    W_0), which solves MLR restricted to that support when W_0 is zero off it.
    A step that raises the objective is halved until it does not.
    """
    _check_inputs(data, W_0)
    if config.regularization.kind != "none":
        raise ConfigError("irls supports only unregularized fits")
    idx = np.arange(data.m * data.d) if support is None else np.asarray(sorted(support), dtype=np.int64)

    def objective(W: WeightMatrix) -> float:
        return mlr_objective(W, data)

    def step(W_k: WeightMatrix, k: int) -> WeightMatrix:
        if idx.size == 0:
            return W_k
        grad = mlr_gradient(W_k, data)[idx]
        hessian = mlr_hessian(W_k, data)[np.ix_(idx, idx)]
        direction = cho_solve(_factor(hessian, "irls"), grad)
        current = objective(W_k)
        flat = W_k.flatten()
        scale = 1.0
        for _ in range(MAX_STEP_HALVINGS):
            trial = flat.copy()
            trial[idx] -= scale * direction
            candidate = WeightMatrix.from_flat(trial, data.m, data.d)
            if objective(candidate) <= current:
                return candidate
            scale *= 0.5
        logger.warning(f"irls: no descent along the Newton direction at iteration {k}")
        return W_k

    return run_outer_loop("irls", W_0, step, objective, config, target_objective)


def bohning_mm_fit(
    data: Dataset, W_0: WeightMatrix, config: FitConfig, target_objective: Optional[float] = None
) -> FitResult:
    """Fixed-curvature MM: w <- w - (B + eps I)^{-1} grad, with the factorization built once."""
    _check_inputs(data, W_0)
    if config.regularization.kind != "none":
        raise ConfigError("bohning supports only unregularized fits")
    bound = BohningBound.build(data)

    def step(W_k: WeightMatrix, _k: int) -> WeightMatrix:
        flat = W_k.flatten() - bound.solve(mlr_gradient(W_k, data))
        return WeightMatrix.from_flat(flat, data.m, data.d)

    return run_outer_loop("bohning", W_0, step, lambda W: mlr_objective(W, data), config, target_objective)


def coord_mm_l1_fit(
    data: Dataset, W_0: WeightMatrix, config: FitConfig, target_objective: Optional[float] = None
) -> FitResult:
    """
    Cyclic coordinate MM for l_MLR + lambda ||w||_1. Each coordinate, in
    class-major order, is set to soft(w - r/B_ii, lambda/B_ii) with r the
    partial derivative at the current (freshest) iterate.
    """
    _check_inputs(data, W_0)
    if config.regularization.kind != "l1":
        raise ConfigError("coord-l1 requires l1 regularization")
    lam = config.regularization.lam
    X, Y = data.features, data.labels
    m, d = data.m, data.d
    curvature = BohningBound.build(data).diagonal

    def step(W_k: WeightMatrix, _k: int) -> WeightMatrix:
        W = np.array(W_k.rows, copy=True)
        scores = X @ W.T
        for i in range(m):
            for l in range(d):
                b_ii = curvature[i * d + l]
                probs = softmax_posteriors(scores)
                r = float(np.dot(probs[:, i] - Y[:, i], X[:, l]))
                new = float(soft_threshold(W[i, l] - r / b_ii, lam / b_ii))
                delta = new - W[i, l]
                if delta != 0.0:
                    scores[:, i] += delta * X[:, l]
                    W[i, l] = new
        return WeightMatrix(W)

    return run_outer_loop(
        "coord-l1", W_0, step, lambda W: penalized_objective(W, data, config), config, target_objective
    )


class L0Solution(NamedTuple):
    support: frozenset
    objective: float


def _irls_restricted(data: Dataset, support: Tuple[int, ...]) -> float:
    config = FitConfig(regularization=Regularization.none(), rel_tol=1e-12, max_outer_iters=100)
    W, _ = irls_fit(data, WeightMatrix.zeros(data.m, data.d), config, support=support)
    return mlr_objective(W, data)


def l0_brute_force(
    data: Dataset, beta: int, restricted_solver: Optional[RestrictedSolver] = None
) -> L0Solution:
    """
    Best objective over every support of size <= beta, each solved by
    `restricted_solver` (IRLS on the support, from zero, by default).
    """
    dm = data.m * data.d
    if dm > BRUTE_FORCE_MAX_DIM or beta > BRUTE_FORCE_MAX_BETA:
        raise SizeGuardError(
            f"l0 enumeration guarded to d*m <= {BRUTE_FORCE_MAX_DIM} and beta <= {BRUTE_FORCE_MAX_BETA}, "
            f"got d*m={dm}, beta={beta}"
        )
    if beta < 0:
        raise ConfigError(f"beta must be nonnegative, got {beta}")
    solver = restricted_solver or _irls_restricted
    best = L0Solution(frozenset(), mlr_objective(WeightMatrix.zeros(data.m, data.d), data))
    for size in range(1, min(beta, dm) + 1):
        for support in combinations(range(dm), size):
            value = solver(data, support)
            if value < best.objective:
                best = L0Solution(frozenset(support), value)
    logger.info(f"l0 brute force: beta={beta} best support={sorted(best.support)} objective={best.objective:.10g}")
    return best


def fit_baseline(
    solver: str,
    data: Dataset,
    W_0: WeightMatrix,
    config: FitConfig,
    target_objective: Optional[float] = None,
) -> FitResult:
    fits = {"irls": irls_fit, "bohning": bohning_mm_fit, "coord-l1": coord_mm_l1_fit}
    if solver not in fits:
        raise ConfigError(f"unknown baseline solver '{solver}'")
    return fits[solver](data, W_0, config, target_objective=target_objective)
