"""
PIANO: element-parallel majorization-minimization for multinomial logistic
regression, plus its l1-penalized and l0-constrained variants.

Each outer iteration majorizes l_MLR around W_k by a surrogate that is
separable over the d*m weights, then minimizes every element's scalar
surrogate independently (Jacobi update). Elements are solved in fixed-size
blocks by the batched scalar kernel; blocks are spread over a thread pool.
Block boundaries never depend on the thread count, so results are
bit-identical for any number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from piano_mlr.data.models import Dataset, FitConfig, WeightMatrix
from piano_mlr.tools.objective import mlr_objective, penalized_objective, score_matrix
from piano_mlr.tools.scalar_solver import (
    ScalarExpSum,
    scalar_grad_batch,
    scalar_objective_batch,
    solve_scalar_batch,
)
from piano_mlr.tools.trace import FitResult, run_outer_loop
from piano_mlr.utils.errors import ConfigError, DimensionMismatchError
from piano_mlr.utils.logger import get_logger

logger = get_logger(__name__)

ELEMENT_BLOCK = 128


@dataclass(frozen=True, eq=False)
class SurrogateContext:
    """
    Quantities fixed for one outer iteration.

    log_a[j] = -logsumexp_i(scores[j, i]) so that a_j = 1 / sum_i exp(w_i^T x_j);
    v = Y^T X does not depend on the weights and is computed once per fit.
    """

    log_a: np.ndarray
    scores: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class _ElementSolution:
    minimizers: np.ndarray
    values: np.ndarray
    gains: np.ndarray


def compute_moments(data: Dataset) -> np.ndarray:
    """v_i = sum_j y_ji x_j as an m x d matrix."""
    return data.labels.T @ data.features


def build_context(W_k: WeightMatrix, data: Dataset, v: np.ndarray) -> SurrogateContext:
    scores = score_matrix(W_k, data)
    if v.shape != (data.m, data.d):
        raise DimensionMismatchError(f"moments of shape {v.shape} do not match m={data.m}, d={data.d}")
    return SurrogateContext(log_a=-logsumexp(scores, axis=1), scores=scores, v=v)


def _block_problems(
    ctx: SurrogateContext, W_k: WeightMatrix, data: Dataset, flat_idx: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Batched element surrogates for the given flat indices.

    Terms with x_jl == 0 get log_r = -inf: they are constant in w_il and
    contribute exactly zero to both the derivative and the value.
    """
    d = data.d
    classes, feats = np.divmod(flat_idx, d)
    base = (ctx.log_a[:, None] - math.log(d) + ctx.scores).T  # m x n
    slopes = d * data.features.T[feats]
    w_k = W_k.rows[classes, feats]
    with np.errstate(invalid="ignore"):
        log_r = np.where(slopes != 0, base[classes] - slopes * w_k[:, None], -np.inf)
    return ctx.v[classes, feats], log_r, slopes


def element_subproblem(
    ctx: SurrogateContext, W_k: WeightMatrix, data: Dataset, i: int, l: int
) -> ScalarExpSum:
    """
    Scalar surrogate of element (i, l): v = v_il and one term per sample with
    x_jl != 0, log_r_j = log a_j - log d + scores_ji - d x_jl w_il^k, slope d x_jl.
    """
    if not (0 <= i < data.m and 0 <= l < data.d):
        raise DimensionMismatchError(f"element ({i}, {l}) outside {data.m}x{data.d}")
    x = data.features[:, l]
    keep = x != 0
    slopes = data.d * x[keep]
    log_r = ctx.log_a[keep] - math.log(data.d) + ctx.scores[keep, i] - slopes * W_k.rows[i, l]
    return ScalarExpSum(float(ctx.v[i, l]), log_r, slopes)


def surrogate_value(ctx: SurrogateContext, W_k: WeightMatrix, data: Dataset, W: WeightMatrix) -> float:
    """
    g(W | W_k), including the constant sum_j(-log a_j - 1) so that
    g(W_k | W_k) == l_MLR(W_k).
    """
    if W.rows.shape != W_k.rows.shape or W.d != data.d or W.m != data.m:
        raise DimensionMismatchError("surrogate arguments disagree in shape")
    d = data.d
    delta = W.rows - W_k.rows
    base = ctx.log_a[:, None] - math.log(d) + ctx.scores  # n x m
    exponents = base[:, :, None] + d * data.features[:, None, :] * delta[None, :, :]
    constant = float(np.sum(-ctx.log_a - 1.0))
    linear = float(np.sum(W.rows * ctx.v))
    return constant - linear + float(np.exp(logsumexp(exponents)))


def l1_zero_threshold(data: Dataset, W: WeightMatrix) -> float:
    """
    Smallest lambda for which every element surrogate built at W has
    |h(0)| <= 1, i.e. the l1 update returns the zero matrix.
    """
    ctx = build_context(W, data, compute_moments(data))
    flat_idx = np.arange(data.m * data.d)
    v, log_r, slopes = _block_problems(ctx, W, data, flat_idx)
    return float(np.max(np.abs(scalar_grad_batch(v, log_r, slopes, np.zeros(flat_idx.size)))))


def _blocks(count: int) -> Iterator[np.ndarray]:
    for start in range(0, count, ELEMENT_BLOCK):
        yield np.arange(start, min(start + ELEMENT_BLOCK, count))


def _solve_block(
    ctx: SurrogateContext, W_k: WeightMatrix, data: Dataset, config: FitConfig, lam: float, flat_idx: np.ndarray
) -> _ElementSolution:
    v, log_r, slopes = _block_problems(ctx, W_k, data, flat_idx)
    w_star = solve_scalar_batch(
        v, log_r, slopes, lam, config.bisection_tol, config.bracket_growth, config.weight_cap
    )
    if lam == 0:
        # Constant surrogate (zero feature column, v_il = 0): keep the incumbent
        flat = np.all(slopes == 0, axis=1) & (v == 0)
        w_star[flat] = W_k.rows.reshape(-1)[flat_idx[flat]]
    values = scalar_objective_batch(v, log_r, slopes, w_star)
    gains = scalar_objective_batch(v, log_r, slopes, np.zeros_like(w_star)) - values
    return _ElementSolution(w_star, values, gains)


def _solve_elements(
    W_k: WeightMatrix,
    data: Dataset,
    ctx: SurrogateContext,
    config: FitConfig,
    lam: float,
    executor: Optional[ThreadPoolExecutor] = None,
) -> _ElementSolution:
    blocks = list(_blocks(data.m * data.d))
    if executor is None and config.thread_count > 1:
        with ThreadPoolExecutor(max_workers=config.thread_count, thread_name_prefix="piano_worker") as pool:
            return _solve_elements(W_k, data, ctx, config, lam, pool)
    if executor is None:
        parts: List[_ElementSolution] = [_solve_block(ctx, W_k, data, config, lam, b) for b in blocks]
    else:
        parts = list(executor.map(lambda b: _solve_block(ctx, W_k, data, config, lam, b), blocks))
    return _ElementSolution(
        np.concatenate([p.minimizers for p in parts]),
        np.concatenate([p.values for p in parts]),
        np.concatenate([p.gains for p in parts]),
    )


def piano_iterate(
    W_k: WeightMatrix,
    data: Dataset,
    ctx: SurrogateContext,
    config: FitConfig,
    executor: Optional[ThreadPoolExecutor] = None,
) -> WeightMatrix:
    """
    One Jacobi sweep: every element set to the minimizer of its surrogate,
    all reading the same W_k snapshot. Applies the l1 subgradient rules when
    the config is l1-regularized, and the smooth rules otherwise.
    """
    lam = config.regularization.lam if config.regularization.kind == "l1" else 0.0
    solution = _solve_elements(W_k, data, ctx, config, lam, executor)
    return WeightMatrix.from_flat(solution.minimizers, data.m, data.d)


def l0_iterate(
    W_k: WeightMatrix,
    data: Dataset,
    ctx: SurrogateContext,
    config: FitConfig,
    executor: Optional[ThreadPoolExecutor] = None,
) -> WeightMatrix:
    """
    Unconstrained element minimizers, ranked either by surrogate value at the
    minimizer (ascending) or by decrease against w = 0 (descending); the first
    beta keep their minimizer, the rest become 0. Stable sort: ties go to the
    lower flat index.
    """
    beta = config.regularization.beta
    solution = _solve_elements(W_k, data, ctx, config, 0.0, executor)
    if config.l0_rank == "gain":
        order = np.argsort(-solution.gains, kind="stable")
    else:
        order = np.argsort(solution.values, kind="stable")
    keep = np.zeros(solution.minimizers.size, dtype=bool)
    keep[order[:beta]] = True
    clamped = np.flatnonzero(keep & (np.abs(solution.minimizers) >= config.weight_cap))
    if clamped.size:
        logger.warning(
            f"l0 step keeps {clamped.size} element(s) clamped at +-{config.weight_cap:g} "
            f"(flat indices {clamped.tolist()}); ranking '{config.l0_rank}' may not descend"
        )
    return WeightMatrix.from_flat(np.where(keep, solution.minimizers, 0.0), data.m, data.d)


def _check_fit_inputs(data: Dataset, W_0: WeightMatrix, config: FitConfig, kind: str) -> None:
    if config.regularization.kind != kind:
        raise ConfigError(f"this fit expects regularization '{kind}', got '{config.regularization.kind}'")
    if W_0.m != data.m or W_0.d != data.d:
        raise DimensionMismatchError(f"initial weights are {W_0.m}x{W_0.d}, data needs {data.m}x{data.d}")
    config.validate_for(data.m * data.d)


def _fit(
    solver: str,
    data: Dataset,
    W_0: WeightMatrix,
    config: FitConfig,
    update,
    objective,
    target_objective: Optional[float],
) -> FitResult:
    v = compute_moments(data)
    logger.info(
        f"{solver}: n={data.n} d={data.d} m={data.m} {config.regularization.describe()} "
        f"rel_tol={config.rel_tol} threads={config.thread_count}"
    )
    pool = None
    if config.thread_count > 1:
        pool = ThreadPoolExecutor(max_workers=config.thread_count, thread_name_prefix="piano_worker")
    try:

        def step(W_k: WeightMatrix, _k: int) -> WeightMatrix:
            return update(W_k, data, build_context(W_k, data, v), config, pool)

        return run_outer_loop(solver, W_0, step, objective, config, target_objective)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)


def piano_fit(
    data: Dataset, W_0: WeightMatrix, config: FitConfig, target_objective: Optional[float] = None
) -> FitResult:
    """Plain PIANO; stops on relative change of l_MLR."""
    _check_fit_inputs(data, W_0, config, "none")
    return _fit("piano", data, W_0, config, piano_iterate, lambda W: mlr_objective(W, data), target_objective)


def piano_fit_l1(
    data: Dataset, W_0: WeightMatrix, config: FitConfig, target_objective: Optional[float] = None
) -> FitResult:
    """PIANO for l_MLR + lambda ||w||_1; stops on relative change of the penalized objective."""
    _check_fit_inputs(data, W_0, config, "l1")
    return _fit(
        "piano-l1",
        data,
        W_0,
        config,
        piano_iterate,
        lambda W: penalized_objective(W, data, config),
        target_objective,
    )


def piano_fit_l0(
    data: Dataset, W_0: WeightMatrix, config: FitConfig, target_objective: Optional[float] = None
) -> FitResult:
    """PIANO under ||w||_0 <= beta; stops on relative change of plain l_MLR."""
    _check_fit_inputs(data, W_0, config, "l0")
    return _fit("piano-l0", data, W_0, config, l0_iterate, lambda W: mlr_objective(W, data), target_objective)


def fit_piano(
    data: Dataset, W_0: WeightMatrix, config: FitConfig, target_objective: Optional[float] = None
) -> FitResult:
    """Dispatch on the configured regularization."""
    kind = config.regularization.kind
    if kind == "l1":
        return piano_fit_l1(data, W_0, config, target_objective)
    if kind == "l0":
        return piano_fit_l0(data, W_0, config, target_objective)
    return piano_fit(data, W_0, config, target_objective)


def default_initial_weights(data: Dataset, config: FitConfig) -> WeightMatrix:
    """U[0, 1] entries seeded by config.seed."""
    return WeightMatrix.uniform(data.m, data.d, config.seed)


