"""
Convergence traces and the outer loop shared by every solver.
"""

import math
from time import perf_counter
from typing import Callable, List, Optional, Sequence, Tuple

from piano_mlr.data.models import FitConfig, TraceRecord, WeightMatrix
from piano_mlr.utils.errors import SolverError
from piano_mlr.utils.logger import get_logger

logger = get_logger(__name__)

StepFn = Callable[[WeightMatrix, int], WeightMatrix]
ObjectiveFn = Callable[[WeightMatrix], float]
FitResult = Tuple[WeightMatrix, List[TraceRecord]]

# Denominator floor once the objective underflows toward 0
OBJECTIVE_FLOOR = 1e-12


def relative_change(previous: float, current: float) -> float:
    """|current - previous| / |previous|, with |previous| floored at OBJECTIVE_FLOOR."""
    return abs(current - previous) / max(abs(previous), OBJECTIVE_FLOOR)


def has_converged(trace: Sequence[TraceRecord], rel_tol: float) -> bool:
    """True when the last two records satisfy the relative-change stopping rule."""
    if len(trace) < 2:
        return False
    return relative_change(trace[-2].objective, trace[-1].objective) <= rel_tol


class TraceRecorder:
    """Collects one TraceRecord per iteration with wall time measured from construction."""

    def __init__(self, solver: str):
        self.solver = solver
        self.records: List[TraceRecord] = []
        self._start = perf_counter()

    def elapsed_ms(self) -> float:
        return (perf_counter() - self._start) * 1000.0

    def record(self, weights: WeightMatrix, objective: float) -> TraceRecord:
        iteration = len(self.records)
        if not math.isfinite(objective):
            raise SolverError(f"{self.solver}: objective became {objective} at iteration {iteration}")
        record = TraceRecord(iteration, float(objective), self.elapsed_ms(), weights.nnz)
        self.records.append(record)
        return record


def run_outer_loop(
    solver: str,
    W_0: WeightMatrix,
    step: StepFn,
    objective: ObjectiveFn,
    config: FitConfig,
    target_objective: Optional[float] = None,
) -> FitResult:
    """
    Iterate W <- step(W, k) until the relative objective change drops to
    config.rel_tol, config.max_outer_iters is hit, or the objective reaches
    target_objective. Iteration 0 records W_0.
    """
    recorder = TraceRecorder(solver)
    W = W_0
    first = recorder.record(W, objective(W))
    logger.debug(f"{solver}: iter=0 objective={first.objective:.12g}")
    if target_objective is not None and first.objective <= target_objective:
        return W, recorder.records

    for k in range(1, config.max_outer_iters + 1):
        W = step(W, k)
        current = recorder.record(W, objective(W))
        logger.debug(f"{solver}: iter={k} objective={current.objective:.12g} nnz={current.nnz}")
        if target_objective is not None and current.objective <= target_objective:
            break
        if has_converged(recorder.records, config.rel_tol):
            break

    last = recorder.records[-1]
    status = "converged" if has_converged(recorder.records, config.rel_tol) else "stopped"
    logger.info(
        f"{solver}: {status} after {last.iter} iterations, objective={last.objective:.10g}, "
        f"nnz={last.nnz}, wall={last.wall_ms:.1f}ms"
    )
    return W, recorder.records
