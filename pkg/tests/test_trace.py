import math

import numpy as np
import pytest

from piano_mlr.data.models import FitConfig, TraceRecord, WeightMatrix
from piano_mlr.tools.trace import has_converged, relative_change, run_outer_loop
from piano_mlr.utils.errors import SolverError


def _halving(W, _k):
    return WeightMatrix(W.rows * 0.5)


def _squared_norm(W):
    return 1.0 + float(np.sum(W.rows**2))


def test_relative_change():
    assert relative_change(10.0, 9.0) == pytest.approx(0.1)
    assert relative_change(0.5, 0.25) == pytest.approx(0.5)
    assert relative_change(0.0, 0.0) == 0.0
    assert relative_change(1e-40, 0.0) == pytest.approx(1e-28)


def test_has_converged():
    records = [TraceRecord(0, 10.0, 0.0, 1), TraceRecord(1, 9.9995, 1.0, 1)]
    assert has_converged(records, 1e-3)
    assert not has_converged(records, 1e-6)
    assert not has_converged(records[:1], 1.0)


def test_outer_loop_records_initial_point():
    W_0 = WeightMatrix(np.full((2, 2), 4.0))
    W, trace = run_outer_loop("halving", W_0, _halving, _squared_norm, FitConfig(rel_tol=1e-6))
    assert trace[0].iter == 0
    assert trace[0].objective == _squared_norm(W_0)
    assert trace[0].nnz == 4
    assert has_converged(trace, 1e-6)
    assert W.rows[0, 0] == 4.0 * 0.5 ** trace[-1].iter
    assert all(b.wall_ms >= a.wall_ms for a, b in zip(trace, trace[1:]))


def test_outer_loop_respects_max_iterations():
    W_0 = WeightMatrix(np.full((1, 1), 1.0))
    _, trace = run_outer_loop("halving", W_0, _halving, _squared_norm, FitConfig(rel_tol=1e-15, max_outer_iters=3))
    assert len(trace) == 4


def test_outer_loop_stops_at_target():
    W_0 = WeightMatrix(np.full((1, 1), 2.0))
    _, trace = run_outer_loop("halving", W_0, _halving, _squared_norm, FitConfig(rel_tol=1e-15), target_objective=1.5)
    assert trace[-1].objective <= 1.5
    assert trace[-2].objective > 1.5

    _, immediate = run_outer_loop("halving", W_0, _halving, _squared_norm, FitConfig(), target_objective=100.0)
    assert len(immediate) == 1


def test_non_finite_objective_is_an_error():
    W_0 = WeightMatrix(np.zeros((1, 1)))
    with pytest.raises(SolverError):
        run_outer_loop("broken", W_0, _halving, lambda W: math.nan, FitConfig())
