"""
One-dimensional solver for f(w) = -w*v + sum_j r_j * exp(x_j * w) (+ lam * |w|).

f' is nondecreasing, so the minimizer is found by picking the half-line
from the sign of f'(0), growing a bracket geometrically until f' changes
sign, and bisecting. The same kernel runs on a whole batch of problems at
once: each row freezes as soon as its own bracket is done, so a row's
answer never depends on which other rows share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from piano_mlr.utils.errors import BracketError, ConfigError

DEFAULT_TOL = 1e-8
DEFAULT_GROWTH = 2.0
DEFAULT_CAP = 1e3


@dataclass(frozen=True, eq=False)
class ScalarExpSum:
    """
    Generic scalar subproblem. Coefficients r_j live in log space (log_r) so
    that exp of large score differences never has to be materialized.
    """

    v: float
    log_r: np.ndarray
    slopes: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        log_r = np.asarray(self.log_r, dtype=np.float64).reshape(-1)
        slopes = np.asarray(self.slopes, dtype=np.float64).reshape(-1)
        if log_r.shape != slopes.shape:
            raise ConfigError(f"{log_r.size} coefficients for {slopes.size} slopes")
        if not (np.all(np.isfinite(log_r)) and np.all(np.isfinite(slopes)) and np.isfinite(self.v)):
            raise ConfigError("scalar problem coefficients must be finite")
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if log_r.size == 0 and self.v != 0:
            raise ConfigError("a scalar problem without terms must have v = 0")
        object.__setattr__(self, "v", float(self.v))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "log_r", log_r)
        object.__setattr__(self, "slopes", slopes)

    @classmethod
    def from_terms(cls, v: float, terms: Iterable[Tuple[float, float]], lam: float = 0.0) -> "ScalarExpSum":
        pairs = list(terms)
        log_r = [p[0] for p in pairs]
        slopes = [p[1] for p in pairs]
        return cls(v, np.array(log_r, dtype=np.float64), np.array(slopes, dtype=np.float64), lam)

    @classmethod
    def from_coefficients(cls, v: float, r, slopes, lam: float = 0.0) -> "ScalarExpSum":
        """Build from plain positive coefficients r_j."""
        r = np.asarray(r, dtype=np.float64)
        if np.any(r <= 0):
            raise ConfigError("coefficients r_j must be positive")
        return cls(v, np.log(r), np.asarray(slopes, dtype=np.float64), lam)

    @property
    def terms(self) -> List[Tuple[float, float]]:
        return list(zip(self.log_r.tolist(), self.slopes.tolist()))

    def _rows(self):
        return np.array([self.v]), self.log_r[None, :], self.slopes[None, :]


# ============================================================================
# BATCHED KERNEL
# ============================================================================


def scalar_grad_batch(v: np.ndarray, log_r: np.ndarray, slopes: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Smooth derivative per row: -v + sum_j slope_j * exp(log_r_j + slope_j * w). Saturates to +-inf."""
    with np.errstate(over="ignore", invalid="ignore"):
        terms = np.exp(log_r + slopes * w[:, None]) * slopes
    return np.sum(terms, axis=1) - v


def scalar_objective_batch(
    v: np.ndarray, log_r: np.ndarray, slopes: np.ndarray, w: np.ndarray, lam: float = 0.0
) -> np.ndarray:
    with np.errstate(over="ignore"):
        total = np.sum(np.exp(log_r + slopes * w[:, None]), axis=1)
    return total - w * v + lam * np.abs(w)


def bracket_batch(
    v: np.ndarray, log_r: np.ndarray, slopes: np.ndarray, growth: float, cap: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Grow |b| through 1, growth, growth**2, ... and finally cap until the
    derivative at b has the opposite sign of the derivative at 0.

    Returns (b, found, direction). direction is -1 when the root lies left
    of 0, +1 when right and 0 when f'(0) == 0 (then b = 0 and found).
    """
    k = v.shape[0]
    g0 = scalar_grad_batch(v, log_r, slopes, np.zeros(k))
    direction = -np.sign(g0)
    end = np.zeros(k)
    found = direction == 0
    active = ~found
    magnitude = 1.0
    while active.any():
        idx = np.flatnonzero(active)
        step = min(magnitude, cap)
        candidate = direction[idx] * step
        g = scalar_grad_batch(v[idx], log_r[idx], slopes[idx], candidate)
        crossed = g * direction[idx] >= 0
        hit = idx[crossed]
        end[hit] = candidate[crossed]
        found[hit] = True
        active[hit] = False
        if step >= cap:
            break
        magnitude *= growth
    return end, found, direction


def bisect_batch(
    v: np.ndarray, log_r: np.ndarray, slopes: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float
) -> np.ndarray:
    """Bisect each row on [lo, hi] (f'(lo) <= 0 <= f'(hi)) until the width is below tol."""
    lo = np.array(lo, dtype=np.float64, copy=True)
    hi = np.array(hi, dtype=np.float64, copy=True)
    active = (hi - lo) >= tol
    while active.any():
        idx = np.flatnonzero(active)
        mid = 0.5 * (lo[idx] + hi[idx])
        g = scalar_grad_batch(v[idx], log_r[idx], slopes[idx], mid)
        right = g > 0
        stalled = (mid == lo[idx]) | (mid == hi[idx])
        hi[idx[right]] = mid[right]
        lo[idx[~right]] = mid[~right]
        active[idx] = ((hi[idx] - lo[idx]) >= tol) & ~stalled
    return 0.5 * (lo + hi)


def _solve_smooth_batch(v, log_r, slopes, tol, growth, cap) -> np.ndarray:
    end, found, direction = bracket_batch(v, log_r, slopes, growth, cap)
    lo = np.minimum(end, 0.0)
    hi = np.maximum(end, 0.0)
    w = bisect_batch(v, log_r, slopes, lo, hi, tol)
    # No sign change inside [-cap, cap]: the infimum is at infinity, clamp
    w[~found] = direction[~found] * cap
    return w


def solve_scalar_batch(
    v: np.ndarray,
    log_r: np.ndarray,
    slopes: np.ndarray,
    lam: float = 0.0,
    tol: float = DEFAULT_TOL,
    growth: float = DEFAULT_GROWTH,
    cap: float = DEFAULT_CAP,
) -> np.ndarray:
    """
    Minimize every row's problem. With lam > 0 the l1 subgradient cases apply:
    rows with |h(0)| <= 1 return exactly 0.0, the others solve h(w) = +-1 on the
    half-line fixed by the sign of h(0).
    """
    v = np.asarray(v, dtype=np.float64)
    if lam == 0:
        return _solve_smooth_batch(v, log_r, slopes, tol, growth, cap)

    h0 = scalar_grad_batch(v, log_r, slopes, np.zeros(v.shape[0])) / lam
    w = np.zeros(v.shape[0])
    # h(0) > 1: subgradient -1, root on the negative side
    left = np.flatnonzero(h0 > 1)
    if left.size:
        w[left] = _solve_smooth_batch(v[left] + lam, log_r[left], slopes[left], tol, growth, cap)
    # h(0) < -1: subgradient +1, root on the positive side
    right = np.flatnonzero(h0 < -1)
    if right.size:
        w[right] = _solve_smooth_batch(v[right] - lam, log_r[right], slopes[right], tol, growth, cap)
    return w


# ============================================================================
# SINGLE-PROBLEM API
# ============================================================================


def scalar_grad(p: ScalarExpSum, w: float) -> float:
    v, log_r, slopes = p._rows()
    return float(scalar_grad_batch(v, log_r, slopes, np.array([float(w)]))[0])


def scalar_objective(p: ScalarExpSum, w: float) -> float:
    v, log_r, slopes = p._rows()
    return float(scalar_objective_batch(v, log_r, slopes, np.array([float(w)]), p.lam)[0])


def bracket_root(
    p: ScalarExpSum, growth: float = DEFAULT_GROWTH, cap: float = DEFAULT_CAP
) -> Optional[Tuple[float, float]]:
    """
    Smooth-case bracket (a, b) with a = 0 and f'(b) of the opposite sign to
    f'(0). (0, 0) when f'(0) == 0; None (no root) when |b| reaches cap
    without a sign change.
    """
    v, log_r, slopes = p._rows()
    end, found, _ = bracket_batch(v, log_r, slopes, growth, cap)
    if not found[0]:
        return None
    return 0.0, float(end[0])


def bisect(p: ScalarExpSum, a: float, b: float, tol: float = DEFAULT_TOL) -> float:
    """Root of the smooth derivative inside [a, b]; the derivative must change sign there."""
    lo, hi = min(a, b), max(a, b)
    if lo == hi:
        return float(lo)
    g_lo, g_hi = scalar_grad(p, lo), scalar_grad(p, hi)
    if g_lo > 0 or g_hi < 0:
        raise BracketError(f"derivative does not change sign on [{lo}, {hi}]: f'={g_lo:.6g}, {g_hi:.6g}")
    v, log_r, slopes = p._rows()
    return float(bisect_batch(v, log_r, slopes, np.array([lo]), np.array([hi]), tol)[0])


def solve_scalar(
    p: ScalarExpSum, tol: float = DEFAULT_TOL, growth: float = DEFAULT_GROWTH, cap: float = DEFAULT_CAP
) -> float:
    """Minimizer of p: bracket + bisection, or the l1 rules when p.lam > 0."""
    v, log_r, slopes = p._rows()
    return float(solve_scalar_batch(v, log_r, slopes, p.lam, tol, growth, cap)[0])


def solve_scalar_l1(
    p: ScalarExpSum, tol: float = DEFAULT_TOL, growth: float = DEFAULT_GROWTH, cap: float = DEFAULT_CAP
) -> float:
    if not p.lam > 0:
        raise ConfigError(f"solve_scalar_l1 needs lambda > 0, got {p.lam}")
    return solve_scalar(p, tol, growth, cap)
