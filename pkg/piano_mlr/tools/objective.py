"""
MLR objective, gradient and Hessian with log-sum-exp stabilized softmax.

All functions are pure; reductions over samples run in a fixed order so
repeated calls on the same inputs are bit-identical.
"""

import numpy as np
from scipy.special import logsumexp, softmax

from piano_mlr.data.models import Dataset, FitConfig, WeightMatrix
from piano_mlr.utils.errors import DimensionMismatchError, SizeGuardError

HESSIAN_MAX_DIM = 5000


def _check_dims(W: WeightMatrix, data: Dataset) -> None:
    if W.d != data.d or W.m != data.m:
        raise DimensionMismatchError(f"weights are {W.m}x{W.d} but data has m={data.m}, d={data.d}")


def class_scores(W: WeightMatrix, x: np.ndarray) -> np.ndarray:
    """Scores w_i^T x for every class i."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (W.d,):
        raise DimensionMismatchError(f"feature vector of shape {x.shape} does not match d={W.d}")
    return W.rows @ x


def score_matrix(W: WeightMatrix, data: Dataset) -> np.ndarray:
    """n x m matrix of w_i^T x_j."""
    _check_dims(W, data)
    return data.features @ W.rows.T


def softmax_posteriors(scores: np.ndarray) -> np.ndarray:
    """
    Class posteriors from scores along the last axis.

    scipy's softmax subtracts the row maximum first, so scores of +-1e4
    stay finite.
    """
    return softmax(np.asarray(scores, dtype=np.float64), axis=-1)


def per_sample_losses(W: WeightMatrix, data: Dataset) -> np.ndarray:
    """-log p_j(y_j) for each sample; every entry is >= 0 up to rounding."""
    scores = score_matrix(W, data)
    return logsumexp(scores, axis=1) - np.sum(data.labels * scores, axis=1)


def mlr_objective(W: WeightMatrix, data: Dataset) -> float:
    """Negative log-likelihood of the multinomial logistic model."""
    return float(np.sum(per_sample_losses(W, data)))


def penalized_objective(W: WeightMatrix, data: Dataset, config: FitConfig) -> float:
    """l_MLR plus lambda * ||w||_1 for l1; plain l_MLR otherwise (l0 is a constraint)."""
    value = mlr_objective(W, data)
    reg = config.regularization
    if reg.kind == "l1":
        value += reg.lam * float(np.sum(np.abs(W.rows)))
    return value


def mlr_gradient(W: WeightMatrix, data: Dataset) -> np.ndarray:
    """Gradient in flatten() order: block i is sum_j (p_ji - y_ji) x_j."""
    residual = softmax_posteriors(score_matrix(W, data)) - data.labels
    return (residual.T @ data.features).reshape(-1)


def mlr_hessian(W: WeightMatrix, data: Dataset) -> np.ndarray:
    """
    Dense Hessian sum_j (diag(p_j) - p_j p_j^T) kron x_j x_j^T.

    Only for tests and IRLS; raises SizeGuardError when d*m > HESSIAN_MAX_DIM.
    """
    dm = W.d * W.m
    if dm > HESSIAN_MAX_DIM:
        raise SizeGuardError(f"Hessian of size {dm}x{dm} exceeds the guard d*m <= {HESSIAN_MAX_DIM}")
    probs = softmax_posteriors(score_matrix(W, data))
    X = data.features
    m, d = W.m, W.d
    hessian = np.empty((dm, dm))
    for i in range(m):
        for k in range(i, m):
            weight = (probs[:, i] if i == k else 0.0) - probs[:, i] * probs[:, k]
            block = X.T @ (X * weight[:, None])
            if k == i:
                block = 0.5 * (block + block.T)
            hessian[i * d : (i + 1) * d, k * d : (k + 1) * d] = block
            if k != i:
                hessian[k * d : (k + 1) * d, i * d : (i + 1) * d] = block.T
    return hessian
