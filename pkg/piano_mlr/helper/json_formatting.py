import json
from typing import Any, Dict, Optional, Sequence, Tuple

from piano_mlr.data.models import Regularization, WeightMatrix
from piano_mlr.utils.errors import DataFormatError

STACKING = "class-major"


def weights_to_json(
    weights: WeightMatrix,
    classes: Sequence[str],
    regularization: Optional[Regularization] = None,
    objective: Optional[float] = None,
) -> Dict[str, Any]:
    """
    Weights payload with an explicit layout: row i of "weights" is class
    classes[i], and the flat vector is the rows concatenated in order.
    """
    payload: Dict[str, Any] = {
        "shape": [weights.m, weights.d],
        "stacking": STACKING,
        "classes": list(classes),
        "weights": weights.rows.tolist(),
    }
    if regularization is not None:
        payload["regularization"] = regularization.describe()
    if objective is not None:
        payload["objective"] = objective
    return payload


def save_weights(path, weights: WeightMatrix, classes: Sequence[str], **extra) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(weights_to_json(weights, classes, **extra), f, indent=2)


def load_weights(path) -> Tuple[WeightMatrix, Tuple[str, ...]]:
    """Inverse of save_weights; validates shape and stacking order."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: not valid JSON: {e}") from e
    if payload.get("stacking") != STACKING:
        raise DataFormatError(f"{path}: unsupported stacking '{payload.get('stacking')}'")
    weights = WeightMatrix(payload["weights"])
    if [weights.m, weights.d] != list(payload["shape"]):
        raise DataFormatError(f"{path}: shape {payload['shape']} does not match the weight rows")
    return weights, tuple(payload["classes"])
