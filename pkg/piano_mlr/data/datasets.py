"""
Dataset ingestion (CSV, LIBSVM), synthetic problem generation and trace
persistence.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax
from sklearn.datasets import load_svmlight_file

from piano_mlr.data.models import Dataset, SyntheticSpec, TraceRecord, WeightMatrix
from piano_mlr.utils.errors import ConfigError, DataFormatError
from piano_mlr.utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, os.PathLike]
MAX_DENSE_ENTRIES = 200_000_000
TRACE_COLUMNS = ["iter", "objective", "wall_ms", "nnz"]


def _encode_labels(path: PathLike, labels: Sequence[str]) -> Tuple[np.ndarray, List[str]]:
    """Class indices by first appearance."""
    codes, uniques = pd.factorize(pd.Series(list(labels), dtype=object))
    if len(uniques) < 2:
        raise DataFormatError(f"{path}: need at least 2 classes, found {len(uniques)}")
    return codes, [str(u) for u in uniques]


def load_csv(
    path: PathLike, label_column: Union[int, str] = -1, has_header: bool = False, append_bias: bool = False
) -> Dataset:
    """
    Load a CSV file whose columns are numeric features plus one label column.

    label_column is a position (negative counts from the end) or, with a
    header, a column name.
    """
    try:
        frame = pd.read_csv(
            path, header=0 if has_header else None, dtype=str, keep_default_na=False, skipinitialspace=True
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataFormatError(f"{path}: {e}") from e
    if frame.shape[0] == 0:
        raise DataFormatError(f"{path}: no data rows")

    columns = list(frame.columns)
    if isinstance(label_column, str):
        if label_column not in columns:
            raise DataFormatError(f"{path}: label column '{label_column}' not found in header {columns}")
        label_pos = columns.index(label_column)
    else:
        if not -len(columns) <= label_column < len(columns):
            raise DataFormatError(f"{path}: label column {label_column} out of range for {len(columns)} columns")
        label_pos = label_column % len(columns)
    feature_cols = [c for pos, c in enumerate(columns) if pos != label_pos]
    if not feature_cols:
        raise DataFormatError(f"{path}: no feature columns besides the label")

    numeric = frame[feature_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(numeric)
    if bad.any():
        row, col = (int(k) for k in np.argwhere(bad)[0])
        file_row = row + (2 if has_header else 1)
        file_col = columns.index(feature_cols[col]) + 1
        raise DataFormatError(
            f"{path}: row {file_row}, column {file_col}: '{frame[feature_cols[col]].iloc[row]}' is not a finite number"
        )

    codes, classes = _encode_labels(path, frame.iloc[:, label_pos].tolist())
    data = Dataset.from_class_indices(numeric, codes, len(classes), classes)
    logger.info(f"Loaded {path}: n={data.n} d={data.d} m={data.m}")
    return data.with_bias() if append_bias else data


def _label_text(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _libsvm_line_problem(line: str, n_features: Optional[int]) -> Optional[str]:
    tokens = line.split("#", 1)[0].split()
    if not tokens:
        return None
    try:
        float(tokens[0])
    except ValueError:
        return f"label '{tokens[0]}' is not a number"
    last = 0
    for token in tokens[1:]:
        if token.startswith("qid:"):
            continue
        idx, sep, value = token.partition(":")
        try:
            index, _ = int(idx), float(value)
        except ValueError:
            return f"malformed entry '{token}'"
        if not sep or index < 1:
            return f"malformed entry '{token}' (indices are 1-based)"
        if index <= last:
            return f"feature indices must be strictly ascending, got {index} after {last}"
        if n_features is not None and index > n_features:
            return f"feature index {index} exceeds n_features={n_features}"
        last = index
    return None


def _locate_libsvm_error(path: PathLike, n_features: Optional[int]) -> Optional[str]:
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for number, line in enumerate(f, start=1):
            problem = _libsvm_line_problem(line, n_features)
            if problem:
                return f"line {number}: {problem}"
    return None


def load_libsvm(path: PathLike, n_features: Optional[int] = None, append_bias: bool = False) -> Dataset:
    """
    Load "label idx:val ..." lines (1-based, strictly ascending indices) and
    materialize a dense feature matrix.
    """
    try:
        sparse, targets = load_svmlight_file(str(path), n_features=n_features, dtype=np.float64, zero_based=False)
    except ValueError as e:
        located = _locate_libsvm_error(path, n_features)
        raise DataFormatError(f"{path}: {located or e}") from e
    n, d = sparse.shape
    if n * d > MAX_DENSE_ENTRIES:
        raise DataFormatError(f"{path}: dense {n}x{d} matrix exceeds {MAX_DENSE_ENTRIES} entries")
    codes, classes = _encode_labels(path, [_label_text(t) for t in targets])
    data = Dataset.from_class_indices(sparse.toarray(), codes, len(classes), classes)
    logger.info(f"Loaded {path}: n={data.n} d={data.d} m={data.m} (nnz={sparse.nnz})")
    return data.with_bias() if append_bias else data


def write_libsvm(data: Dataset, path: PathLike) -> None:
    """Write the dataset with full-precision values; zero entries are omitted."""
    lines = []
    for row, label in zip(data.features, data.class_indices):
        entries = " ".join(f"{l + 1}:{float(row[l])!r}" for l in np.flatnonzero(row))
        lines.append(f"{data.classes[label]} {entries}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def synth_generate(spec: SyntheticSpec) -> Tuple[Dataset, Optional[WeightMatrix]]:
    """
    Standard normal features; labels drawn from the softmax of a U[0, 1]
    ground-truth weight matrix ("model") or uniformly at random ("uniform").
    Fully determined by spec.seed.
    """
    rng = np.random.default_rng(spec.seed)
    features = rng.standard_normal((spec.n, spec.d))
    true_weights: Optional[WeightMatrix] = None
    if spec.label_mode == "model":
        if spec.true_weights is not None:
            true_weights = WeightMatrix(spec.true_weights)
            if true_weights.rows.shape != (spec.m, spec.d):
                raise ConfigError(f"true weights must be {spec.m}x{spec.d}, got {true_weights.rows.shape}")
        else:
            true_weights = WeightMatrix(rng.uniform(0.0, 1.0, size=(spec.m, spec.d)))
        probs = softmax(features @ true_weights.rows.T, axis=1)
        draws = rng.random(spec.n)
        classes = np.minimum((np.cumsum(probs, axis=1) < draws[:, None]).sum(axis=1), spec.m - 1)
    else:
        classes = rng.integers(0, spec.m, size=spec.n)
    data = Dataset.from_class_indices(features, classes, spec.m)
    logger.debug(f"Generated synthetic data n={spec.n} d={spec.d} m={spec.m} labels={spec.label_mode}")
    return (data.with_bias() if spec.append_bias else data), true_weights


def write_trace(trace: Sequence[TraceRecord], path: PathLike, fmt: str = "csv") -> None:
    """CSV with header iter,objective,wall_ms,nnz (17 significant digits) or a JSON array of records."""
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as f:
            json.dump([asdict(r) for r in trace], f, indent=2)
    elif fmt == "csv":
        frame = pd.DataFrame([asdict(r) for r in trace], columns=TRACE_COLUMNS)
        frame.to_csv(path, index=False, float_format="%.17g")
    else:
        raise ConfigError(f"unknown trace format '{fmt}'")


def read_trace(path: PathLike) -> List[TraceRecord]:
    """Parse a trace written by write_trace; the format follows the file suffix."""
    if str(path).endswith(".json"):
        with open(path, "r", encoding="utf-8") as f:
            rows = json.load(f)
    else:
        rows = pd.read_csv(path, float_precision="round_trip").to_dict(orient="records")
    return [
        TraceRecord(int(r["iter"]), float(r["objective"]), float(r["wall_ms"]), int(r["nnz"])) for r in rows
    ]
