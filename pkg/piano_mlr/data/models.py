from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence, Tuple

import numpy as np

from piano_mlr.utils.errors import ConfigError, DataFormatError, DimensionMismatchError

RegularizationKind = Literal["none", "l1", "l0"]
L0Rank = Literal["value", "gain"]
LabelMode = Literal["model", "uniform"]

# ============================================================================
# DATA MODELS
# ============================================================================


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Feature matrix (n x d) with one-hot class labels (n x m).

    `classes` maps column i of `labels` back to the original label text, in
    first-appearance order for loaded files.
    """

    features: np.ndarray
    labels: np.ndarray
    classes: Tuple[str, ...] = ()

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        if features.ndim != 2 or labels.ndim != 2:
            raise DimensionMismatchError(
                f"features and labels must be 2-D, got {features.ndim}-D and {labels.ndim}-D"
            )
        n, d = features.shape
        if labels.shape[0] != n:
            raise DimensionMismatchError(f"features have {n} rows but labels have {labels.shape[0]}")
        m = labels.shape[1]
        if n < 1 or d < 1:
            raise DataFormatError(f"dataset needs n >= 1 and d >= 1, got n={n}, d={d}")
        if m < 2:
            raise DataFormatError(f"dataset needs at least 2 classes, got m={m}")
        if not np.all(np.isfinite(features)):
            raise DataFormatError("feature matrix contains non-finite entries")
        unit = labels == 1.0
        if not (np.all(unit | (labels == 0.0)) and np.all(unit.sum(axis=1) == 1)):
            raise DataFormatError("every label row must be 1-of-m encoded")
        classes = tuple(self.classes) if self.classes else tuple(str(i) for i in range(m))
        if len(classes) != m:
            raise DimensionMismatchError(f"{len(classes)} class names for {m} label columns")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "classes", classes)

    @classmethod
    def from_class_indices(
        cls, features: np.ndarray, class_indices: Sequence[int], m: int, classes: Sequence[str] = ()
    ) -> "Dataset":
        return cls(np.asarray(features), one_hot(class_indices, m), tuple(classes))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def m(self) -> int:
        return int(self.labels.shape[1])

    @property
    def class_indices(self) -> np.ndarray:
        """Compact view of the labels: class index per sample."""
        return np.argmax(self.labels, axis=1)

    def with_bias(self) -> "Dataset":
        """Return a copy with a trailing all-ones feature column."""
        ones = np.ones((self.n, 1))
        return Dataset(np.hstack([self.features, ones]), self.labels, self.classes)


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """
    The m class weight vectors stacked as rows (m x d).

    flatten() gives the class-major vector [w_1, ..., w_m]; element (i, l)
    sits at flat index i * d + l.
    """

    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64, copy=True)
        if rows.ndim != 2:
            raise DimensionMismatchError(f"weight rows must be a 2-D array, got {rows.ndim}-D")
        if not np.all(np.isfinite(rows)):
            raise ConfigError("weight matrix contains non-finite entries")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @classmethod
    def zeros(cls, m: int, d: int) -> "WeightMatrix":
        return cls(np.zeros((m, d)))

    @classmethod
    def uniform(cls, m: int, d: int, seed: int) -> "WeightMatrix":
        """Entries drawn from U[0, 1] with a seeded generator."""
        return cls(np.random.default_rng(seed).uniform(0.0, 1.0, size=(m, d)))

    @classmethod
    def from_flat(cls, flat: np.ndarray, m: int, d: int) -> "WeightMatrix":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (m * d,):
            raise DimensionMismatchError(f"flat vector of shape {flat.shape} cannot hold {m}x{d} weights")
        return cls(flat.reshape(m, d))

    def flatten(self) -> np.ndarray:
        return self.rows.reshape(-1).copy()

    @property
    def m(self) -> int:
        return int(self.rows.shape[0])

    @property
    def d(self) -> int:
        return int(self.rows.shape[1])

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.rows))


@dataclass(frozen=True)
class Regularization:
    kind: RegularizationKind = "none"
    lam: float = 0.0
    beta: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "l1", "l0"):
            raise ConfigError(f"unknown regularization '{self.kind}'")
        if self.kind == "l1" and not self.lam > 0:
            raise ConfigError(f"l1 regularization needs lambda > 0, got {self.lam}")
        if self.kind == "l0" and self.beta < 0:
            raise ConfigError(f"l0 regularization needs beta >= 0, got {self.beta}")

    @classmethod
    def none(cls) -> "Regularization":
        return cls("none")

    @classmethod
    def l1(cls, lam: float) -> "Regularization":
        return cls("l1", lam=float(lam))

    @classmethod
    def l0(cls, beta: int) -> "Regularization":
        return cls("l0", beta=int(beta))

    def describe(self) -> dict:
        if self.kind == "l1":
            return {"kind": "l1", "lambda": self.lam}
        if self.kind == "l0":
            return {"kind": "l0", "beta": self.beta}
        return {"kind": "none"}


@dataclass(frozen=True)
class FitConfig:
    regularization: Regularization = field(default_factory=Regularization.none)
    rel_tol: float = 1e-3
    max_outer_iters: int = 1000
    bisection_tol: float = 1e-8
    bracket_growth: float = 2.0
    weight_cap: float = 1e3
    thread_count: int = 1
    seed: int = 0
    l0_rank: L0Rank = "value"

    def __post_init__(self):
        for name in ("rel_tol", "bisection_tol", "weight_cap"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if not self.bracket_growth > 1:
            raise ConfigError(f"bracket_growth must exceed 1, got {self.bracket_growth}")
        if self.max_outer_iters < 1:
            raise ConfigError(f"max_outer_iters must be positive, got {self.max_outer_iters}")
        if self.thread_count < 1:
            raise ConfigError(f"thread_count must be positive, got {self.thread_count}")
        if self.l0_rank not in ("value", "gain"):
            raise ConfigError(f"l0_rank must be 'value' or 'gain', got '{self.l0_rank}'")

    def validate_for(self, dm: int) -> None:
        """Check bounds that depend on the problem size."""
        reg = self.regularization
        if reg.kind == "l0" and reg.beta > dm:
            raise ConfigError(f"beta={reg.beta} exceeds the number of weights d*m={dm}")


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    objective: float
    wall_ms: float
    nnz: int


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    d: int
    m: int
    label_mode: LabelMode = "model"
    seed: int = 0
    append_bias: bool = False
    true_weights: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or self.m < 2:
            raise ConfigError(f"synthetic spec needs n, d >= 1 and m >= 2, got n={self.n}, d={self.d}, m={self.m}")
        if self.label_mode not in ("model", "uniform"):
            raise ConfigError(f"label_mode must be 'model' or 'uniform', got '{self.label_mode}'")


# ============================================================================
# COMPUTATION FUNCTIONS
# ============================================================================


def one_hot(class_indices: Sequence[int], m: int) -> np.ndarray:
    """Encode class indices in [0, m) as an n x m 1-of-m matrix."""
    idx = np.asarray(class_indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionMismatchError("class indices must be a 1-D sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise DataFormatError(f"class index outside [0, {m})")
    labels = np.zeros((idx.size, m))
    labels[np.arange(idx.size), idx] = 1.0
    return labels
