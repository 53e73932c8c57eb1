"""Input validation helpers and shared error types."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


class CorruptDatasetError(ValidationError):
    """Raised when an on-disk dataset disagrees with its manifest."""


class InfeasibleMissingRateError(ValidationError):
    """Raised when a missing rate cannot keep one modality observed per sample."""


def as_float_matrix(x, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr

def check_finite(x: np.ndarray, name: str = "X") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite values")
    return x


def check_binary_vector(v, n: int | None = None, name: str = "indicator") -> np.ndarray:
    """Validate a 0/1 vector and return it as int8."""
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} must contain only 0/1 values")
    if n is not None and arr.shape[0] != n:
        raise ValidationError(f"{name} has length {arr.shape[0]}, expected {n}")
    return arr.astype(np.int8)


def check_modal_arrays(xs, modalities) -> dict[str, np.ndarray]:
    """Validate a per-modality feature mapping (or sequence in canonical order).

    Every array must be 2-D with the same number of rows.
    """
    if isinstance(xs, dict):
        missing = [m for m in modalities if m not in xs]
        if missing:
            raise ValidationError(f"missing modalities {missing}, expected {list(modalities)}")
        items = [(m, xs[m]) for m in modalities]
    else:
        xs = list(xs)
        if len(xs) != len(modalities):
            raise ValidationError(f"expected {len(modalities)} modality arrays, got {len(xs)}")
        items = list(zip(modalities, xs))
    out: dict[str, np.ndarray] = {}
    n = None
    for name, x in items:
        arr = as_float_matrix(x, name=f"X[{name}]")
        if n is None:
            n = arr.shape[0]
        elif arr.shape[0] != n:
            raise ValidationError(
                f"X[{name}] has {arr.shape[0]} rows, other modalities have {n}"
            )
        out[name] = arr
    return out


def check_class_labels(y, num_classes: int, name: str = "y") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.round(arr)):
            raise ValidationError(f"{name} must hold integer class indices")
        arr = arr.astype(np.int64)
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ValidationError(f"{name} must lie in [0, {num_classes})")
    return arr
