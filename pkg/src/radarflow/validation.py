"""Input checks shared by the estimators."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .core import RadarFrame, RigidTransform


def check_radar_array(X, *, min_rows=0):
    """Accept a :class:`RadarFrame` or an ``(N, 4)`` array of ``x, y, z, v_r``."""
    if isinstance(X, RadarFrame):
        return X
    X = check_array(X, dtype=np.float64, ensure_min_samples=max(min_rows, 1) if min_rows else 0)
    if X.shape[1] != 4:
        raise ValueError(f"radar array must have 4 columns (x, y, z, v_r), got {X.shape[1]}")
    return RadarFrame(0.0, RigidTransform.identity(), X[:, :3], X[:, 3])


def check_labels(labels, n):
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if len(labels) != n:
        raise ValueError(f"expected {n} labels, got {len(labels)}")
    return labels


def check_positive(value, name, *, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    if (value <= 0) if strict else (value < 0):
        raise ValueError(f"{name} must be {'> 0' if strict else '>= 0'}, got {value!r}")
    return float(value)


def check_unit_interval(value, name):
    if not isinstance(value, numbers.Real) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)
