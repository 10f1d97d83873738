"""Input validation helpers used by the estimators and geometry code."""

import numpy as np

from .exceptions import ConfigError, DataError, NumericalError


def as_float_array(x, name="array", shape=None, ndim=None, allow_empty=False):
    """Coerce to a float64 ndarray and validate its shape.

    Args:
        x: array-like input.
        name: label used in error messages.
        shape: exact shape tuple; entries set to None are unconstrained.
        ndim: required number of dimensions (ignored when shape is given).

    Returns:
        np.ndarray of dtype float64.
    """
    try:
        arr = np.asarray(x, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{name}: not numeric: {exc}") from None
    if shape is not None:
        if arr.ndim != len(shape):
            raise DataError(f"{name}: expected {len(shape)}d, got {arr.ndim}d")
        for axis, want in enumerate(shape):
            if want is not None and arr.shape[axis] != want:
                raise DataError(
                    f"{name}: expected shape {shape}, got {arr.shape}")
    elif ndim is not None and arr.ndim != ndim:
        raise DataError(f"{name}: expected {ndim}d, got {arr.ndim}d")
    if not allow_empty and arr.size == 0:
        raise DataError(f"{name}: empty")
    return arr


def check_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name}: contains non-finite values")
    return arr


def check_rotation(R, name="rotation", tol=1e-9):
    """Validate a proper rotation matrix (orthonormal, det +1)."""
    R = as_float_array(R, name, shape=(3, 3))
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if err > tol:
        raise NumericalError(f"{name}: not orthonormal (max error {err:.3g})")
    if np.linalg.det(R) < 0:
        raise NumericalError(f"{name}: left-handed (det < 0)")
    return R


def check_unit(v, name="vector", tol=1e-9):
    v = as_float_array(v, name, shape=(3,))
    n = np.linalg.norm(v)
    if abs(n - 1.0) > tol:
        raise NumericalError(f"{name}: not unit length (norm {n:.12g})")
    return v


def check_positive(value, name="value"):
    if not np.isfinite(value) or value <= 0:
        raise ConfigError(f"{name}: must be positive, got {value!r}")
    return float(value)


def check_fitted(estimator, attr):
    """Raise sklearn's NotFittedError unless `attr` is set on the estimator."""
    from sklearn.exceptions import NotFittedError

    if getattr(estimator, attr, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first")
