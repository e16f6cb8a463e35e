"""Small input-validation helpers shared by the estimators and free functions."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigError, DataError

EPS_KL = 1e-12
EPS_LOG = 1e-30


def as_matrix(X, name="X", ensure_min_samples=1):
    """Return ``X`` as a finite 2-D float64 array or raise :class:`DataError`."""
    try:
        return check_array(
            X,
            dtype=np.float64,
            ensure_all_finite=True,
            ensure_min_samples=ensure_min_samples,
            input_name=name,
        )
    except ValueError as exc:
        raise DataError(f"{name}: {exc}") from exc


def check_simplex_rows(Y, name="labels", atol=1e-9):
    Y = as_matrix(Y, name)
    if np.any(Y < -atol) or np.any(Y > 1 + atol):
        raise DataError(f"{name}: entries must lie in [0, 1]")
    if not np.allclose(Y.sum(axis=1), 1.0, rtol=0, atol=atol):
        raise DataError(f"{name}: rows must sum to 1")
    return Y


def check_count(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_real(value, name, low=None, high=None, low_open=False, high_open=False,
               allow_inf=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ConfigError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if np.isnan(value) or (np.isinf(value) and not allow_inf):
        raise ConfigError(f"{name} must be finite, got {value}")
    if low is not None and (value < low or (low_open and value == low)):
        raise ConfigError(f"{name} must be {'>' if low_open else '>='} {low}, got {value}")
    if high is not None and (value > high or (high_open and value == high)):
        raise ConfigError(f"{name} must be {'<' if high_open else '<='} {high}, got {value}")
    return value


def smooth_simplex(Y, eps=EPS_KL):
    """Floor every entry at ``eps`` and renormalise rows back onto the simplex."""
    Y = np.maximum(np.asarray(Y, dtype=np.float64), eps)
    return Y / Y.sum(axis=-1, keepdims=True)


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def argmax_lowest(M):
    """Row-wise argmax; ``np.argmax`` already returns the first maximal index."""
    return np.argmax(np.asarray(M), axis=1)
