"""Argument checks shared by the estimators and the command line."""

import numbers

import numpy as np
from sklearn.utils import check_array

from .exceptions import DimensionMismatch, InvalidConfig


def check_int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise InvalidConfig(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise InvalidConfig(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_real(value, name, low=None, high=None, low_open=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise InvalidConfig(f"{name} must be a finite number, got {value!r}")
    if low is not None and (value < low or (low_open and value == low)):
        bound = ">" if low_open else ">="
        raise InvalidConfig(f"{name} must be {bound} {low}, got {value}")
    if high is not None and value > high:
        raise InvalidConfig(f"{name} must be <= {high}, got {value}")
    return float(value)


def check_choice(value, name, choices):
    if value not in choices:
        raise InvalidConfig(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_matrix(m, name="input", cols=None):
    """2-D finite float64 array, optionally with a fixed column count."""
    try:
        arr = check_array(m, dtype=np.float64, ensure_2d=True)
    except ValueError as exc:
        raise DimensionMismatch(f"{name}: {exc}") from None
    if cols is not None and arr.shape[1] != cols:
        raise DimensionMismatch(f"{name}: expected {cols} columns, got {arr.shape[1]}")
    return arr
