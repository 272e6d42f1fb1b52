"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .netgraph import NetworkSpec


def check_input_batch(net: NetworkSpec, X) -> np.ndarray:
    """Coerce ``X`` to a float32 batch of network inputs.

    Accepts (n_samples, H, W, C) or a single (H, W, C) sample, which is
    promoted to a batch of one.
    """
    arr = np.asarray(X, dtype=np.float32)
    expected = tuple(net.input_shape)
    if arr.shape == expected:
        arr = arr[None, ...]
    if arr.ndim != 4 or tuple(arr.shape[1:]) != expected:
        raise ShapeMismatch(
            f"expected inputs of shape (n, {expected[0]}, {expected[1]}, "
            f"{expected[2]}), got {arr.shape}"
        )
    if arr.shape[0] == 0:
        raise ShapeMismatch("empty input batch")
    if not np.all(np.isfinite(arr)):
        raise ShapeMismatch("inputs contain non-finite values")
    return arr


def check_fitted(estimator, attribute: str = "plan_") -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() with "
            "calibration inputs first"
        )
