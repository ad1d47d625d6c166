"""Global numerics switches: strict finite checks and the working dtype."""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import NumericError

_state = {"strict": True, "dtype": np.float64}


def strict() -> bool:
    return _state["strict"]


def set_mode(mode: str) -> None:
    """``"test"``: float64 with NaN/Inf checks. ``"fast"``: float32, unchecked."""
    if mode == "test":
        _state.update(strict=True, dtype=np.float64)
    elif mode == "fast":
        _state.update(strict=False, dtype=np.float32)
    else:
        raise ValueError(f"unknown numerics mode {mode!r}")


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def mode(name: str):
    saved = dict(_state)
    set_mode(name)
    try:
        yield
    finally:
        _state.update(saved)


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if _state["strict"] and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {where}")
    return arr
