"""Small input checks shared across modules."""
from __future__ import annotations

import numpy as np


def check_finite(arr, what: str) -> None:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
        raise ValueError(f"non-finite {what} at flat index {int(bad[0])} ({bad.size} total)")


def as_series_row(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != k:
        raise ValueError(f"expected {k} series values, got {y.shape[0]}")
    return y


def check_tokens(tokens, vocab_size: int, context_len: int) -> np.ndarray:
    """Return ``tokens`` as a 2-D int array, validating range and length."""
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("tokens must be integers")
    arr = arr.astype(np.int64, copy=False)
    if arr.shape[1] == 0:
        raise ValueError("empty token sequence")
    if arr.shape[1] > context_len:
        raise ValueError(f"sequence length {arr.shape[1]} exceeds context_len {context_len}")
    bad = np.argwhere((arr < 0) | (arr >= vocab_size))
    if bad.size:
        b, pos = bad[0]
        raise ValueError(f"token {int(arr[b, pos])} at position {int(pos)} outside vocabulary "
                         f"of size {vocab_size}")
    return arr


def check_probability(x: float, name: str, *, low_open=True) -> float:
    x = float(x)
    ok = (0.0 < x <= 1.0) if low_open else (0.0 <= x <= 1.0)
    if not ok:
        raise ValueError(f"{name} must be in {'(0, 1]' if low_open else '[0, 1]'}, got {x}")
    return x
