"""Streaming ordinary least squares over many (step, value) series at once.

Each series is summarized by additive sufficient statistics so that a
trajectory can be fit one checkpoint at a time. Sums are kept relative to the
first observation of every series; this does not change slope or R^2 and keeps
the usual ``sum_yy - sum_y**2 / n`` cancellation harmless for weights that
drift by 1e-4 around a value of order one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_series_row, check_finite

__all__ = [
    "FilterPolicy",
    "FitAccumulator",
    "FitResult",
    "HistogramSummary",
    "InsufficientDataError",
    "DegenerateRegressorError",
    "LinearTrendFitter",
    "fit_series",
    "histogram",
]


class InsufficientDataError(ValueError):
    pass


class DegenerateRegressorError(ValueError):
    pass


@dataclass(frozen=True)
class FilterPolicy:
    """Rules for excluding series that barely move.

    A series is filtered when it changed value fewer than ``min_changes`` times
    between consecutive observations, or when its total range is below
    ``abs_change_floor``. Series whose total sum of squares is below
    ``const_eps`` are flagged constant.
    """

    min_changes: int = 3
    abs_change_floor: float = 0.0
    const_eps: float = 1e-30


@dataclass
class FitAccumulator:
    """Sufficient statistics for ``k`` independent series sharing step values."""

    k: int
    n: int = 0
    t_ref: float = 0.0
    y_ref: np.ndarray = None
    sum_t: float = 0.0
    sum_tt: float = 0.0
    sum_y: np.ndarray = None
    sum_ty: np.ndarray = None
    sum_yy: np.ndarray = None
    distinct_estimate: np.ndarray = None
    y_min: np.ndarray = None
    y_max: np.ndarray = None
    y_last: np.ndarray = None

    def __post_init__(self):
        k = self.k
        for name in ("y_ref", "sum_y", "sum_ty", "sum_yy", "y_last"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(k))
        if self.distinct_estimate is None:
            self.distinct_estimate = np.zeros(k, dtype=np.int64)
        if self.y_min is None:
            self.y_min = np.full(k, np.inf)
        if self.y_max is None:
            self.y_max = np.full(k, -np.inf)

    def accumulate(self, t: float, y) -> "FitAccumulator":
        """Add the observation ``(t, y[j])`` to every series ``j``."""
        y = as_series_row(y, self.k)
        t = float(t)
        if not np.isfinite(t):
            raise ValueError(f"non-finite step value at observation {self.n}")
        check_finite(y, f"values at observation {self.n}")
        if self.n == 0:
            self.t_ref = t
            self.y_ref = y.copy()
        else:
            self.distinct_estimate += (y != self.y_last)
        dt = t - self.t_ref
        dy = y - self.y_ref
        self.n += 1
        self.sum_t += dt
        self.sum_tt += dt * dt
        self.sum_y += dy
        self.sum_ty += dt * dy
        self.sum_yy += dy * dy
        np.minimum(self.y_min, y, out=self.y_min)
        np.maximum(self.y_max, y, out=self.y_max)
        self.y_last = y.copy()
        return self

    def _rebased(self, t_ref: float, y_ref: np.ndarray):
        """Sums re-expressed relative to a different reference point."""
        a = self.t_ref - t_ref
        b = self.y_ref - y_ref
        n = self.n
        st = self.sum_t + n * a
        stt = self.sum_tt + 2 * a * self.sum_t + n * a * a
        sy = self.sum_y + n * b
        syy = self.sum_yy + 2 * b * self.sum_y + n * b * b
        sty = self.sum_ty + a * self.sum_y + b * self.sum_t + n * a * b
        return st, stt, sy, sty, syy

    def merge(self, other: "FitAccumulator") -> "FitAccumulator":
        """Combine with statistics of the same series observed at later steps.

        The change counter assumes ``other`` continues where ``self`` stopped.
        """
        if other.k != self.k:
            raise ValueError("cannot merge accumulators over different series counts")
        if other.n == 0:
            return FitAccumulator(**{f: _copy(getattr(self, f)) for f in _FIELDS})
        if self.n == 0:
            return FitAccumulator(**{f: _copy(getattr(other, f)) for f in _FIELDS})
        st, stt, sy, sty, syy = other._rebased(self.t_ref, self.y_ref)
        out = FitAccumulator(k=self.k, n=self.n + other.n, t_ref=self.t_ref, y_ref=self.y_ref.copy())
        out.sum_t = self.sum_t + st
        out.sum_tt = self.sum_tt + stt
        out.sum_y = self.sum_y + sy
        out.sum_ty = self.sum_ty + sty
        out.sum_yy = self.sum_yy + syy
        out.distinct_estimate = (self.distinct_estimate + other.distinct_estimate
                                 + (other.y_ref != self.y_last))
        out.y_min = np.minimum(self.y_min, other.y_min)
        out.y_max = np.maximum(self.y_max, other.y_max)
        out.y_last = other.y_last.copy()
        return out

    __add__ = merge

    def finalize(self, policy: FilterPolicy | None = None) -> "FitResult":
        policy = policy or FilterPolicy()
        n = self.n
        if n < 2:
            raise InsufficientDataError(f"need at least 2 observations, have {n}")
        s_tt = self.sum_tt - self.sum_t ** 2 / n
        if not s_tt > 0:
            raise DegenerateRegressorError("all observations share one step value")
        s_ty = self.sum_ty - self.sum_t * self.sum_y / n
        ss_tot = self.sum_yy - self.sum_y ** 2 / n
        slope = s_ty / s_tt
        # intercept back in absolute coordinates
        mean_t = self.t_ref + self.sum_t / n
        mean_y = self.y_ref + self.sum_y / n
        intercept = mean_y - slope * mean_t

        constant = ss_tot < policy.const_eps
        with np.errstate(divide="ignore", invalid="ignore"):
            ss_res = np.maximum(ss_tot - s_ty * s_ty / s_tt, 0.0)
            r2 = np.where(constant, np.nan, 1.0 - ss_res / ss_tot)
        r2 = np.clip(r2, 0.0, 1.0)
        filtered = (constant
                    | (self.distinct_estimate < policy.min_changes)
                    | ((self.y_max - self.y_min) < policy.abs_change_floor))
        return FitResult(slope=slope, intercept=intercept, r2=r2,
                         n=np.full(self.k, n, dtype=np.int64),
                         constant=constant, filtered=filtered)


_FIELDS = ("k", "n", "t_ref", "y_ref", "sum_t", "sum_tt", "sum_y", "sum_ty", "sum_yy",
           "distinct_estimate", "y_min", "y_max", "y_last")


def _copy(v):
    return v.copy() if isinstance(v, np.ndarray) else v


@dataclass
class FitResult:
    """Per-series fit. ``r2`` is NaN exactly where ``constant`` is set."""

    slope: np.ndarray
    intercept: np.ndarray
    r2: np.ndarray
    n: np.ndarray
    constant: np.ndarray
    filtered: np.ndarray

    def __len__(self):
        return len(self.slope)

    def __getitem__(self, idx) -> "FitResult":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return FitResult(*(np.asarray(getattr(self, f))[idx] for f in _RESULT_FIELDS))

    @property
    def kept(self) -> np.ndarray:
        """Mask of series that are neither filtered nor constant."""
        return ~(self.filtered | self.constant)

    @classmethod
    def concat(cls, results) -> "FitResult":
        results = list(results)
        if not results:
            empty = np.zeros(0)
            return cls(empty, empty, empty, np.zeros(0, dtype=np.int64),
                       np.zeros(0, dtype=bool), np.zeros(0, dtype=bool))
        return cls(*(np.concatenate([getattr(r, f) for r in results]) for f in _RESULT_FIELDS))


_RESULT_FIELDS = ("slope", "intercept", "r2", "n", "constant", "filtered")


def fit_series(t, Y, policy: FilterPolicy | None = None) -> FitResult:
    """Fit every column of ``Y`` (shape ``(len(t), k)`` or ``(len(t),)``) against ``t``."""
    t = np.asarray(t, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != t.shape[0]:
        raise ValueError(f"{t.shape[0]} steps but {Y.shape[0]} rows of values")
    acc = FitAccumulator(k=Y.shape[1])
    for ti, row in zip(t, Y):
        acc.accumulate(ti, row)
    return acc.finalize(policy)


@dataclass
class HistogramSummary:
    counts: np.ndarray
    bin_edges: np.ndarray
    n_total: int
    n_kept: int
    threshold: float = 0.7
    fraction_above: float = float("nan")
    median_r2: float = float("nan")
    mean_r2: float = float("nan")
    empty: bool = False

    def to_dict(self) -> dict:
        return {
            "bin_edges": [float(e) for e in self.bin_edges],
            "counts": [int(c) for c in self.counts],
            "n_total": int(self.n_total),
            "n_kept": int(self.n_kept),
            "threshold": float(self.threshold),
            f"fraction_r2_gt_{self.threshold:g}": _json_float(self.fraction_above),
            "median_r2": _json_float(self.median_r2),
            "mean_r2": _json_float(self.mean_r2),
            "empty": bool(self.empty),
        }


def _json_float(x):
    return None if x is None or not np.isfinite(x) else float(x)


def histogram(results: FitResult, bin_edges=None, threshold: float = 0.7) -> HistogramSummary:
    """Bin the R^2 of kept (unfiltered, non-constant) series."""
    edges = np.linspace(0.0, 1.0, 21) if bin_edges is None else np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be strictly increasing with at least two entries")
    r2 = np.asarray(results.r2)[results.kept]
    summary = HistogramSummary(counts=np.zeros(edges.size - 1, dtype=np.int64), bin_edges=edges,
                               n_total=len(results), n_kept=int(r2.size), threshold=threshold)
    if r2.size == 0:
        summary.empty = True
        return summary
    # the last bin is closed, so clipping keeps r2 == 1 (and 1 + fp noise) counted
    counts, _ = np.histogram(np.clip(r2, edges[0], edges[-1]), bins=edges)
    summary.counts = counts
    summary.fraction_above = float(np.mean(r2 > threshold))
    summary.median_r2 = float(np.median(r2))
    summary.mean_r2 = float(np.mean(r2))
    return summary


class LinearTrendFitter(BaseEstimator):
    """Fit a straight line in training step to every column of a value matrix.

    Parameters
    ----------
    min_changes : int
        Series with fewer value changes are marked ``filtered_``.
    abs_change_floor : float
        Series whose range is below this are marked ``filtered_``.
    const_eps : float
        Total sum of squares below which a series is flagged constant.
    warmup_steps : float
        Observations with step below this are ignored.

    Attributes
    ----------
    slope_, intercept_, r2_ : ndarray of shape (n_series,)
    filtered_, constant_ : ndarray of bool
    result_ : FitResult
    """

    def __init__(self, min_changes=3, abs_change_floor=0.0, const_eps=1e-30, warmup_steps=0):
        self.min_changes = min_changes
        self.abs_change_floor = abs_change_floor
        self.const_eps = const_eps
        self.warmup_steps = warmup_steps

    def _policy(self) -> FilterPolicy:
        return FilterPolicy(self.min_changes, self.abs_change_floor, self.const_eps)

    def partial_fit(self, t, y):
        """Add one observation row ``y`` taken at step ``t``."""
        if float(t) < self.warmup_steps:
            return self
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        if not hasattr(self, "accumulator_"):
            self.accumulator_ = FitAccumulator(k=y.shape[0])
        self.accumulator_.accumulate(t, y)
        if self.accumulator_.n >= 2:
            self._set_result(self.accumulator_.finalize(self._policy()))
        return self

    def fit(self, t, Y):
        for attr in ("accumulator_", "result_"):
            self.__dict__.pop(attr, None)
        t = np.asarray(t, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != t.shape[0]:
            raise ValueError(f"{t.shape[0]} steps but {Y.shape[0]} rows of values")
        for ti, row in zip(t, Y):
            self.partial_fit(ti, row)
        if not hasattr(self, "result_"):
            n = getattr(self, "accumulator_", FitAccumulator(k=0)).n
            raise InsufficientDataError(f"need at least 2 observations after warmup, have {n}")
        return self

    def _set_result(self, res: FitResult):
        self.result_ = res
        self.slope_ = res.slope
        self.intercept_ = res.intercept
        self.r2_ = res.r2
        self.filtered_ = res.filtered
        self.constant_ = res.constant
        self.n_series_ = len(res)

    def predict(self, t) -> np.ndarray:
        """Fitted values, shape ``(len(t), n_series)``."""
        check_is_fitted(self, "result_")
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return self.intercept_[None, :] + t[:, None] * self.slope_[None, :]

    def summary(self, bin_edges=None, threshold=0.7) -> HistogramSummary:
        check_is_fitted(self, "result_")
        return histogram(self.result_, bin_edges, threshold)
