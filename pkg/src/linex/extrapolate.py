"""Extrapolation along a two-checkpoint line, in weight space or logit space."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import __version__
from .policy import DecodeResult, ModelConfig, PolicyModel, decode_with, forward
from .tasks import TaskSpec
from .tensor_store import Checkpoint, DType, SchemaError, Trajectory, write_checkpoint
from .trainer import EvalResult, evaluate

__all__ = [
    "ExtrapolationSpec",
    "InterpolationWarning",
    "extrapolate_tensors",
    "extrapolate_weights",
    "WeightExtrapolator",
    "extrapolated_logits",
    "extrapolate_logits_decode",
    "sweep_weight_extrapolation",
    "compare_logit_extrapolation",
]


class InterpolationWarning(UserWarning):
    """The target step lies inside ``[t0, t1]`` (or behind ``t0``)."""


@dataclass(frozen=True)
class ExtrapolationSpec:
    t0: int
    t1: int
    t_prime: float

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError(f"need t1 > t0, got t0={self.t0}, t1={self.t1}")
        if not math.isfinite(self.t_prime):
            raise ValueError("t_prime must be finite")

    @classmethod
    def from_coefficient(cls, t0: int, t1: int, coefficient: float) -> "ExtrapolationSpec":
        return cls(t0, t1, t0 + coefficient * (t1 - t0))

    @property
    def coefficient(self) -> float:
        return (self.t_prime - self.t0) / (self.t1 - self.t0)

    @property
    def is_interpolation(self) -> bool:
        return self.coefficient <= 1.0

    def warn_if_interpolating(self) -> None:
        if self.is_interpolation:
            warnings.warn(f"coefficient {self.coefficient:g} <= 1: target step {self.t_prime:g} does not lie "
                          f"beyond t1={self.t1}", InterpolationWarning, stacklevel=3)


def extrapolate_tensors(w0: dict, w1: dict, beta: float) -> dict[str, np.ndarray]:
    """``w0 + beta * (w1 - w0)`` per tensor in float64.

    ``beta`` of exactly 0 or 1 returns copies of the anchors, so round trips
    through a lower-precision dtype stay bit-exact.
    """
    if set(w0) != set(w1):
        raise SchemaError(f"tensor names differ: {sorted(set(w0) ^ set(w1))}")
    out, bad = {}, []
    for name in sorted(w0):
        a = np.asarray(w0[name], dtype=np.float64)
        b = np.asarray(w1[name], dtype=np.float64)
        if a.shape != b.shape:
            raise SchemaError(f"tensor {name!r} has shape {a.shape} at t0 but {b.shape} at t1")
        if beta == 0:
            out[name] = a.copy()
        elif beta == 1:
            out[name] = b.copy()
        else:
            out[name] = a + beta * (b - a)
        if not np.all(np.isfinite(out[name])):
            bad.append(name)
    if bad:
        raise FloatingPointError(f"extrapolation with beta={beta:g} produced non-finite values in: {', '.join(bad)}")
    return out


def _check_cast(tensors: dict, dtypes: dict, beta: float) -> None:
    """Raise if a value that is finite in float64 overflows its storage dtype."""
    with np.errstate(over="ignore"):
        bad = [n for n, v in tensors.items()
               if DType.parse(dtypes.get(n, DType.F32)) is not DType.F64
               and not np.all(np.isfinite(v.astype(np.float32)))]
    if bad:
        raise FloatingPointError(f"extrapolation with beta={beta:g} overflows the storage dtype in: "
                                 f"{', '.join(bad)}")


def _load_anchors(traj: Trajectory, t0: int, t1: int):
    r0, r1 = traj.reader(t0), traj.reader(t1)
    if r0.schema() != r1.schema():
        diff = sorted(n for n in set(r0.names) | set(r1.names) if r0.schema().get(n) != r1.schema().get(n))
        raise SchemaError(f"checkpoints {t0} and {t1} disagree on tensors: {', '.join(diff)}")
    w0 = {n: r0.read(n) for n in r0.names}
    w1 = {n: r1.read(n) for n in r1.names}
    dtypes = {n: r0.meta(n).dtype for n in r0.names}
    return w0, w1, dtypes


def provenance_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def extrapolate_weights(traj: Trajectory, spec: ExtrapolationSpec, out_path) -> Path:
    """Write the extrapolated checkpoint for ``spec.t_prime`` to ``out_path``.

    Values are computed in float64 and stored in each tensor's source dtype.
    The step label is ``round(t_prime)``; provenance goes to the sidecar
    ``<out_path>.json``. Returns the sidecar path.
    """
    spec.warn_if_interpolating()
    w0, w1, dtypes = _load_anchors(traj, spec.t0, spec.t1)
    new = extrapolate_tensors(w0, w1, spec.coefficient)
    _check_cast(new, dtypes, spec.coefficient)
    step = max(0, int(round(spec.t_prime)))
    write_checkpoint(Checkpoint(step, new, dtypes), out_path)
    side = provenance_path(out_path)
    side.write_text(json.dumps({
        "extrap.t0": str(spec.t0),
        "extrap.t1": str(spec.t1),
        "extrap.beta": repr(float(spec.coefficient)),
        "extrap.t_prime": repr(float(spec.t_prime)),
        "extrap.tool_version": __version__,
        "extrap.run_id": traj.run_id,
    }, indent=2, sort_keys=True) + "\n")
    return side


class WeightExtrapolator(BaseEstimator):
    """Estimator view of two-point weight extrapolation.

    ``fit(traj)`` loads the anchors at ``t0`` and ``t1``; ``predict(t_prime)``
    returns a :class:`PolicyModel` (or raw tensors if the trajectory carries
    no model config).
    """

    def __init__(self, t0=0, t1=None):
        self.t0 = t0
        self.t1 = t1

    def fit(self, traj: Trajectory, y=None):
        t1 = self.t1 if self.t1 is not None else traj.steps[-1]
        if self.t0 not in traj.steps or t1 not in traj.steps:
            raise KeyError(f"anchors ({self.t0}, {t1}) not both in trajectory steps {traj.steps}")
        self.w0_, self.w1_, self.dtypes_ = _load_anchors(traj, self.t0, t1)
        self.t1_ = t1
        try:
            self.config_ = ModelConfig.from_dict(json.loads(traj.metadata["model_config"]))
        except KeyError:
            self.config_ = None
        return self

    def predict(self, t_prime: float):
        check_is_fitted(self, "w0_")
        spec = ExtrapolationSpec(self.t0, self.t1_, t_prime)
        spec.warn_if_interpolating()
        new = extrapolate_tensors(self.w0_, self.w1_, spec.coefficient)
        if self.config_ is None:
            return new
        _check_cast(new, {}, spec.coefficient)
        return PolicyModel(self.config_, {n: v.astype(np.float32) for n, v in new.items()})


# ---------------------------------------------------------------- logit space

def extrapolated_logits(l0, l1, alpha: float) -> np.ndarray:
    """``l0 + alpha * (l1 - l0)``; the anchors come back unchanged at alpha 0 and 1."""
    l0 = np.asarray(l0, dtype=np.float64)
    l1 = np.asarray(l1, dtype=np.float64)
    if alpha == 0:
        out = l0.copy()
    elif alpha == 1:
        out = l1.copy()
    else:
        out = l0 + alpha * (l1 - l0)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"combined logits are not finite at alpha={alpha:g}")
    return out


def _check_pair(model_t0: PolicyModel, model_t1: PolicyModel) -> None:
    # initialisation settings do not matter once weights exist
    a = dataclasses.replace(model_t0.config, seed=0, init_std=0.0)
    b = dataclasses.replace(model_t1.config, seed=0, init_std=0.0)
    if a != b:
        raise ValueError(f"the two models have different architectures: {a} vs {b}")


def _combined(model_t0, model_t1, alpha):
    def seq_logits(tokens):
        return extrapolated_logits(forward(model_t0, tokens).logits, forward(model_t1, tokens).logits, alpha)
    return seq_logits


def extrapolate_logits_decode(model_t0: PolicyModel, model_t1: PolicyModel, alpha: float, prompt, *,
                              temperature: float = 1.0, top_p: float = 1.0, max_new: int, seed) -> DecodeResult:
    """Decode from the combined logits of two checkpoints.

    Every emitted token costs exactly one forward pass of each model.
    """
    _check_pair(model_t0, model_t1)
    if not math.isfinite(alpha):
        raise ValueError("alpha must be finite")
    seq_logits = _combined(model_t0, model_t1, alpha)
    return decode_with(lambda toks: seq_logits(toks)[:, -1], prompt, temperature=temperature, top_p=top_p,
                       max_new=max_new, seed=seed, context_len=model_t0.config.context_len)


# ---------------------------------------------------------------- sweeps

WEIGHT_SWEEP_COLUMNS = ["t_prime", "beta", "mean_reward", "stderr", "n", "error"]
LOGIT_COMPARE_COLUMNS = ["t0", "t1", "alpha", "mean_reward_extrapolated", "mean_reward_real_t1", "stderr", "n",
                         "error"]


def _dedup(grid, what):
    seen, out = set(), []
    for g in grid:
        if g in seen:
            continue
        seen.add(g)
        out.append(g)
    if len(out) != len(list(grid)):
        warnings.warn(f"duplicate entries removed from {what}", UserWarning, stacklevel=3)
    return out


def _fmt(v):
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return v


def _write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def sweep_weight_extrapolation(traj: Trajectory, t0: int, t1: int, grid, task: TaskSpec, *,
                               config: ModelConfig | None = None, eval_kwargs: dict | None = None,
                               out_csv=None) -> list[dict]:
    """Evaluate the weight-extrapolated model at every ``t_prime`` in ``grid``.

    A failing grid point is recorded in the ``error`` column and the sweep
    moves on.
    """
    grid = list(grid)
    if grid != sorted(grid):
        raise ValueError("t_prime grid must be sorted")
    grid = _dedup(grid, "t_prime grid")
    est = WeightExtrapolator(t0, t1).fit(traj)
    if config is not None:
        est.config_ = config
    if est.config_ is None:
        raise ValueError("no ModelConfig available for evaluation")
    rows = []
    for tp in grid:
        spec = ExtrapolationSpec(t0, t1, tp)
        row = {"t_prime": tp, "beta": spec.coefficient}
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", InterpolationWarning)
                model = est.predict(tp)
            res = evaluate(model, task, **(eval_kwargs or {}))
            row.update(mean_reward=res.mean_reward, stderr=res.stderr, n=res.n, error="")
        except Exception as exc:  # a bad grid point must not end the sweep
            row.update(mean_reward=float("nan"), stderr=float("nan"), n=0, error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    if out_csv is not None:
        _write_rows(out_csv, rows, WEIGHT_SWEEP_COLUMNS)
    return rows


def evaluate_logit_extrapolation(model_t0, model_t1, alpha, task: TaskSpec, **eval_kwargs) -> EvalResult:
    _check_pair(model_t0, model_t1)
    return evaluate(_combined(model_t0, model_t1, alpha), task, context_len=model_t0.config.context_len,
                    **eval_kwargs)


def compare_logit_extrapolation(traj: Trajectory, pairs, alphas, task: TaskSpec, *,
                                config: ModelConfig | None = None, eval_kwargs: dict | None = None,
                                out_csv=None) -> list[dict]:
    """Held-out reward of logit-extrapolated decoding next to the real ``t1`` checkpoint."""
    if config is None:
        config = ModelConfig.from_dict(json.loads(traj.metadata["model_config"]))
    eval_kwargs = eval_kwargs or {}
    alphas = _dedup(list(alphas), "alpha grid")
    rows = []
    for t0, t1 in pairs:
        ExtrapolationSpec(t0, t1, t1)
        m0 = PolicyModel.from_checkpoint(traj.path_at(t0), config)
        m1 = PolicyModel.from_checkpoint(traj.path_at(t1), config)
        real = evaluate(m1, task, **eval_kwargs)
        for a in alphas:
            row = {"t0": t0, "t1": t1, "alpha": a, "mean_reward_real_t1": real.mean_reward}
            try:
                res = evaluate_logit_extrapolation(m0, m1, a, task, **eval_kwargs)
                row.update(mean_reward_extrapolated=res.mean_reward, stderr=res.stderr, n=res.n, error="")
            except Exception as exc:  # recorded, sweep continues
                row.update(mean_reward_extrapolated=float("nan"), stderr=float("nan"), n=0,
                           error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    if out_csv is not None:
        _write_rows(out_csv, rows, LOGIT_COMPARE_COLUMNS)
    return rows

