"""Linearity analyses over checkpoint trajectories.

Weights are read one checkpoint at a time and folded into a
:class:`~linex.linfit.FitAccumulator`; token log-probabilities and
activations come from replaying fixed probe sequences through every
checkpoint with teacher forcing.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _seeding
from .linfit import FilterPolicy, FitAccumulator, FitResult, InsufficientDataError, histogram
from .policy import ModelConfig, PolicyModel, decode, forward, token_logprobs
from .tasks import TaskSpec, Vocab
from .tensor_store import Trajectory

__all__ = [
    "SamplingPlan",
    "WeightAnalysis",
    "analyze_weights",
    "Probe",
    "generate_probes",
    "model_config_of",
    "LogprobMatrix",
    "probe_logprobs",
    "export_logprob_matrix",
    "import_logprob_matrix",
    "TokenCategory",
    "TokenFits",
    "TokenCategorizer",
    "categorize_tokens",
    "ActivationAnalysis",
    "analyze_activations",
    "DecompositionReport",
    "decompose_output_change",
    "decompose_layer",
]


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class SamplingPlan:
    """Which scalar coordinates to track.

    With ``per_tensor`` each tensor contributes ``ceil(fraction * size)``
    indices (at least one) drawn with its own stream keyed by the tensor name;
    otherwise ``ceil(fraction * total)`` indices are drawn over the
    concatenation of all tensors in name order.
    """

    fraction: float = 0.001
    seed: int = 0
    per_tensor: bool = True

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")

    def indices(self, schema: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
        names = sorted(schema)
        sizes = {n: int(np.prod(schema[n], dtype=np.int64)) if schema[n] else 1 for n in names}
        if self.per_tensor:
            out = {}
            for n in names:
                k = min(sizes[n], max(1, math.ceil(self.fraction * sizes[n])))
                rng = _seeding.rng_for(self.seed, _seeding.SAMPLING_PLAN, zlib.crc32(n.encode("utf-8")))
                out[n] = np.sort(rng.choice(sizes[n], size=k, replace=False))
            return out
        total = sum(sizes.values())
        k = min(total, max(1, math.ceil(self.fraction * total)))
        flat = np.sort(_seeding.rng_for(self.seed, _seeding.SAMPLING_PLAN).choice(total, size=k, replace=False))
        out, start = {}, 0
        for n in names:
            sel = flat[(flat >= start) & (flat < start + sizes[n])] - start
            if sel.size:
                out[n] = sel
            start += sizes[n]
        return out


def _layer_of(tensor: str) -> str:
    return tensor.split(".")[0]


# ---------------------------------------------------------------- weights

@dataclass
class WeightAnalysis:
    tensors: np.ndarray          # tensor name per series
    indices: np.ndarray          # flat index within the tensor
    result: FitResult
    steps: list[int]
    trivial: bool = False        # only two checkpoints: R^2 is 1 by construction

    def tensor_summary(self) -> list[dict]:
        rows = []
        for name in sorted(set(self.tensors.tolist())):
            sel = self.tensors == name
            kept = self.result.kept[sel]
            r2 = self.result.r2[sel][kept]
            rows.append({
                "tensor": name,
                "layer": _layer_of(name),
                "n": int(sel.sum()),
                "n_filtered": int((~kept).sum()),
                "mean_r2": float(r2.mean()) if r2.size else float("nan"),
                "median_r2": float(np.median(r2)) if r2.size else float("nan"),
            })
        return rows

    def summary(self, bin_edges=None, threshold: float = 0.7) -> dict:
        h = histogram(self.result, bin_edges, threshold)
        return {"steps": self.steps, "trivial_fit": self.trivial, "histogram": h.to_dict(),
                f"fraction_r2_gt_{threshold:g}": h.to_dict()[f"fraction_r2_gt_{threshold:g}"],
                "median_r2": h.to_dict()["median_r2"]}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        r = self.result
        with open(out / "weight_fits.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tensor", "index", "slope", "intercept", "r2", "filtered"])
            for i in range(len(r)):
                w.writerow([self.tensors[i], int(self.indices[i]), repr(float(r.slope[i])),
                            repr(float(r.intercept[i])), _csv_float(r.r2[i]), int(r.filtered[i] or r.constant[i])])
        _write_dict_rows(out / "layer_summary.csv", self.tensor_summary(),
                         ["tensor", "layer", "n", "n_filtered", "mean_r2", "median_r2"])


def _csv_float(x) -> str:
    x = float(x)
    return "" if not np.isfinite(x) else repr(x)


def _write_dict_rows(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({k: (_csv_float(v) if isinstance(v, float) else v) for k, v in row.items()})


def analyze_weights(traj: Trajectory, plan: SamplingPlan | None = None, policy: FilterPolicy | None = None,
                    warmup_steps: int = 0) -> WeightAnalysis:
    """Fit every sampled weight against training step, one checkpoint at a time."""
    plan = plan or SamplingPlan()
    traj = traj.after(warmup_steps)
    if len(traj) < 2:
        raise InsufficientDataError(f"need at least 2 checkpoints after warmup, have {len(traj)}")
    first = traj.reader(traj.steps[0])
    schema = first.schema()
    idx = plan.indices(schema)
    names = sorted(idx)
    tensors = np.concatenate([np.full(idx[n].size, n, dtype=object) for n in names])
    flat_idx = np.concatenate([idx[n] for n in names])
    acc = FitAccumulator(k=flat_idx.size)
    for step in traj.steps:
        reader = traj.reader(step)
        if reader.schema() != schema:
            raise ValueError(f"checkpoint at step {step} does not share the trajectory schema")
        row = np.concatenate([reader.read(n).reshape(-1)[idx[n]] for n in names])
        acc.accumulate(step, row)
    return WeightAnalysis(tensors, flat_idx, acc.finalize(policy), list(traj.steps), trivial=len(traj) == 2)


# ---------------------------------------------------------------- probes

@dataclass
class Probe:
    tokens: np.ndarray
    prompt_len: int
    logprobs: np.ndarray | None = None   # recorded at generation time

    def to_dict(self) -> dict:
        return {"tokens": [int(t) for t in self.tokens], "prompt_len": int(self.prompt_len)}


def model_config_of(traj: Trajectory) -> ModelConfig:
    try:
        return ModelConfig.from_dict(json.loads(traj.metadata["model_config"]))
    except KeyError:
        raise ValueError("trajectory metadata has no 'model_config'; pass a ModelConfig explicitly") from None


def task_of(traj: Trajectory) -> TaskSpec:
    try:
        return TaskSpec.from_dict(json.loads(traj.metadata["task"]))
    except KeyError:
        raise ValueError("trajectory metadata has no 'task'") from None


def generate_probes(model: PolicyModel, task: TaskSpec, n_prompts: int = 4, per_prompt: int = 16,
                    seed: int = 0, temperature: float = 1.0, top_p: float = 1.0) -> list[Probe]:
    """Sample probe sequences from ``model`` (normally the step-0 checkpoint)."""
    prompts = task.sample_prompts(n_prompts, _seeding.rng_for(seed, _seeding.PROBES, 0))
    probes = []
    for i, p in enumerate(prompts):
        batch = np.repeat(p[None, :], per_prompt, axis=0)
        res = decode(model, batch, temperature=temperature, top_p=top_p, max_new=task.answer_len(p),
                     seed=_seeding.derive_seed(seed, _seeding.PROBES, 1, i))
        for row, lp in zip(res.tokens, res.logprobs):
            probes.append(Probe(row.copy(), len(p), lp.copy()))
    return probes


@dataclass
class LogprobMatrix:
    steps: list[int]
    token_ids: np.ndarray
    token_strs: list[str]
    pos: np.ndarray
    values: np.ndarray                 # (n_tokens, n_steps)

    def __post_init__(self):
        self.steps = [int(s) for s in self.steps]
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.token_ids), len(self.steps)):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"{len(self.token_ids)} tokens x {len(self.steps)} steps")
        for a, b in zip(self.steps, self.steps[1:]):
            if b <= a:
                raise ValueError(f"steps must be strictly increasing, got {a} then {b}")

    def __eq__(self, other):
        return (isinstance(other, LogprobMatrix) and self.steps == other.steps
                and np.array_equal(self.token_ids, other.token_ids) and list(self.token_strs) == list(other.token_strs)
                and np.array_equal(self.pos, other.pos) and np.array_equal(self.values, other.values))


def probe_logprobs(traj: Trajectory, probes: list[Probe], config: ModelConfig | None = None,
                   evaluator=None) -> LogprobMatrix:
    """Teacher-forced log-probability of every generated probe token at every checkpoint.

    ``evaluator(model, tokens) -> (B, T - 1)`` defaults to
    :func:`~linex.policy.token_logprobs`.
    """
    config = config or model_config_of(traj)
    evaluator = evaluator or token_logprobs
    vocab = Vocab(config.vocab_size)
    ids, strs, pos = [], [], []
    for p in probes:
        for j in range(p.prompt_len, len(p.tokens)):
            ids.append(int(p.tokens[j]))
            strs.append(vocab.token_str(p.tokens[j]))
            pos.append(j)
    values = np.zeros((len(ids), len(traj)))
    for s, step in enumerate(traj.steps):
        model = PolicyModel.from_checkpoint(traj.path_at(step), config)
        values[:, s] = _probe_column(model, probes, evaluator)
    return LogprobMatrix(list(traj.steps), np.array(ids, dtype=np.int64), strs, np.array(pos, dtype=np.int64), values)


def _probe_column(model, probes, evaluator) -> np.ndarray:
    chunks = [None] * len(probes)
    by_len = {}
    for i, p in enumerate(probes):
        by_len.setdefault(len(p.tokens), []).append(i)
    for length, idxs in sorted(by_len.items()):
        lp = evaluator(model, np.stack([probes[i].tokens for i in idxs]))
        for row, i in zip(lp, idxs):
            chunks[i] = row[probes[i].prompt_len - 1:]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def export_logprob_matrix(matrix: LogprobMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token_id", "token_str", "pos"] + [f"step_{s}" for s in matrix.steps])
        for i in range(len(matrix.token_ids)):
            w.writerow([int(matrix.token_ids[i]), matrix.token_strs[i], int(matrix.pos[i])]
                       + [repr(float(v)) for v in matrix.values[i]])


class LogprobParseError(ValueError):
    pass


def import_logprob_matrix(path) -> LogprobMatrix:
    """Read a ``token_id,token_str,pos,step_<s>,...`` CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise LogprobParseError(f"{path}: empty file")
    header = rows[0]
    if header[:3] != ["token_id", "token_str", "pos"] or len(header) < 4:
        raise LogprobParseError(f"{path}:1: header must start with token_id,token_str,pos and list step columns")
    steps = []
    for col in header[3:]:
        if not col.startswith("step_"):
            raise LogprobParseError(f"{path}:1: bad step column {col!r}")
        try:
            steps.append(int(col[5:]))
        except ValueError:
            raise LogprobParseError(f"{path}:1: bad step column {col!r}") from None
    for a, b in zip(steps, steps[1:]):
        if b <= a:
            raise LogprobParseError(f"{path}:1: steps not strictly increasing ({a} then {b})")
    ids, strs, pos, vals = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise LogprobParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            ids.append(int(row[0]))
            strs.append(row[1])
            pos.append(int(row[2]))
            vals.append([float(v) for v in row[3:]])
        except ValueError as exc:
            raise LogprobParseError(f"{path}:{lineno}: {exc}") from None
    values = np.array(vals, dtype=np.float64).reshape(len(ids), len(steps))
    return LogprobMatrix(steps, np.array(ids, dtype=np.int64), strs, np.array(pos, dtype=np.int64), values)


# ---------------------------------------------------------------- token categories

class TokenCategory(str, Enum):
    CONNECTOR_LINEAR = "CONNECTOR_LINEAR"
    VOLATILE = "VOLATILE"
    STABLE = "STABLE"


@dataclass
class TokenFits:
    result: FitResult
    std: np.ndarray
    categories: np.ndarray       # array of TokenCategory
    var_threshold: float
    r2_threshold: float

    def counts(self) -> dict[str, int]:
        cats = list(self.categories)
        return {c.value: cats.count(c) for c in TokenCategory}

    def write(self, path, matrix: LogprobMatrix) -> None:
        r = self.result
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["token_id", "token_str", "pos", "slope", "intercept", "r2", "std", "category",
                        "var_threshold", "r2_threshold"])
            for i in range(len(r)):
                w.writerow([int(matrix.token_ids[i]), matrix.token_strs[i], int(matrix.pos[i]),
                            repr(float(r.slope[i])), repr(float(r.intercept[i])), _csv_float(r.r2[i]),
                            repr(float(self.std[i])), self.categories[i].value, self.var_threshold,
                            self.r2_threshold])

    def summary(self, threshold: float = 0.7) -> dict:
        h = histogram(self.result, None, threshold)
        return {"histogram": h.to_dict(), "categories": self.counts(),
                "var_threshold": self.var_threshold, "r2_threshold": self.r2_threshold,
                f"fraction_r2_gt_{threshold:g}": h.to_dict()[f"fraction_r2_gt_{threshold:g}"],
                "median_r2": h.to_dict()["median_r2"]}


def categorize_tokens(matrix: LogprobMatrix, var_threshold: float = 0.1, r2_threshold: float = 0.7) -> TokenFits:
    """Fit each token's log-prob against step and sort it into a category.

    STABLE when the population std across steps is below ``var_threshold``
    (nats); otherwise CONNECTOR_LINEAR when R^2 exceeds ``r2_threshold``,
    else VOLATILE.
    """
    est = TokenCategorizer(var_threshold=var_threshold, r2_threshold=r2_threshold)
    est.fit(matrix.values, matrix.steps)
    return TokenFits(est.result_, est.std_, est.categories_, float(var_threshold), float(r2_threshold))


class TokenCategorizer(BaseEstimator):
    """Assign :class:`TokenCategory` labels to log-prob trajectories.

    ``fit(X, steps)`` takes ``X`` of shape ``(n_tokens, n_steps)``.
    """

    def __init__(self, var_threshold=0.1, r2_threshold=0.7):
        self.var_threshold = var_threshold
        self.r2_threshold = r2_threshold

    def fit(self, X, steps=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"expected a 2-D (tokens x steps) matrix, got shape {X.shape}")
        if X.shape[1] < 3:
            raise InsufficientDataError(f"need at least 3 steps, have {X.shape[1]}")
        steps = np.arange(X.shape[1]) if steps is None else np.asarray(steps, dtype=np.float64)
        acc = FitAccumulator(k=X.shape[0])
        for s, col in zip(steps, X.T):
            acc.accumulate(s, col)
        self.result_ = acc.finalize(FilterPolicy(min_changes=0))
        self.std_ = X.std(axis=1)
        self.categories_ = self._label(self.std_, self.result_.r2)
        return self

    def _label(self, std, r2):
        cats = np.empty(std.shape[0], dtype=object)
        stable = std < self.var_threshold
        linear = ~stable & (np.nan_to_num(r2, nan=0.0) > self.r2_threshold)
        cats[:] = TokenCategory.VOLATILE
        cats[linear] = TokenCategory.CONNECTOR_LINEAR
        cats[stable] = TokenCategory.STABLE
        return cats

    def predict(self, X=None):
        check_is_fitted(self, "categories_")
        if X is None:
            return self.categories_
        return TokenCategorizer(self.var_threshold, self.r2_threshold).fit(X).categories_

    def fit_predict(self, X, steps=None):
        return self.fit(X, steps).categories_


# ---------------------------------------------------------------- activations

@dataclass
class ActivationAnalysis:
    taps: dict[str, dict]    # tap -> {"result", "probe", "pos", "dim"}
    steps: list[int]

    def layer_summary(self, threshold: float = 0.7) -> list[dict]:
        rows = []
        for tap, d in self.taps.items():
            h = histogram(d["result"], None, threshold)
            rows.append({"tap": tap, "n": h.n_total, "n_kept": h.n_kept, "mean_r2": h.mean_r2,
                         "median_r2": h.median_r2, "fraction_r2_gt_0.7": h.fraction_above})
        return rows

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "activation_fits.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tap", "probe", "pos", "dim", "slope", "intercept", "r2", "filtered"])
            for tap, d in self.taps.items():
                r = d["result"]
                for i in range(len(r)):
                    w.writerow([tap, int(d["probe"][i]), int(d["pos"][i]), int(d["dim"][i]),
                                repr(float(r.slope[i])), repr(float(r.intercept[i])), _csv_float(r.r2[i]),
                                int(r.filtered[i] or r.constant[i])])
        _write_dict_rows(out / "activation_layer_summary.csv", self.layer_summary(),
                         ["tap", "n", "n_kept", "mean_r2", "median_r2", "fraction_r2_gt_0.7"])


def analyze_activations(traj: Trajectory, probes: list[Probe], taps=None, plan: SamplingPlan | None = None,
                        config: ModelConfig | None = None, policy: FilterPolicy | None = None) -> ActivationAnalysis:
    """Fit tapped activations of every probe position against training step.

    Valid taps are ``emb``, ``blk{i}`` (residual stream after block ``i``) and
    ``logits``. Coordinates are ``(probe, position, dim)`` triples, sampled by
    ``plan`` (all of them by default).
    """
    config = config or model_config_of(traj)
    valid = ["emb"] + [f"blk{i}" for i in range(config.n_layers)] + ["logits"]
    taps = list(taps) if taps else valid[1:]
    unknown = [t for t in taps if t not in valid]
    if unknown:
        raise ValueError(f"unknown taps {unknown}; valid taps: {', '.join(valid)}")
    if len(traj) < 2:
        raise InsufficientDataError("need at least 2 checkpoints")
    plan = plan or SamplingPlan(fraction=1.0)
    policy = policy or FilterPolicy(min_changes=0)

    width = {t: (config.vocab_size if t == "logits" else config.d_model) for t in taps}
    coords = {}
    for t in taps:
        probe_id = np.concatenate([np.full(len(p.tokens) * width[t], i) for i, p in enumerate(probes)])
        pos = np.concatenate([np.repeat(np.arange(len(p.tokens)), width[t]) for p in probes])
        dim = np.concatenate([np.tile(np.arange(width[t]), len(p.tokens)) for p in probes])
        sel = plan.indices({t: (probe_id.size,)})[t]
        coords[t] = (probe_id[sel], pos[sel], dim[sel], sel)
    accs = {t: FitAccumulator(k=coords[t][3].size) for t in taps}
    for step in traj.steps:
        model = PolicyModel.from_checkpoint(traj.path_at(step), config)
        flat = {t: [] for t in taps}
        for p in probes:
            out = forward(model, p.tokens)
            for t in taps:
                flat[t].append(out.taps[t][0].reshape(-1))
        for t in taps:
            accs[t].accumulate(step, np.concatenate(flat[t])[coords[t][3]])
    result = {t: {"result": accs[t].finalize(policy), "probe": coords[t][0], "pos": coords[t][1],
                  "dim": coords[t][2]} for t in taps}
    return ActivationAnalysis(result, list(traj.steps))


# ---------------------------------------------------------------- decomposition

@dataclass
class DecompositionReport:
    """Per-sample norms of the pieces of ``W1 x1 - W0 x0``."""

    first_order_weight: np.ndarray   # |dW x0|
    first_order_input: np.ndarray    # |W0 dx|
    second_order: np.ndarray         # |dW dx|
    total: np.ndarray                # |W1 x1 - W0 x0|
    residual: np.ndarray             # |total - sum of the three terms| (vector norm)
    meta: dict = field(default_factory=dict)

    @property
    def second_to_first_ratio(self) -> np.ndarray:
        first = self.first_order_weight + self.first_order_input
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(first > 0, self.second_order / first, np.nan)

    def summary(self) -> dict:
        ratio = self.second_to_first_ratio
        finite = ratio[np.isfinite(ratio)]
        q = (lambda x: float(np.quantile(finite, x))) if finite.size else (lambda x: None)
        return {"n_samples": int(self.total.size),
                "mean_first_order_weight": float(self.first_order_weight.mean()) if self.total.size else None,
                "mean_first_order_input": float(self.first_order_input.mean()) if self.total.size else None,
                "mean_second_order": float(self.second_order.mean()) if self.total.size else None,
                "mean_total": float(self.total.mean()) if self.total.size else None,
                "ratio_second_to_first": {"median": q(0.5), "p90": q(0.9), "max": q(1.0)},
                **self.meta}

    def write_csv(self, path, extra: dict | None = None) -> None:
        extra = extra or {}
        cols = list(extra)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample"] + cols + ["first_order_weight", "first_order_input", "second_order",
                                            "total", "residual", "ratio_second_to_first"])
            ratio = self.second_to_first_ratio
            for i in range(self.total.size):
                w.writerow([i] + [int(extra[c][i]) for c in cols]
                           + [repr(float(v)) for v in (self.first_order_weight[i], self.first_order_input[i],
                                                       self.second_order[i], self.total[i], self.residual[i])]
                           + [_csv_float(ratio[i])])


def decompose_output_change(W0, W1, x0, x1) -> DecompositionReport:
    """Split the change of ``y = W x`` into weight, input and cross terms.

    ``W`` has shape ``(out, in)``; ``x`` is ``(in,)`` or a batch ``(n, in)``.
    """
    W0 = np.asarray(W0, dtype=np.float64)
    W1 = np.asarray(W1, dtype=np.float64)
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if W0.ndim != 2 or W0.shape != W1.shape:
        raise ValueError(f"weight shapes differ or are not matrices: {W0.shape} vs {W1.shape}")
    if x0.shape != x1.shape or x0.shape[1] != W0.shape[1]:
        raise ValueError(f"inputs {x0.shape}/{x1.shape} are not conformable with weights {W0.shape}")
    dW = W1 - W0
    dx = x1 - x0
    a = x0 @ dW.T
    b = dx @ W0.T
    c = dx @ dW.T
    total = x1 @ W1.T - x0 @ W0.T
    norm = lambda v: np.linalg.norm(v, axis=1)  # noqa: E731
    return DecompositionReport(norm(a), norm(b), norm(c), norm(total), norm(total - (a + b + c)))


def decompose_layer(traj: Trajectory, t0: int, t1: int, probes: list[Probe], layer: str,
                    config: ModelConfig | None = None) -> tuple[DecompositionReport, dict]:
    """Decompose the output change of linear layer ``layer`` between two checkpoints.

    Samples are every position of every probe; returns the report and the
    ``probe``/``pos`` index arrays for each sample.
    """
    config = config or model_config_of(traj)
    m0 = PolicyModel.from_checkpoint(traj.path_at(t0), config)
    m1 = PolicyModel.from_checkpoint(traj.path_at(t1), config)
    if layer not in m0.linear_names():
        raise ValueError(f"unknown linear layer {layer!r}; valid: {', '.join(m0.linear_names())}")
    xs0, xs1, pid, pos = [], [], [], []
    for i, p in enumerate(probes):
        x0 = forward(m0, p.tokens, linear_inputs=True).taps["linear_in:" + layer][0]
        x1 = forward(m1, p.tokens, linear_inputs=True).taps["linear_in:" + layer][0]
        xs0.append(x0)
        xs1.append(x1)
        pid.append(np.full(x0.shape[0], i))
        pos.append(np.arange(x0.shape[0]))
    # stored as (in, out) for x @ W; the decomposition takes (out, in)
    W0 = m0.params[layer].astype(np.float64).T
    W1 = m1.params[layer].astype(np.float64).T
    rep = decompose_output_change(W0, W1, np.concatenate(xs0), np.concatenate(xs1))
    rep.meta = {"layer": layer, "t0": int(t0), "t1": int(t1)}
    return rep, {"probe": np.concatenate(pid), "pos": np.concatenate(pos)}
