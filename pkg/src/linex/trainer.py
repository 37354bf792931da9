"""Desk-scale RLVR training with the interleaved gradient/extrapolation schedule."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _seeding
from .grpo import GrpoConfig, NumericFailure, grpo_step, rollout_batch
from .linfit import InsufficientDataError
from .policy import AdamState, PolicyModel, decode_with, forward, log_softmax
from .tasks import TaskSpec
from .tensor_store import Trajectory, save_trajectory, write_checkpoint

__all__ = [
    "ScheduleSpec",
    "MetricsLog",
    "TrainResult",
    "EvalResult",
    "phase_at",
    "extrapolate_step",
    "train",
    "evaluate",
    "heldout_prompts",
    "gradient_stability_report",
    "METRICS_COLUMNS",
]

METRICS_COLUMNS = ["step", "phase", "mean_reward", "clip_frac", "grad_norm", "mean_abs_dw", "wall_ms"]


@dataclass(frozen=True)
class ScheduleSpec:
    """``m`` gradient steps then ``n`` extrapolation steps, repeated.

    ``anchor`` selects what an extrapolation step extends: ``"chain"`` uses
    the two most recent states (extrapolated ones included), ``"last_grad_pair"``
    keeps reusing the difference across the last gradient step. ``adam``
    decides whether optimizer moments survive an extrapolation phase
    (``"freeze"``) or restart on the next gradient step (``"reset"``).
    """

    m: int = 1
    n: int = 0
    beta: float = 2.0
    anchor: str = "chain"
    adam: str = "freeze"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1: every cycle starts with a gradient step")
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if self.n > 0 and not self.beta > 1:
            raise ValueError(f"beta must be > 1 for extrapolation, got {self.beta}")
        if self.anchor not in ("chain", "last_grad_pair"):
            raise ValueError(f"unknown anchor mode {self.anchor!r}")
        if self.adam not in ("freeze", "reset"):
            raise ValueError(f"unknown adam policy {self.adam!r}")

    @property
    def cycle(self) -> int:
        return self.m + self.n

    @classmethod
    def parse(cls, text: str, **kw) -> "ScheduleSpec":
        """Parse ``"m,n"`` or ``"m,n,beta"``."""
        parts = [p.strip() for p in str(text).split(",")]
        if len(parts) not in (2, 3):
            raise ValueError(f"schedule must be 'm,n' or 'm,n,beta', got {text!r}")
        m, n = int(parts[0]), int(parts[1])
        if len(parts) == 3:
            kw["beta"] = float(parts[2])
        return cls(m=m, n=n, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def phase_at(k: int, schedule: ScheduleSpec) -> str:
    return "GRAD" if k % schedule.cycle < schedule.m else "EXTRA"


def extrapolate_step(prev: dict, cur: dict, beta: float) -> dict:
    """``prev + beta * (cur - prev)`` per tensor, computed in float64."""
    out = {}
    for name, c in cur.items():
        p = prev[name].astype(np.float64)
        # overflow surfaces as inf and is reported by the caller
        with np.errstate(over="ignore"):
            out[name] = (p + beta * (c.astype(np.float64) - p)).astype(c.dtype)
    return out


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)
    window: int = 10
    grad_windows: list[np.ndarray] = field(default_factory=list)
    window_steps: list[list[int]] = field(default_factory=list)
    window_dw: list[list[float]] = field(default_factory=list)

    def grad_steps(self) -> int:
        return sum(1 for r in self.rows if r["phase"] == "GRAD")

    def record_gradient(self, step: int, flat_grad: np.ndarray, mean_abs_dw: float) -> None:
        if not self.window_steps or len(self.window_steps[-1]) >= self.window:
            self.grad_windows.append(np.zeros_like(flat_grad))
            self.window_steps.append([])
            self.window_dw.append([])
        self.grad_windows[-1] += flat_grad
        self.window_steps[-1].append(step)
        self.window_dw[-1].append(mean_abs_dw)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r[k]) for k in METRICS_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class TrainResult:
    model: PolicyModel
    state: AdamState
    log: MetricsLog
    trajectory: Trajectory | None


def _flat_grad(grads: dict) -> np.ndarray:
    return np.concatenate([grads[k].reshape(-1) for k in sorted(grads)])


def train(model: PolicyModel, task: TaskSpec, cfg: GrpoConfig, schedule: ScheduleSpec,
          total_steps: int, checkpoint_every: int, *, seed: int = 0, out_dir=None,
          run_id: str = "run", grad_window: int = 10, record_gradients: bool = True,
          wall_clock: bool = True, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place for ``total_steps`` global steps.

    Global step ``k`` maps ``W_k`` to ``W_{k+1}``: a GRPO update when
    ``k mod (m + n) < m``, otherwise ``W_{k-1} + beta * (W_k - W_{k-1})``.
    Checkpoint ``step`` holds ``W_step``; steps 0, every ``checkpoint_every``-th
    and the final one are written when ``out_dir`` is given.
    """
    if checkpoint_every < 1:
        raise ValueError("checkpoint_every must be >= 1")
    if total_steps < 0:
        raise ValueError("total_steps must be >= 0")
    if task.vocab_size != model.config.vocab_size:
        raise ValueError(f"task vocabulary {task.vocab_size} != model vocabulary {model.config.vocab_size}")
    state = AdamState(lr=cfg.lr)
    log = MetricsLog(window=grad_window)
    entries = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def checkpoint(step):
        if out is None:
            return
        path = out / f"ckpt_{step:06d}.lnxt"
        write_checkpoint(model.to_checkpoint(step), path)
        entries.append((step, path))

    checkpoint(0)
    prev = None           # W_{k-1}
    grad_delta = None     # W_b - W_a across the last gradient step (float64)
    pending_reset = False
    for k in range(total_steps):
        t0 = time.perf_counter()
        phase = phase_at(k, schedule)
        cur = {name: p.copy() for name, p in model.params.items()}
        if phase == "GRAD":
            if pending_reset:
                state.reset()
                pending_reset = False
            prompts = task.sample_prompts(cfg.prompts_per_batch, _seeding.rng_for(seed, _seeding.PROMPTS, k))
            groups = rollout_batch(model, prompts, cfg.group_size, _seeding.rng_for(seed, _seeding.ROLLOUT, k),
                                   task, cfg.temperature, cfg.top_p)
            metrics = grpo_step(model, state, groups, cfg)
            grads = metrics.pop("grad")
            if record_gradients:
                log.record_gradient(k, _flat_grad(grads), metrics["mean_abs_dw"])
            grad_delta = {n: model.params[n].astype(np.float64) - cur[n].astype(np.float64) for n in cur}
        else:
            if prev is None:
                raise RuntimeError("extrapolation needs a previous state")
            if schedule.anchor == "chain":
                new = extrapolate_step(prev, cur, schedule.beta)
            else:
                with np.errstate(over="ignore"):
                    new = {n: (cur[n].astype(np.float64) + (schedule.beta - 1.0) * grad_delta[n]).astype(cur[n].dtype)
                           for n in cur}
            for n, v in new.items():
                if not np.all(np.isfinite(v)):
                    raise NumericFailure(f"extrapolation produced non-finite values in {n!r} at step {k}",
                                         {"step": k, "tensor": n})
            dw = sum(float(np.abs(new[n].astype(np.float64) - cur[n].astype(np.float64)).sum()) for n in cur)
            model.params = new
            metrics = {"mean_reward": float("nan"), "clip_frac": float("nan"), "grad_norm": float("nan"),
                       "mean_abs_dw": dw / model.n_params}
            if schedule.adam == "reset":
                pending_reset = True
        prev = cur
        row = {"step": k, "phase": phase, **metrics,
               "wall_ms": (time.perf_counter() - t0) * 1e3 if wall_clock else 0.0}
        log.rows.append(row)
        if on_step is not None:
            on_step(row)
        if (k + 1) % checkpoint_every == 0 or k + 1 == total_steps:
            checkpoint(k + 1)

    traj = None
    if out is not None:
        log.write_csv(out / "metrics.csv")
        traj = Trajectory(run_id, entries, {
            "model_config": json.dumps(model.config.to_dict(), sort_keys=True),
            "task": json.dumps(task.to_dict(), sort_keys=True),
            "grpo": json.dumps(cfg.to_dict(), sort_keys=True),
            "schedule": json.dumps(schedule.to_dict(), sort_keys=True),
            "seed": str(seed),
            "advantage_std": "population",
        })
        save_trajectory(traj, out / "trajectory.json")
    return TrainResult(model, state, log, traj)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    mean_reward: float
    stderr: float
    n: int


def heldout_prompts(task: TaskSpec, n: int, seed: int) -> list[np.ndarray]:
    return task.sample_prompts(n, _seeding.rng_for(seed, _seeding.EVAL_PROMPTS))


def evaluate(seq_logits, task: TaskSpec, *, n_prompts: int = 256, samples: int = 1, seed: int = 12345,
             mode: str = "sample", temperature: float = 1.0, top_p: float = 1.0,
             context_len: int | None = None) -> EvalResult:
    """Held-out mean reward of a policy.

    ``seq_logits`` is a :class:`PolicyModel` or a callable mapping a token
    batch ``(B, T)`` to logits ``(B, T, V)``. ``mode="sample"`` decodes
    ``samples`` completions per prompt and averages verifier rewards;
    ``mode="expected"`` returns the exact probability of the correct answer
    under untempered, untruncated sampling (no sampling noise).
    """
    if isinstance(seq_logits, PolicyModel):
        model = seq_logits
        context_len = model.config.context_len
        seq_logits = lambda toks: forward(model, toks).logits  # noqa: E731
    if context_len is None:
        raise ValueError("context_len is required when passing a logits callable")
    prompts = heldout_prompts(task, n_prompts, seed)
    per_prompt = np.zeros(len(prompts))
    by_len = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    for length in sorted(by_len):
        idxs = by_len[length]
        batch = np.stack([prompts[i] for i in idxs])
        n_new = task.answer_len(batch[0])
        if mode == "expected":
            answers = np.stack([task.answer(p) for p in batch])
            full = np.concatenate([batch, answers], axis=1)
            lp = log_softmax(np.asarray(seq_logits(full), dtype=np.float64)[:, :-1])
            picked = np.take_along_axis(lp, full[:, 1:, None], axis=-1)[..., 0][:, length - 1:]
            per_prompt[idxs] = np.exp(picked.sum(axis=1))
        elif mode == "sample":
            rep = np.repeat(batch, samples, axis=0)
            res = decode_with(lambda toks: seq_logits(toks)[:, -1], rep, temperature=temperature, top_p=top_p,
                              max_new=n_new, seed=_seeding.rng_for(seed, _seeding.EVAL_SAMPLING, length),
                              context_len=context_len)
            rewards = np.array([task.reward(p, c) for p, c in zip(rep, res.completion)])
            per_prompt[idxs] = rewards.reshape(len(idxs), samples).mean(axis=1)
        else:
            raise ValueError(f"unknown evaluation mode {mode!r}")
    n = len(prompts)
    mean = float(per_prompt.mean())
    stderr = float(per_prompt.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return EvalResult(mean, stderr, n * (samples if mode == "sample" else 1))


# ---------------------------------------------------------------- diagnostics

STABILITY_COLUMNS = ["window", "start_step", "end_step", "n_steps", "cosine_prev", "mean_abs_dw", "cv_abs_dw"]


def gradient_stability_report(log: MetricsLog, csv_path=None) -> dict:
    """Windowed gradient-direction and update-size stability.

    For each window of gradient steps: cosine similarity between its summed
    gradient and the previous window's, and the coefficient of variation of
    per-step mean ``|dw|``.
    """
    if len(log.grad_windows) < 2:
        raise InsufficientDataError(f"need at least 2 windows of gradient steps, have {len(log.grad_windows)}")
    rows = []
    for i, (g, steps, dws) in enumerate(zip(log.grad_windows, log.window_steps, log.window_dw)):
        cos = float("nan")
        if i > 0:
            h = log.grad_windows[i - 1]
            denom = np.linalg.norm(g) * np.linalg.norm(h)
            cos = float(g @ h / denom) if denom > 0 else float("nan")
        dws = np.asarray(dws)
        mean_dw = float(dws.mean())
        cv = float(dws.std() / mean_dw) if mean_dw > 0 else float("nan")
        rows.append({"window": i, "start_step": steps[0], "end_step": steps[-1], "n_steps": len(steps),
                     "cosine_prev": cos, "mean_abs_dw": mean_dw, "cv_abs_dw": cv})
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=STABILITY_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})
    cosines = np.array([r["cosine_prev"] for r in rows[1:]])
    cvs = np.array([r["cv_abs_dw"] for r in rows])
    return {"windows": rows,
            "mean_cosine": float(np.nanmean(cosines)) if np.any(np.isfinite(cosines)) else float("nan"),
            "mean_cv": float(np.nanmean(cvs)) if np.any(np.isfinite(cvs)) else float("nan")}
