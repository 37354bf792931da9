"""Group relative policy optimization on the toy policy."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import groupby

import numpy as np

from .policy import AdamState, NonFiniteGradientError, PolicyModel, adam_step, decode, logprob_backward
from .tasks import TaskSpec

__all__ = [
    "GrpoConfig",
    "RolloutGroup",
    "NumericFailure",
    "grpo_advantages",
    "clipped_surrogate",
    "rollout_group",
    "rollout_batch",
    "grpo_step",
]


class NumericFailure(FloatingPointError):
    """A training step produced non-finite numbers; ``diagnostics`` says where."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 16
    prompts_per_batch: int = 64
    clip_lo: float = 0.8
    clip_hi: float = 1.28
    temperature: float = 1.0
    top_p: float = 1.0
    lr: float = 1e-4
    adv_eps: float = 1e-6
    epochs: int = 1

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.prompts_per_batch < 1:
            raise ValueError("prompts_per_batch must be >= 1")
        if not 0 < self.clip_lo < 1 < self.clip_hi:
            raise ValueError(f"need 0 < clip_lo < 1 < clip_hi, got [{self.clip_lo}, {self.clip_hi}]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GrpoConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class RolloutGroup:
    prompt: np.ndarray          # (P,)
    completions: np.ndarray     # (G, L)
    old_logprobs: np.ndarray    # (G, L)
    rewards: np.ndarray         # (G,)

    @property
    def sequences(self) -> np.ndarray:
        G = self.completions.shape[0]
        return np.concatenate([np.tile(self.prompt, (G, 1)), self.completions], axis=1)


def grpo_advantages(rewards, eps: float = 1e-6) -> np.ndarray:
    """``(r - mean(r)) / (std(r) + eps)`` with the population standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 2:
        raise ValueError("need a group of at least two rewards")
    return (r - r.mean()) / (r.std() + eps)


def clipped_surrogate(logp_new, logp_old, adv, clip_lo: float, clip_hi: float):
    """Token-level clipped objective.

    Returns ``(value, d value / d logp_new, clip_fraction)`` where ``value`` is
    the mean over tokens of ``min(rho * A, clip(rho) * A)``.
    """
    logp_new = np.asarray(logp_new, dtype=np.float64)
    rho = np.exp(logp_new - np.asarray(logp_old, dtype=np.float64))
    adv = np.broadcast_to(np.asarray(adv, dtype=np.float64), rho.shape)
    unclipped = rho * adv
    clipped = np.clip(rho, clip_lo, clip_hi) * adv
    n = rho.size
    use_unclipped = unclipped <= clipped
    value = np.minimum(unclipped, clipped).sum() / n
    grad = np.where(use_unclipped, unclipped, 0.0) / n
    return float(value), grad, float(np.mean(~use_unclipped))


def rollout_group(model: PolicyModel, prompt, G: int, seed, task: TaskSpec,
                  temperature: float = 1.0, top_p: float = 1.0) -> RolloutGroup:
    """Sample ``G`` completions of one prompt and score them."""
    if G < 2:
        raise ValueError("group size must be >= 2")
    return rollout_batch(model, [np.asarray(prompt)], G, seed, task, temperature, top_p)[0]


def rollout_batch(model: PolicyModel, prompts, G: int, seed, task: TaskSpec,
                  temperature: float = 1.0, top_p: float = 1.0) -> list[RolloutGroup]:
    """Rollout groups for many prompts, decoding equal-length prompts together.

    Output order follows ``prompts``. Randomness is drawn per length bucket in
    order of first appearance, so results depend only on ``prompts`` and ``seed``.
    """
    prompts = [np.asarray(p, dtype=np.int64) for p in prompts]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out: list[RolloutGroup | None] = [None] * len(prompts)
    order = sorted(range(len(prompts)), key=lambda i: (len(prompts[i]), i))
    for _, idxs in groupby(order, key=lambda i: len(prompts[i])):
        idxs = list(idxs)
        batch = np.repeat(np.stack([prompts[i] for i in idxs]), G, axis=0)
        n_new = task.answer_len(prompts[idxs[0]])
        res = decode(model, batch, temperature=temperature, top_p=top_p, max_new=n_new, seed=rng)
        comp = res.completion.reshape(len(idxs), G, n_new)
        lps = res.logprobs.reshape(len(idxs), G, n_new)
        for j, i in enumerate(idxs):
            rewards = np.array([task.reward(prompts[i], c) for c in comp[j]])
            out[i] = RolloutGroup(prompts[i], comp[j], lps[j], rewards)
    return out


def grpo_step(model: PolicyModel, state: AdamState, groups: list[RolloutGroup], cfg: GrpoConfig) -> dict:
    """One on-policy GRPO update (``cfg.epochs`` Adam steps over the batch).

    The gradient of the mean clipped surrogate over all completion tokens of
    the batch is ascended. Returns metrics; raises :class:`NumericFailure`
    without touching the model when the loss or gradient is not finite.
    """
    adv = [grpo_advantages(g.rewards, cfg.adv_eps) for g in groups]
    n_tokens = sum(g.completions.size for g in groups)
    buckets = {}
    for gi, g in enumerate(groups):
        buckets.setdefault(g.sequences.shape[1], []).append(gi)

    metrics = {}
    for _ in range(cfg.epochs):
        total = {}
        value = 0.0
        clipped = 0.0
        for length in sorted(buckets):
            gis = buckets[length]
            seqs = np.concatenate([groups[i].sequences for i in gis])
            P = seqs.shape[1] - groups[gis[0]].completions.shape[1]
            old = np.concatenate([groups[i].old_logprobs for i in gis])
            a = np.concatenate([np.repeat(adv[i], groups[i].completions.shape[1]).reshape(-1, groups[i].completions.shape[1])
                                for i in gis])
            bucket_stats = {}

            def objective(lp, P=P, old=old, a=a, stats=bucket_stats):
                new = lp[:, P - 1:]
                v, g, cf = clipped_surrogate(new, old, a, cfg.clip_lo, cfg.clip_hi)
                # rescale from a per-bucket mean to the batch-wide token mean
                scale = new.size / n_tokens
                stats["value"], stats["clip"] = v * scale, cf * new.size
                w = np.zeros_like(lp)
                w[:, P - 1:] = g * scale
                return v * scale, w

            grads, _ = logprob_backward(model, seqs, objective)
            value += bucket_stats["value"]
            clipped += bucket_stats["clip"]
            for k, g in grads.items():
                total[k] = total[k] + g if k in total else g
        grad_norm = float(np.sqrt(sum(float((g * g).sum()) for g in total.values())))
        if not np.isfinite(value) or not np.isfinite(grad_norm):
            raise NumericFailure("non-finite GRPO loss or gradient", {
                "loss": value, "grad_norm": grad_norm,
                "bad_tensors": sorted(k for k, g in total.items() if not np.all(np.isfinite(g))),
                "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
            })
        try:
            deltas = adam_step(model, {k: -g for k, g in total.items()}, state)
        except NonFiniteGradientError as exc:
            raise NumericFailure(str(exc), {"grad_norm": grad_norm}) from exc
        n_params = sum(d.size for d in deltas.values())
        metrics = {
            "mean_reward": float(np.mean(np.concatenate([g.rewards for g in groups]))),
            "surrogate": value,
            "clip_frac": clipped / n_tokens,
            "grad_norm": grad_norm,
            "mean_abs_dw": float(sum(np.abs(d).sum() for d in deltas.values()) / n_params),
            "grad": total,
        }
    metrics["mean_abs_dw_over_lr"] = metrics["mean_abs_dw"] / state.lr
    return metrics
