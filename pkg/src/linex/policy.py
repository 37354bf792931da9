"""Tiny decoder-only transformer with exact reverse-mode gradients and Adam.

Parameters are stored as float32 and every computation runs in float64.
Linear weights use the ``x @ W`` convention, i.e. shape ``(in, out)``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_finite, check_probability, check_tokens
from .tensor_store import Checkpoint, CheckpointReader, SchemaError

__all__ = [
    "ModelConfig",
    "PolicyModel",
    "ForwardOutput",
    "AdamState",
    "NonFiniteGradientError",
    "DecodeResult",
    "forward",
    "token_logprobs",
    "backward",
    "logprob_backward",
    "adam_step",
    "log_softmax",
    "sample_tokens",
    "decode",
    "decode_with",
]

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 24
    context_len: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ln_eps: float = 1e-5
    seed: int = 0
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "d_model", "n_heads", "n_layers", "mlp_ratio"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, V, h = self.d_model, self.vocab_size, self.d_model * self.mlp_ratio
        shapes = {"emb.tok": (V, d), "emb.pos": (self.context_len, d)}
        for i in range(self.n_layers):
            for w in "qkvo":
                shapes[f"blk{i}.attn.{w}"] = (d, d)
            shapes[f"blk{i}.mlp.up"] = (d, h)
            shapes[f"blk{i}.mlp.down"] = (h, d)
            for ln in ("ln1", "ln2"):
                shapes[f"blk{i}.{ln}.g"] = (d,)
                shapes[f"blk{i}.{ln}.b"] = (d,)
        shapes["ln_f.g"] = (d,)
        shapes["ln_f.b"] = (d,)
        shapes["head"] = (d, V)
        return shapes


@dataclass
class PolicyModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    n_forward: int = field(default=0, compare=False)
    n_backward: int = field(default=0, compare=False)

    @classmethod
    def init(cls, config: ModelConfig, zero_head: bool = False) -> "PolicyModel":
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in config.shapes().items():
            if name.endswith(".g"):
                arr = np.ones(shape)
            elif name.endswith(".b"):
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, config.init_std, size=shape)
            params[name] = arr.astype(np.float32)
        if zero_head:
            params["head"][...] = 0.0
        return cls(config, params)

    @classmethod
    def from_checkpoint(cls, source, config: ModelConfig) -> "PolicyModel":
        """Load from a checkpoint path, reader, or in-memory :class:`Checkpoint`."""
        if isinstance(source, Checkpoint):
            tensors = {k: np.asarray(v) for k, v in source.tensors.items()}
        else:
            reader = source if isinstance(source, CheckpointReader) else CheckpointReader(Path(source))
            tensors = {name: reader.read_native(name) for name in reader.names}
        expected = config.shapes()
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise SchemaError(f"checkpoint does not match model config; missing {missing}, unexpected {extra}")
        params = {}
        for name, shape in expected.items():
            arr = tensors[name]
            if tuple(arr.shape) != shape:
                raise SchemaError(f"tensor {name!r} has shape {tuple(arr.shape)}, config expects {shape}")
            params[name] = np.array(arr, dtype=np.float32)
        return cls(config, params)

    def to_checkpoint(self, step: int) -> Checkpoint:
        return Checkpoint(step=step, tensors={k: v.copy() for k, v in self.params.items()})

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        """All parameters concatenated in canonical (sorted-name) order, float64."""
        return np.concatenate([self.params[k].reshape(-1).astype(np.float64) for k in sorted(self.params)])

    def tap_names(self) -> list[str]:
        return [f"blk{i}" for i in range(self.config.n_layers)] + ["logits"]

    def linear_names(self) -> list[str]:
        names = []
        for i in range(self.config.n_layers):
            names += [f"blk{i}.attn.{w}" for w in "qkvo"] + [f"blk{i}.mlp.up", f"blk{i}.mlp.down"]
        return names + ["head"]


# ---------------------------------------------------------------- primitives

def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _layernorm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    d = dy.shape[-1]
    dg = (dy * xhat).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _mm_grad(x, dy):
    """Weight gradient of ``y = x @ W`` summed over all leading axes."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# ---------------------------------------------------------------- forward

@dataclass
class ForwardOutput:
    logits: np.ndarray
    taps: dict[str, np.ndarray] = field(default_factory=dict)
    cache: dict | None = None


def _as_f64(params):
    return {k: v.astype(np.float64) for k, v in params.items()}


def _forward(cfg: ModelConfig, P: dict, tokens: np.ndarray, keep_cache: bool, linear_inputs: bool = False):
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    mask = np.triu(np.full((T, T), -np.inf), k=1)
    cache = {"tokens": tokens, "blocks": []} if keep_cache else None
    taps = {}
    lin_in = {}

    h = P["emb.tok"][tokens] + P["emb.pos"][:T]
    taps["emb"] = h
    for i in range(cfg.n_layers):
        pre = f"blk{i}."
        a, ln1c = _layernorm(h, P[pre + "ln1.g"], P[pre + "ln1.b"], cfg.ln_eps)
        q = (a @ P[pre + "attn.q"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (a @ P[pre + "attn.k"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (a @ P[pre + "attn.v"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        p = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + mask)
        o = (p @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        h = h + o @ P[pre + "attn.o"]
        b, ln2c = _layernorm(h, P[pre + "ln2.g"], P[pre + "ln2.b"], cfg.ln_eps)
        u = b @ P[pre + "mlp.up"]
        gu, tu = _gelu(u)
        h = h + gu @ P[pre + "mlp.down"]
        taps[f"blk{i}"] = h
        if linear_inputs:
            for w in "qkv":
                lin_in[pre + "attn." + w] = a
            lin_in[pre + "attn.o"] = o
            lin_in[pre + "mlp.up"] = b
            lin_in[pre + "mlp.down"] = gu
        if keep_cache:
            cache["blocks"].append(dict(a=a, ln1c=ln1c, q=q, k=k, v=v, p=p, o=o,
                                        b=b, ln2c=ln2c, u=u, gu=gu, tu=tu))
    hf, lnfc = _layernorm(h, P["ln_f.g"], P["ln_f.b"], cfg.ln_eps)
    logits = hf @ P["head"]
    taps["logits"] = logits
    if linear_inputs:
        lin_in["head"] = hf
        taps.update({"linear_in:" + k: v for k, v in lin_in.items()})
    if keep_cache:
        cache.update(hf=hf, lnfc=lnfc)
    return logits, taps, cache


def forward(model: PolicyModel, tokens, *, keep_cache: bool = False,
            linear_inputs: bool = False) -> ForwardOutput:
    """Run the model on ``tokens`` (shape ``(T,)`` or ``(B, T)``).

    ``logits`` has shape ``(B, T, vocab)``. ``taps`` holds the embedding sum
    (``emb``), each block's residual output (``blk{i}``) and ``logits``; with
    ``linear_inputs`` it also holds the input of every linear layer under
    ``linear_in:<tensor name>``.
    """
    cfg = model.config
    tokens = check_tokens(tokens, cfg.vocab_size, cfg.context_len)
    model.n_forward += 1
    logits, taps, cache = _forward(cfg, _as_f64(model.params), tokens, keep_cache, linear_inputs)
    return ForwardOutput(logits, taps, cache)


def token_logprobs(model: PolicyModel, tokens) -> np.ndarray:
    """``log p(tokens[:, t] | tokens[:, :t])`` for ``t >= 1``, shape ``(B, T - 1)``."""
    out = forward(model, tokens)
    tokens = check_tokens(tokens, model.config.vocab_size, model.config.context_len)
    lp = log_softmax(out.logits[:, :-1])
    return np.take_along_axis(lp, tokens[:, 1:, None], axis=-1)[..., 0]


# ---------------------------------------------------------------- backward

def _backward_from_logits(cfg: ModelConfig, P: dict, cache: dict, dlogits: np.ndarray) -> dict:
    tokens = cache["tokens"]
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    G = {}

    G["head"] = _mm_grad(cache["hf"], dlogits)
    dhf = dlogits @ P["head"].T
    dh_, G["ln_f.g"], G["ln_f.b"] = _layernorm_back(dhf, P["ln_f.g"], cache["lnfc"])

    for i in reversed(range(cfg.n_layers)):
        pre = f"blk{i}."
        c = cache["blocks"][i]
        # MLP branch
        G[pre + "mlp.down"] = _mm_grad(c["gu"], dh_)
        dgu = dh_ @ P[pre + "mlp.down"].T
        du = _gelu_back(dgu, c["u"], c["tu"])
        G[pre + "mlp.up"] = _mm_grad(c["b"], du)
        db = du @ P[pre + "mlp.up"].T
        dx, G[pre + "ln2.g"], G[pre + "ln2.b"] = _layernorm_back(db, P[pre + "ln2.g"], c["ln2c"])
        dh_ = dh_ + dx
        # attention branch
        G[pre + "attn.o"] = _mm_grad(c["o"], dh_)
        do = (dh_ @ P[pre + "attn.o"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        p, q, k, v = c["p"], c["q"], c["k"], c["v"]
        dp = do @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ do
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        merge = lambda x: x.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)  # noqa: E731
        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        a = c["a"]
        G[pre + "attn.q"] = _mm_grad(a, dq)
        G[pre + "attn.k"] = _mm_grad(a, dk)
        G[pre + "attn.v"] = _mm_grad(a, dv)
        da = dq @ P[pre + "attn.q"].T + dk @ P[pre + "attn.k"].T + dv @ P[pre + "attn.v"].T
        dx, G[pre + "ln1.g"], G[pre + "ln1.b"] = _layernorm_back(da, P[pre + "ln1.g"], c["ln1c"])
        dh_ = dh_ + dx

    dtok = np.zeros_like(P["emb.tok"])
    np.add.at(dtok, tokens.reshape(-1), dh_.reshape(-1, cfg.d_model))
    G["emb.tok"] = dtok
    dpos = np.zeros_like(P["emb.pos"])
    dpos[:T] = dh_.sum(axis=0)
    G["emb.pos"] = dpos
    return G


def logprob_backward(model: PolicyModel, tokens, objective_fn) -> tuple[dict[str, np.ndarray], float]:
    """Gradient of a scalar function of the per-token log-probabilities.

    ``objective_fn(logp)`` receives ``logp`` of shape ``(B, T - 1)`` (see
    :func:`token_logprobs`) and returns ``(value, d value / d logp)``.
    """
    cfg = model.config
    tokens = check_tokens(tokens, cfg.vocab_size, cfg.context_len)
    model.n_backward += 1
    P = _as_f64(model.params)
    logits, _, cache = _forward(cfg, P, tokens, keep_cache=True)
    lp = log_softmax(logits[:, :-1])
    target = tokens[:, 1:, None]
    picked = np.take_along_axis(lp, target, axis=-1)[..., 0]
    value, wt = objective_fn(picked)
    wt = np.asarray(wt, dtype=np.float64)
    check_finite(wt, "log-prob weights")
    dl = -wt[..., None] * np.exp(lp)
    np.put_along_axis(dl, target, np.take_along_axis(dl, target, axis=-1) + wt[..., None], axis=-1)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = dl
    return _backward_from_logits(cfg, P, cache, dlogits), float(value)


def backward(model: PolicyModel, tokens, weights) -> tuple[dict[str, np.ndarray], float]:
    """Gradient of ``sum_{b,t} weights[b, t] * log p(tokens[b, t] | tokens[b, :t])``.

    ``weights`` has the shape of ``tokens``; column 0 has no prediction and
    must be zero. Returns ``(grads, objective)`` with float64 gradients keyed
    like ``model.params``.
    """
    cfg = model.config
    tokens = check_tokens(tokens, cfg.vocab_size, cfg.context_len)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if w.shape != tokens.shape:
        raise ValueError(f"weights shape {w.shape} does not match tokens {tokens.shape}")
    check_finite(w, "loss weights")
    if np.any(w[:, 0] != 0):
        raise ValueError("weights[:, 0] must be zero: position 0 has no prediction")
    wt = w[:, 1:]
    return logprob_backward(model, tokens, lambda lp: ((wt * lp).sum(), wt))


# ---------------------------------------------------------------- Adam

class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def reset(self) -> None:
        self.t = 0
        self.m.clear()
        self.v.clear()

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(model: PolicyModel, grads: dict, state: AdamState) -> dict[str, np.ndarray]:
    """Apply one bias-corrected Adam update that *descends* ``grads``.

    The model and state are left untouched if any gradient is non-finite.
    Returns the applied per-tensor update ``new - old`` in float64.
    """
    for name, g in grads.items():
        if name not in model.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != model.params[name].shape:
            raise ValueError(f"gradient {name!r} shape {g.shape} != parameter {model.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name!r}; step rejected")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    deltas = {}
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        old = model.params[name].astype(np.float64)
        new = (old - step).astype(np.float32)
        deltas[name] = new.astype(np.float64) - old
        model.params[name] = new
    return deltas


# ---------------------------------------------------------------- decoding

@dataclass
class DecodeResult:
    tokens: np.ndarray       # (B, prompt_len + max_new)
    logprobs: np.ndarray     # (B, max_new), raw log-softmax of each emitted token
    prompt_len: int

    @property
    def completion(self) -> np.ndarray:
        return self.tokens[:, self.prompt_len:]


def sample_tokens(logits: np.ndarray, temperature: float, top_p: float, rng: np.random.Generator) -> np.ndarray:
    """Nucleus sampling from rows of ``logits``; one uniform draw per row."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    check_probability(top_p, "top_p")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    probs = _softmax(logits / temperature)
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    cum = np.cumsum(sorted_p, axis=-1)
    # smallest prefix whose mass reaches top_p
    keep = np.minimum((cum < top_p).sum(axis=-1) + 1, probs.shape[-1])
    mask = np.arange(probs.shape[-1])[None, :] < keep[:, None]
    kept = np.where(mask, sorted_p, 0.0)
    kept_cum = np.cumsum(kept, axis=-1)
    u = rng.random(logits.shape[0]) * kept_cum[:, -1]
    idx = (kept_cum <= u[:, None]).sum(axis=-1)
    idx = np.minimum(idx, keep - 1)
    return np.take_along_axis(order, idx[:, None], axis=-1)[:, 0]


def decode_with(next_logits, prompts, *, temperature: float = 1.0, top_p: float = 1.0,
                max_new: int, seed, context_len: int) -> DecodeResult:
    """Sample ``max_new`` tokens after each prompt row.

    ``next_logits(tokens) -> (B, vocab)`` gives the logits used for the next
    token. Recorded log-probabilities are the untempered, untruncated
    log-softmax of those logits at the chosen token.
    """
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    if prompts.shape[1] + max_new > context_len:
        raise ValueError(f"prompt length {prompts.shape[1]} + {max_new} new tokens exceeds "
                         f"context_len {context_len}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    seqs = prompts.copy()
    lps = np.zeros((prompts.shape[0], max_new))
    for j in range(max_new):
        logits = np.asarray(next_logits(seqs), dtype=np.float64)
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError(f"non-finite logits at decode position {j}")
        tok = sample_tokens(logits, temperature, top_p, rng)
        lps[:, j] = np.take_along_axis(log_softmax(logits), tok[:, None], axis=-1)[:, 0]
        seqs = np.concatenate([seqs, tok[:, None]], axis=1)
    return DecodeResult(seqs, lps, prompts.shape[1])


def decode(model: PolicyModel, prompt, temperature: float = 1.0, top_p: float = 1.0,
           max_new: int = 1, seed=0) -> DecodeResult:
    """Nucleus-sample continuations of one prompt or a batch of equal-length prompts."""
    return decode_with(lambda toks: forward(model, toks).logits[:, -1], prompt,
                       temperature=temperature, top_p=top_p, max_new=max_new, seed=seed,
                       context_len=model.config.context_len)
