"""Reference implementations used as oracles by the tests."""
import math

import numpy as np

from linex.policy import ModelConfig, PolicyModel, backward


def reference_logits(model: PolicyModel, seq) -> np.ndarray:
    """Position-by-position, head-by-head forward pass with explicit loops.

    Written from the architecture description only: pre-LN blocks, causal
    softmax attention, tanh-approximate GELU MLP, final LN, untied head.
    """
    cfg = model.config
    P = {k: v.astype(np.float64) for k, v in model.params.items()}
    T, d, H = len(seq), cfg.d_model, cfg.n_heads
    dh = d // H

    def ln(x, g, b):
        mu = sum(x) / d
        var = sum((xi - mu) ** 2 for xi in x) / d
        return np.array([(x[i] - mu) / math.sqrt(var + cfg.ln_eps) * g[i] + b[i] for i in range(d)])

    def gelu(u):
        return 0.5 * u * (1 + math.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u ** 3)))

    h = [P["emb.tok"][seq[t]] + P["emb.pos"][t] for t in range(T)]
    for i in range(cfg.n_layers):
        p = f"blk{i}."
        a = [ln(x, P[p + "ln1.g"], P[p + "ln1.b"]) for x in h]
        q = [x @ P[p + "attn.q"] for x in a]
        k = [x @ P[p + "attn.k"] for x in a]
        v = [x @ P[p + "attn.v"] for x in a]
        new_h = []
        for t in range(T):
            out = np.zeros(d)
            for hd in range(H):
                sl = slice(hd * dh, (hd + 1) * dh)
                scores = [float(q[t][sl] @ k[s][sl]) / math.sqrt(dh) for s in range(t + 1)]
                mx = max(scores)
                w = [math.exp(sc - mx) for sc in scores]
                z = sum(w)
                out[sl] = sum(w[s] / z * v[s][sl] for s in range(t + 1))
            new_h.append(h[t] + out @ P[p + "attn.o"])
        h = new_h
        for t in range(T):
            b = ln(h[t], P[p + "ln2.g"], P[p + "ln2.b"])
            u = b @ P[p + "mlp.up"]
            h[t] = h[t] + np.array([gelu(x) for x in u]) @ P[p + "mlp.down"]
    return np.stack([ln(x, P["ln_f.g"], P["ln_f.b"]) @ P["head"] for x in h])


def gradient_check(cfg: ModelConfig, tokens, weights, h: float = 1e-3) -> float:
    """Largest relative error between analytic and finite-difference gradients.

    Uses the fourth-order central stencil
    ``(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`` on every parameter,
    with the objective evaluated in float64 on float64 parameters.
    """
    model = PolicyModel.init(cfg)
    model.params = {k: v.astype(np.float64) for k, v in model.params.items()}
    grads, _ = backward(model, tokens, weights)

    def objective(m):
        return backward(m, tokens, weights)[1]

    worst = 0.0
    for name, p in model.params.items():
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for step in (2 * h, h, -h, -2 * h):
                flat[i] = orig + step
                vals.append(objective(model))
            flat[i] = orig
            fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            a = grads[name].reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


GRADCHECK_CONFIG = dict(vocab_size=10, context_len=8, d_model=8, n_heads=2, n_layers=1, init_std=0.1)


def random_batch(seed: int, cfg: ModelConfig, B: int = 2, T: int = 5):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab_size, size=(B, T))
    weights = rng.standard_normal((B, T))
    weights[:, 0] = 0.0
    return tokens, weights
