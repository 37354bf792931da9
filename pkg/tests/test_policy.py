import numpy as np
import pytest
from helpers import GRADCHECK_CONFIG, gradient_check, random_batch, reference_logits

from linex.policy import (
    AdamState,
    ModelConfig,
    NonFiniteGradientError,
    PolicyModel,
    adam_step,
    backward,
    decode,
    forward,
    log_softmax,
    sample_tokens,
    token_logprobs,
)
from linex.tensor_store import SchemaError, write_checkpoint


@pytest.fixture
def small():
    return PolicyModel.init(ModelConfig(d_model=16, n_heads=4, n_layers=2, init_std=0.3, seed=5))


def test_forward_matches_loop_reference(small):
    seqs = [[22, 3, 20, 5, 21, 7], [0, 1, 2], [19]]
    for seq in seqs:
        np.testing.assert_allclose(forward(small, seq).logits[0], reference_logits(small, seq), atol=1e-10)


def test_forward_is_causal(small):
    a = forward(small, [22, 3, 20, 5, 21]).logits[0]
    b = forward(small, [22, 3, 20, 9, 9]).logits[0]
    np.testing.assert_array_equal(a[:3], b[:3])
    assert not np.allclose(a[3:], b[3:])


def test_batched_forward_equals_rowwise(small):
    toks = np.array([[22, 3, 20, 5], [22, 7, 21, 1]])
    batch = forward(small, toks).logits
    for i in range(2):
        np.testing.assert_allclose(batch[i], forward(small, toks[i]).logits[0], atol=1e-12)


def test_taps_and_counters(small):
    out = forward(small, [22, 3, 20], linear_inputs=True)
    assert {"emb", "blk0", "blk1", "logits"} <= set(out.taps)
    for name in small.linear_names():
        x = out.taps["linear_in:" + name]
        assert x.shape[-1] == small.params[name].shape[0]
    np.testing.assert_allclose(out.taps["linear_in:head"] @ small.params["head"], out.logits, atol=1e-12)
    assert small.n_forward == 1


def test_token_logprobs_are_log_softmax_entries(small):
    toks = np.array([[22, 3, 20, 5]])
    lp = token_logprobs(small, toks)
    full = log_softmax(forward(small, toks).logits[0])
    np.testing.assert_allclose(lp[0], [full[t, toks[0, t + 1]] for t in range(3)])


def test_bad_tokens_name_position(small):
    with pytest.raises(ValueError, match="position 2"):
        forward(small, [1, 2, 99])
    with pytest.raises(ValueError, match="context_len"):
        forward(small, np.zeros(40, dtype=int))


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_check(seed):
    cfg = ModelConfig(**GRADCHECK_CONFIG, seed=seed)
    tokens, weights = random_batch(seed, cfg)
    assert gradient_check(cfg, tokens, weights) < 1e-4


def test_backward_objective_value(small):
    toks = np.array([[22, 3, 20, 5]])
    w = np.array([[0.0, 1.0, -2.0, 0.5]])
    _, value = backward(small, toks, w)
    assert value == pytest.approx(float((w[:, 1:] * token_logprobs(small, toks)).sum()))
    with pytest.raises(ValueError, match="position 0"):
        backward(small, toks, np.ones((1, 4)))


def test_zero_weights_give_zero_gradient(small):
    grads, _ = backward(small, [[22, 3, 20]], np.zeros((1, 3)))
    assert all(not np.any(g) for g in grads.values())
    assert small.n_backward == 1


def test_adam_constant_gradient_closed_form():
    # with a constant gradient g the bias-corrected moments are g and g^2 exactly,
    # so every step moves by lr * |g| / (|g| + eps)
    cfg = ModelConfig(vocab_size=8, context_len=4, d_model=4, n_heads=1, n_layers=1)
    m = PolicyModel.init(cfg)
    for name in m.params:
        m.params[name][...] = 0.0
    state = AdamState(lr=1e-3)
    g = {n: np.full(p.shape, 0.3) for n, p in m.params.items()}
    for t in range(1, 6):
        d = adam_step(m, g, state)
        expect = -1e-3 * 0.3 / (0.3 + 1e-8)
        np.testing.assert_allclose(d["head"], expect, rtol=1e-6)
    assert state.t == 5


def test_adam_matches_hand_recurrence():
    cfg = ModelConfig(vocab_size=8, context_len=4, d_model=4, n_heads=1, n_layers=1)
    m = PolicyModel.init(cfg)
    rng = np.random.default_rng(0)
    w = m.params["head"].astype(np.float64).copy()
    mom = np.zeros_like(w)
    vel = np.zeros_like(w)
    state = AdamState(lr=0.01, beta1=0.8, beta2=0.95, eps=1e-6)
    for t in range(1, 8):
        g = rng.standard_normal(w.shape)
        adam_step(m, {"head": g}, state)
        mom = 0.8 * mom + 0.2 * g
        vel = 0.95 * vel + 0.05 * g * g
        w = (w - 0.01 * (mom / (1 - 0.8 ** t)) / (np.sqrt(vel / (1 - 0.95 ** t)) + 1e-6)).astype(np.float32)
        np.testing.assert_array_equal(m.params["head"], w)


def test_adam_rejects_non_finite_without_mutation():
    cfg = ModelConfig(vocab_size=8, context_len=4, d_model=4, n_heads=1, n_layers=1)
    m = PolicyModel.init(cfg)
    before = m.copy()
    state = AdamState()
    g = {"head": np.full(m.params["head"].shape, np.nan)}
    with pytest.raises(NonFiniteGradientError):
        adam_step(m, g, state)
    assert state.t == 0 and not state.m
    np.testing.assert_array_equal(m.params["head"], before.params["head"])


def test_nucleus_keeps_smallest_prefix():
    logits = np.log(np.array([[0.5, 0.3, 0.2]]))
    rng = np.random.default_rng(0)
    # 0.75 is reached by the first two tokens; a cutoff exactly at 0.8 would hinge on round-off
    draws = np.array([sample_tokens(logits, 1.0, 0.75, rng)[0] for _ in range(4000)])
    assert not np.any(draws == 2)
    assert np.mean(draws == 0) == pytest.approx(0.5 / 0.8, abs=0.03)


def test_tiny_top_p_is_greedy_and_ties_keep_first():
    rng = np.random.default_rng(0)
    logits = np.array([[0.0, 2.0, 2.0, -1.0]])
    assert {int(sample_tokens(logits, 1.0, 1e-9, rng)[0]) for _ in range(50)} == {1}


def test_temperature_sharpens_distribution():
    logits = np.array([[1.0, 0.0]])
    rng = np.random.default_rng(1)
    n = 6000
    hot = np.mean([sample_tokens(logits, 0.5, 1.0, rng)[0] == 0 for _ in range(n)])
    p = 1 / (1 + np.exp(-2.0))
    assert hot == pytest.approx(p, abs=4 * np.sqrt(p * (1 - p) / n))


def test_sampling_rejects_bad_parameters():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_tokens(np.zeros((1, 3)), 0.0, 1.0, rng)
    with pytest.raises(ValueError):
        sample_tokens(np.zeros((1, 3)), 1.0, 0.0, rng)


def test_decode_is_seeded_and_records_raw_logprobs(small):
    prompt = np.array([[22, 3, 20, 5, 21]] * 4)
    a = decode(small, prompt, temperature=0.7, top_p=0.9, max_new=3, seed=11)
    b = decode(small, prompt, temperature=0.7, top_p=0.9, max_new=3, seed=11)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_allclose(a.logprobs, token_logprobs(small, a.tokens)[:, -3:], atol=1e-12)
    with pytest.raises(ValueError, match="context_len"):
        decode(small, prompt, max_new=40)


def test_checkpoint_round_trip(small, tmp_path):
    write_checkpoint(small.to_checkpoint(3), tmp_path / "m.lnxt")
    back = PolicyModel.from_checkpoint(tmp_path / "m.lnxt", small.config)
    for k in small.params:
        np.testing.assert_array_equal(back.params[k], small.params[k])
    with pytest.raises(SchemaError):
        PolicyModel.from_checkpoint(tmp_path / "m.lnxt", ModelConfig(d_model=8, n_heads=2))


def test_init_is_seeded():
    a = PolicyModel.init(ModelConfig(seed=3))
    b = PolicyModel.init(ModelConfig(seed=3))
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert a.params["emb.tok"].dtype == np.float32
