import numpy as np
import pytest

from linex.analysis import (
    LogprobMatrix,
    SamplingPlan,
    TokenCategorizer,
    TokenCategory,
    analyze_activations,
    analyze_weights,
    categorize_tokens,
    decompose_layer,
    decompose_output_change,
    export_logprob_matrix,
    generate_probes,
    import_logprob_matrix,
    model_config_of,
    probe_logprobs,
)
from linex.analysis import LogprobParseError
from linex.linfit import InsufficientDataError, fit_series
from linex.policy import PolicyModel, token_logprobs
from linex.tasks import TaskSpec
from linex.tensor_store import Checkpoint, Trajectory, write_checkpoint


def test_sampling_plan_is_deterministic_with_one_index_minimum():
    schema = {"a": (100, 30), "b": (4,), "c": (7, 7)}
    plan = SamplingPlan(0.01, seed=3)
    idx = plan.indices(schema)
    assert [idx[n].size for n in sorted(schema)] == [30, 1, 1]
    again = plan.indices(dict(reversed(list(schema.items()))))
    for n in schema:
        np.testing.assert_array_equal(idx[n], again[n])
        assert len(set(idx[n].tolist())) == idx[n].size
    other = SamplingPlan(0.01, seed=4).indices(schema)
    assert not np.array_equal(idx["a"], other["a"])


def test_global_sampling_plan_counts():
    idx = SamplingPlan(0.1, seed=0, per_tensor=False).indices({"a": (50,), "b": (50,)})
    assert sum(v.size for v in idx.values()) == 10
    with pytest.raises(ValueError):
        SamplingPlan(0.0)


def _affine_traj(tmp_path, steps, slope_scale=1.0):
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 5))
    B = rng.standard_normal((6, 5)) * slope_scale
    entries = []
    for s in steps:
        p = tmp_path / f"c{s}.lnxt"
        write_checkpoint(Checkpoint(s, {"w": A + B * s, "g": np.ones(3)}), p)
        entries.append((s, p))
    return Trajectory("affine", entries), A, B


def test_weight_analysis_on_affine_trajectory(tmp_path):
    traj, A, B = _affine_traj(tmp_path, [0, 10, 20, 30, 40])
    wa = analyze_weights(traj, SamplingPlan(1.0))
    w = wa.tensors == "w"
    np.testing.assert_allclose(wa.result.slope[w], B.reshape(-1), rtol=1e-9)
    np.testing.assert_allclose(wa.result.r2[w], 1.0, atol=1e-9)
    # the constant tensor is flagged, not fitted
    assert np.all(wa.result.constant[~w]) and np.all(wa.result.filtered[~w])
    summary = wa.summary()
    assert summary["fraction_r2_gt_0.7"] == 1.0 and not summary["trivial_fit"]
    wa.write(tmp_path / "out")
    header = (tmp_path / "out" / "weight_fits.csv").read_text().splitlines()[0]
    assert header == "tensor,index,slope,intercept,r2,filtered"


def test_weight_analysis_warmup_and_trivial_flag(tmp_path):
    traj, _, _ = _affine_traj(tmp_path, [0, 10, 20])
    wa = analyze_weights(traj, SamplingPlan(1.0), warmup_steps=10)
    assert wa.steps == [10, 20] and wa.trivial
    with pytest.raises(InsufficientDataError):
        analyze_weights(traj, warmup_steps=15)


def test_weight_analysis_matches_direct_fit(tiny_run):
    wa = analyze_weights(tiny_run, SamplingPlan(0.05, seed=1))
    steps = tiny_run.steps
    name, index = wa.tensors[0], wa.indices[0]
    ys = [tiny_run.reader(s).read(name).reshape(-1)[index] for s in steps]
    direct = fit_series(steps, ys)
    assert wa.result.slope[0] == pytest.approx(direct.slope[0], rel=1e-12, abs=1e-15)


@pytest.fixture(scope="module")
def probes(tiny_run):
    cfg = model_config_of(tiny_run)
    model0 = PolicyModel.from_checkpoint(tiny_run.path_at(0), cfg)
    return generate_probes(model0, TaskSpec(), n_prompts=2, per_prompt=3, seed=0)


def test_probe_logprobs_at_step_zero_match_generation(tiny_run, probes):
    matrix = probe_logprobs(tiny_run, probes)
    assert matrix.values.shape == (len(probes), len(tiny_run.steps))  # one answer token per probe
    np.testing.assert_allclose(matrix.values[:, 0], [p.logprobs[0] for p in probes], atol=1e-12)
    assert np.all(matrix.pos == 5)


def test_probe_logprobs_use_custom_evaluator(tiny_run, probes):
    calls = []

    def ev(model, toks):
        calls.append(toks.shape)
        return token_logprobs(model, toks)

    probe_logprobs(tiny_run, probes, evaluator=ev)
    assert len(calls) == len(tiny_run.steps)


def test_logprob_matrix_csv_round_trip(tmp_path, tiny_run, probes):
    matrix = probe_logprobs(tiny_run, probes)
    export_logprob_matrix(matrix, tmp_path / "m.csv")
    assert import_logprob_matrix(tmp_path / "m.csv") == matrix
    head = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert head.startswith("token_id,token_str,pos,step_0,step_2")


@pytest.mark.parametrize("text,where", [
    ("token_id,token_str,pos,step_0,step_1\n1,a,0,0.1\n", ":2:"),
    ("token_id,token_str,pos,step_1,step_0\n", ":1:"),
    ("token,token_str,pos,step_0\n", ":1:"),
    ("token_id,token_str,pos,step_0,step_1\n1,a,0,0.1,0.2\n2,b,1,x,0.3\n", ":3:"),
])
def test_logprob_matrix_parse_errors_carry_line_numbers(tmp_path, text, where):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(LogprobParseError, match=where):
        import_logprob_matrix(p)


def test_token_categories():
    steps = np.arange(0, 100, 10)
    X = np.stack([
        -2.0 + 0.01 * np.sin(steps),            # tiny movement: STABLE
        -5.0 + 0.05 * steps,                    # clean trend: CONNECTOR_LINEAR
        np.where(steps % 20 == 0, -1.0, -4.0),  # large but patternless: VOLATILE
    ])
    fits = categorize_tokens(LogprobMatrix(list(steps), np.arange(3), ["a", "b", "c"], np.zeros(3), X))
    assert list(fits.categories) == [TokenCategory.STABLE, TokenCategory.CONNECTOR_LINEAR, TokenCategory.VOLATILE]
    assert fits.counts() == {"CONNECTOR_LINEAR": 1, "VOLATILE": 1, "STABLE": 1}


def test_token_categorizer_estimator():
    X = np.array([[0.0, 1.0, 2.0, 3.0], [0.0, 0.0, 0.0, 0.01]])
    est = TokenCategorizer(var_threshold=0.1)
    assert list(est.fit_predict(X)) == [TokenCategory.CONNECTOR_LINEAR, TokenCategory.STABLE]
    assert est.get_params() == {"var_threshold": 0.1, "r2_threshold": 0.7}
    with pytest.raises(InsufficientDataError):
        TokenCategorizer().fit(X[:, :2])


def test_activation_analysis(tiny_run, probes):
    aa = analyze_activations(tiny_run, probes, taps=["blk1", "logits"])
    assert set(aa.taps) == {"blk1", "logits"}
    n_pos = sum(len(p.tokens) for p in probes)
    assert len(aa.taps["logits"]["result"]) == n_pos * 24
    assert {r["tap"] for r in aa.layer_summary()} == {"blk1", "logits"}
    with pytest.raises(ValueError, match="valid taps"):
        analyze_activations(tiny_run, probes, taps=["blk9"])


def test_activations_on_identical_checkpoints_are_constant(tmp_path, tiny_run, probes):
    same = Trajectory("same", [(0, tiny_run.path_at(0)), (5, tiny_run.path_at(0)), (9, tiny_run.path_at(0))],
                      dict(tiny_run.metadata))
    aa = analyze_activations(same, probes, taps=["blk0"])
    assert np.all(aa.taps["blk0"]["result"].constant)


def test_decomposition_identity_and_pieces():
    rng = np.random.default_rng(0)
    W0, dW = rng.standard_normal((5, 4)), rng.standard_normal((5, 4)) * 0.1
    x0, dx = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)) * 0.1
    rep = decompose_output_change(W0, W0 + dW, x0, x0 + dx)
    np.testing.assert_allclose(rep.first_order_weight, np.linalg.norm(x0 @ dW.T, axis=1))
    np.testing.assert_allclose(rep.first_order_input, np.linalg.norm(dx @ W0.T, axis=1))
    np.testing.assert_allclose(rep.second_order, np.linalg.norm(dx @ dW.T, axis=1))
    assert np.all(rep.residual <= 1e-10 * rep.total)
    with pytest.raises(ValueError):
        decompose_output_change(W0, W0, np.ones(3), np.ones(3))


def test_decompose_layer(tiny_run, probes):
    rep, idx = decompose_layer(tiny_run, 0, 12, probes, "blk0.mlp.up")
    assert rep.total.size == idx["probe"].size == sum(len(p.tokens) for p in probes)
    assert np.all(rep.residual <= 1e-10 * np.maximum(rep.total, 1e-300))
    same, _ = decompose_layer(tiny_run, 4, 4, probes, "head")
    assert not np.any(same.total) and not np.any(same.first_order_weight)
    with pytest.raises(ValueError, match="valid"):
        decompose_layer(tiny_run, 0, 2, probes, "blk0.nope")
