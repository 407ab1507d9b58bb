import json

import numpy as np
import pytest

from latentvis import inference, toyvlm
from latentvis.errors import ConfigError, ContractError
from latentvis.inference import InferenceConfig
from latentvis.vocab import ANS, AUX, EOS


def _force(state, **bias):
    """Make the head ignore content and emit by fixed preference."""
    state["llm.head_w"].data[:] = 0.0
    b = np.zeros(state.config.vocab_size)
    for tok, v in bias.items():
        b[int(tok)] = v
    state["llm.head_b"].data[:] = b
    return state


@pytest.fixture
def samples(small_data):
    return small_data[0][:6]


# -- pooling -----------------------------------------------------------------------

def test_pool_tokens_examples(rng):
    X = rng.normal(size=(64, 5))
    assert inference.pool_tokens(X, 1) is not None and np.array_equal(inference.pool_tokens(X, 1), X)
    one = inference.pool_tokens(X, 64)
    assert one.shape == (1, 5) and np.allclose(one[0], X.mean(0), atol=1e-12)
    four = inference.pool_tokens(X, 4)
    assert four.shape == (16, 5)
    assert abs(four.mean() - X.mean()) <= 1e-12
    rem = inference.pool_tokens(X[:10], 4)
    assert rem.shape == (3, 5) and np.allclose(rem[2], X[8:10].mean(0))


def test_pooled_length_and_ratio_for_length():
    assert inference.pooled_length(64, 1) == 64
    assert inference.pooled_length(64, 3) == 22
    assert inference.ratio_for_length(64, 64) == 1
    assert inference.ratio_for_length(64, 16) == 4
    assert inference.ratio_for_length(64, 1) == 64
    for target in (2, 5, 11, 30):
        r = inference.ratio_for_length(64, target)
        best = min(abs(inference.pooled_length(64, k) - target) for k in range(1, 65))
        assert abs(inference.pooled_length(64, r) - target) == best


def test_config_validation():
    assert InferenceConfig(aux_mode="raw").aux_mode == "raw_visual"
    with pytest.raises(ConfigError):
        InferenceConfig(aux_mode="nope")
    with pytest.raises(ConfigError):
        InferenceConfig(pooling_ratio=0)
    with pytest.raises(ConfigError):
        InferenceConfig(temperature=-1)


# -- auxiliary blocks ------------------------------------------------------------------

def test_aux_block_modes(state, rng):
    V = rng.normal(size=(1, 64, state.config.d_vis))
    A0 = rng.normal(size=V.shape)
    normal = inference.aux_block(state, V, A0, InferenceConfig())
    assert np.allclose(normal, V + A0)
    ph = inference.aux_block(state, V, None, InferenceConfig(aux_mode="placeholder"))
    assert np.array_equal(ph, V)
    raw = inference.aux_block(state, V, None, InferenceConfig(aux_mode="raw_visual"))
    assert np.allclose(raw, 2 * V)
    pooled = inference.aux_block(state, V, A0, InferenceConfig(pooling_ratio=64))
    assert pooled.shape == (1, 1, state.config.d_vis)
    assert np.allclose(pooled[0, 0], (V + A0)[0].mean(0))
    with pytest.raises(ContractError):
        inference.aux_block(state, V, None, InferenceConfig(aux_mode="disabled"))


def test_build_auxiliary_contract(state, samples):
    s = samples[0]
    V = toyvlm.encode_image(state, s.input_features)[None]
    tr = toyvlm.forward(state, V, [np.array([s.question_tokens])])
    with pytest.raises(ContractError):
        inference.build_auxiliary(state, tr, V, InferenceConfig(), triggered=False)
    assert inference.build_auxiliary(state, tr, V, InferenceConfig(aux_mode="disabled")) == (None, None)
    A, A0 = inference.build_auxiliary(state, tr, V, InferenceConfig())
    assert A.shape == (1, 64, state.config.d_vis)
    assert np.allclose(A, V + A0)


# -- phase 1 -------------------------------------------------------------------------

def test_forced_trigger_fires_immediately(state, samples):
    _force(state, **{str(AUX): 10.0})
    toks, trace, trig = inference.generate_phase1(state, samples[0], InferenceConfig())
    assert toks == [AUX] and trig
    assert trace.length == 64 + len(samples[0].question_tokens) + 1


def test_suppressed_trigger_runs_to_limit(state, samples):
    _force(state, **{str(AUX): -1e9, "22": 5.0})
    cfg = InferenceConfig(max_phase1_tokens=5)
    toks, _, trig = inference.generate_phase1(state, samples[0], cfg)
    assert not trig and toks == [22] * 5
    res = inference.run_inference(state, samples[0], cfg)
    assert res.truncated and not res.triggered and res.phase2_tokens == []


def test_greedy_decoding_is_deterministic(state, samples):
    a = inference.run_inference_batch(state, samples, InferenceConfig())
    b = inference.run_inference_batch(state, samples, InferenceConfig())
    assert [r.phase1_tokens for r in a] == [r.phase1_tokens for r in b]
    assert [r.phase2_tokens for r in a] == [r.phase2_tokens for r in b]


def test_sampling_is_seeded(state, samples):
    cfg = InferenceConfig(temperature=1.0, seed=7)
    a = inference.run_inference_batch(state, samples, cfg)
    b = inference.run_inference_batch(state, samples, cfg)
    assert [r.phase1_tokens for r in a] == [r.phase1_tokens for r in b]


def test_batch_equals_single(state, samples):
    cfg = InferenceConfig(temperature=1.0, seed=2)
    batch = inference.run_inference_batch(state, samples, cfg)
    for r, s in zip(batch, samples):
        one = inference.run_inference(state, s, cfg)
        assert one.phase1_tokens == r.phase1_tokens and one.phase2_tokens == r.phase2_tokens


# -- full pipeline -----------------------------------------------------------------------

def test_triggered_pipeline_and_answer(state, samples):
    _force(state, **{str(AUX): 10.0, str(ANS): 5.0})
    res = inference.run_inference(state, samples[0], InferenceConfig(max_phase2_tokens=3))
    assert res.triggered and res.n_triggers == 1
    assert res.phase1_tokens == [AUX]
    assert res.phase2_tokens == [ANS, ANS, ANS] and res.truncated
    assert res.latent_len == 64 and res.aux_tokens.shape == (64, state.config.d_vis)


def test_max_triggers_masks_second_trigger(state, samples):
    _force(state, **{str(AUX): 10.0, str(EOS): 5.0})
    one = inference.run_inference(state, samples[0], InferenceConfig())
    assert one.n_triggers == 1 and one.phase2_tokens == [EOS]
    two = inference.run_inference(state, samples[0], InferenceConfig(max_triggers=2))
    assert two.n_triggers == 2 and len(two.aux_blocks) == 2
    zero = inference.run_inference(state, samples[0], InferenceConfig(max_triggers=0))
    assert not zero.triggered and zero.phase1_tokens == [EOS]


def test_disabled_mode_turns_trigger_into_delimiter(state, samples):
    _force(state, **{str(AUX): 10.0, "23": 5.0, str(EOS): 4.0})
    res = inference.run_inference(state, samples[0],
                                  InferenceConfig(aux_mode="disabled", max_phase2_tokens=3))
    assert res.triggered and res.aux_blocks == []
    assert res.phase2_tokens[0] == ANS
    assert res.answer == [23, 23]


def test_prefix_logits_unaffected_by_mode(state, samples):
    s = samples[0]
    V = toyvlm.encode_image(state, s.input_features)[None]
    q = np.array([s.question_tokens + [AUX]])
    base = toyvlm.forward(state, V, [q]).logits.data
    for mode in inference.AUX_MODES:
        if mode == "disabled":
            continue
        tr = toyvlm.forward(state, V, [q], upto_layer=state.config.hidden_layer_index)
        A, _ = inference.build_auxiliary(state, tr, V, InferenceConfig(aux_mode=mode))
        full = toyvlm.forward(state, V, [q, A, np.array([[ANS]])]).logits.data
        assert np.max(np.abs(full[:, : base.shape[1]] - base)) <= 1e-12


def test_placeholder_zero_equals_injecting_v(state, samples):
    s = samples[0]
    V = toyvlm.encode_image(state, s.input_features)[None]
    q = np.array([s.question_tokens + [AUX]])
    tr = toyvlm.forward(state, V, [q], upto_layer=state.config.hidden_layer_index)
    A, _ = inference.build_auxiliary(state, tr, V, InferenceConfig(aux_mode="placeholder"))
    a = toyvlm.forward(state, V, [q, A]).logits.data
    b = toyvlm.forward(state, V, [q, V]).logits.data
    assert np.array_equal(a, b)


def test_extract_answer():
    assert inference.extract_answer([7, ANS, 24, EOS, 25]) == [24]
    assert inference.extract_answer([7, 8]) == []
    assert inference.extract_answer([ANS, 24, 25]) == [24, 25]


# -- latent capture and output ---------------------------------------------------------------

def test_capture_latents_shapes_and_consistency(state, samples):
    _force(state, **{str(AUX): 10.0, str(EOS): 5.0})
    for ratio, rows in ((1, 64), (4, 16)):
        cfg = InferenceConfig(pooling_ratio=ratio)
        lat, skipped = inference.capture_latents(state, samples, cfg)
        assert skipped == 0 and all(x.shape[0] == rows for x in lat)
        res = inference.run_inference_batch(state, samples, cfg)
        assert all(np.array_equal(x, r.aux_tokens) for x, r in zip(lat, res))
    with pytest.raises(ContractError):
        inference.capture_latents(state, samples, InferenceConfig(aux_mode="placeholder"))


def test_capture_latents_reports_skips(state, samples):
    _force(state, **{str(AUX): -1e9, str(EOS): 5.0})
    lat, skipped = inference.capture_latents(state, samples, InferenceConfig())
    assert lat == [] and skipped == len(samples)


def test_write_results_jsonl(state, samples, tmp_path):
    res = inference.run_inference_batch(state, samples, InferenceConfig())
    p = tmp_path / "r.jsonl"
    inference.write_results(res, samples, p)
    lines = p.read_text().splitlines()
    assert len(lines) == len(samples)
    rec = json.loads(lines[0])
    assert set(rec) == {"id", "triggered", "answer", "correct", "latent_len"}
    assert rec["id"] == samples[0].id


def test_accuracy_counts_exact_answers(state, samples):
    s = samples[0]
    _force(state, **{str(ANS): 10.0})
    # ANS forever: answer is a run of ANS tokens, never correct
    assert inference.accuracy(state, [s], InferenceConfig()) == 0.0
    r = inference.InferenceResult(id=s.id, phase1_tokens=[], triggered=False, answer=list(s.answer_tokens))
    assert inference.is_correct(r, s)
