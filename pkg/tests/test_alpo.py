import json

import numpy as np
import pytest

from latentvis import alpo, toyvlm
from latentvis.alpo import AlpoConfig, RolloutRecord
from latentvis.errors import ConfigError, ContractError
from latentvis.numerics import SeededRng, Tensor, finite_diff_check
from latentvis.vocab import ANS, AUX, EOS


def _record(sample, phase1, phase2=(), *, block=True, truncated=False):
    trig = bool(phase1) and phase1[-1] == AUX
    return RolloutRecord(
        sample_id=sample.id, question_tokens=list(sample.question_tokens),
        phase1_tokens=list(phase1), e_aux=np.zeros((64, 4)) if trig and block else None,
        phase2_tokens=list(phase2), old_logprobs=np.zeros(len(phase1) + len(phase2)),
        truncated=truncated, n_triggers=int(trig),
    )


@pytest.fixture(scope="module")
def sample(small_data):
    return next(s for s in small_data[0] if s.needs_aux)


@pytest.fixture(scope="module")
def small_cfg():
    return AlpoConfig(group_size=4, max_response_len=4, prompts_per_step=2, steps=2)


# -- config ----------------------------------------------------------------------

def test_config_checks_and_schedule():
    with pytest.raises(ConfigError):
        AlpoConfig(group_size=1)
    with pytest.raises(ConfigError):
        AlpoConfig(max_triggers=2)
    with pytest.raises(ConfigError):
        AlpoConfig(temperature=0)
    cfg = AlpoConfig()
    assert (cfg.group_size, cfg.clip_eps, cfg.lambda_aux) == (8, 0.2, 0.3)
    published = AlpoConfig.published_schedule()
    assert (published.lr, published.weight_decay, published.steps) == (4e-6, 0.01, 54)


# -- rewards -------------------------------------------------------------------------

def test_reward_examples(sample):
    cfg = AlpoConfig()
    g = sample.answer_tokens[0]
    wrong = 22 if g != 22 else 23
    full = alpo.compute_reward(_record(sample, [5, AUX], [ANS, g, EOS]), sample, cfg)
    assert (full.r_acc, full.r_fmt, full.r_aux) == (1, 1, 1) and abs(full.total - 1.8) < 1e-12
    direct = alpo.compute_reward(_record(sample, [ANS, g, EOS]), sample, cfg)
    assert abs(direct.total - 1.5) < 1e-12 and direct.r_aux == 0
    bad = alpo.compute_reward(_record(sample, [wrong, wrong], truncated=True), sample, cfg)
    assert bad.total == 0.0


def test_reward_format_rules(sample):
    cfg = AlpoConfig()
    g = sample.answer_tokens[0]
    # answering before the trigger forfeits both format and trigger credit
    early = alpo.compute_reward(_record(sample, [ANS, g, AUX], [ANS, g, EOS]), sample, cfg)
    assert (early.r_fmt, early.r_aux) == (0, 0)
    cut = alpo.compute_reward(_record(sample, [5, AUX], [ANS, g], truncated=True), sample, cfg)
    assert (cut.r_acc, cut.r_fmt, cut.r_aux) == (1, 0, 1)


def test_record_contract(sample):
    r = _record(sample, [5, AUX], [ANS, 22, EOS])
    r.check()
    r.old_logprobs = np.zeros(2)
    with pytest.raises(ContractError):
        r.check()
    with pytest.raises(ContractError):
        _record(sample, [5, AUX], [ANS], block=False).check()
    with pytest.raises(ContractError):
        _record(sample, [ANS, 22], [EOS]).check()


# -- advantages and clipping ------------------------------------------------------------

def test_group_advantage_examples():
    assert np.allclose(alpo.group_advantages([1, 1, 0, 0], adv_eps=0.0), [1, 1, -1, -1], atol=1e-9)
    assert np.array_equal(alpo.group_advantages([0.7] * 5), np.zeros(5))
    with pytest.raises(ContractError):
        alpo.group_advantages([1.0])


def test_group_advantages_zero_mean_over_many_groups():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        r = rng.normal(size=8)
        a = alpo.group_advantages(r)
        assert np.allclose(a, (r - r.mean()) / (np.sqrt(((r - r.mean()) ** 2).mean()) + 1e-6))
        worst = max(worst, abs(a.sum()))
    assert worst < 1e-9 * 8


def test_clipped_objective_examples():
    assert alpo.clipped_token_objective(1.0, 0.37, 0.2) == pytest.approx(0.37, abs=1e-15)
    assert alpo.clipped_token_objective(1.5, 1.0, 0.2) == pytest.approx(1.2, abs=1e-15)
    assert alpo.clipped_token_objective(0.5, -1.0, 0.2) == pytest.approx(-0.8, abs=1e-15)
    with pytest.raises(ContractError):
        alpo.clipped_token_objective(0.0, 1.0, 0.2)


def _branch_table(r, A, eps):
    if A >= 0:
        return min(r, 1 + eps) * A
    return max(r, 1 - eps) * A


def test_clipped_objective_matches_branch_table():
    for r in np.linspace(0.3, 1.9, 17):
        for A in (-2.0, -0.5, 0.0, 0.5, 2.0):
            for eps in (0.1, 0.2, 0.3):
                assert abs(alpo.clipped_token_objective(r, A, eps) - _branch_table(r, A, eps)) <= 1e-15


def test_surrogate_gradient_vanishes_where_clip_binds():
    cfg = AlpoConfig(kl_coef=0.0)
    old = np.zeros((2, 1))
    for lp, A in ((np.log(1.5), 1.0), (np.log(0.5), -1.0)):
        new = Tensor(np.full((2, 1), lp), requires_grad=True)
        obj, _, n_clip = alpo.surrogate(new, old, old, np.array([A, A]), cfg)
        obj.backward()
        assert n_clip == 2 and np.all(new.grad == 0)
    new = Tensor(np.full((2, 1), np.log(1.1)), requires_grad=True)
    obj, _, n_clip = alpo.surrogate(new, old, old, np.array([1.0, 1.0]), cfg)
    obj.backward()
    assert n_clip == 0 and np.allclose(new.grad, 1.1)


# -- closed-form bandit ------------------------------------------------------------------

@pytest.mark.parametrize("kl,ref", [(0.0, None), (0.05, [0.3, -0.2]), (0.05, None)])
def test_bandit_gradient_matches_update(kl, ref):
    cfg = AlpoConfig(group_size=2, kl_coef=kl)
    theta = np.array([0.1, -0.4])
    pol = alpo.BanditPolicy(theta)
    refp = alpo.BanditPolicy(theta if ref is None else ref)
    recs = alpo.bandit_records(pol, [0, 1], [1.0, 0.0], cfg)
    loss, _, _ = alpo.alpo_loss(pol, refp, recs, cfg)
    loss.backward()
    want = alpo.bandit_gradient(theta, [0, 1], [1.0, 0.0], cfg, ref_theta=ref)
    assert np.max(np.abs(pol.theta.grad[0] - want)) <= 1e-6
    if kl == 0:
        assert pol.theta.grad[0, 0] < 0 < pol.theta.grad[0, 1]


def test_bandit_step_moves_toward_rewarded_action():
    cfg = AlpoConfig(group_size=2, kl_coef=0.0, lr=0.1, weight_decay=0.0)
    pol = alpo.BanditPolicy([0.0, 0.0])
    ref = alpo.BanditPolicy([0.0, 0.0])
    recs = alpo.bandit_records(pol, [0, 1], [1.0, 0.0], cfg)
    alpo.alpo_step(pol, ref, recs, cfg)
    assert pol.probs()[0] > 0.5


# -- model rollouts and updates --------------------------------------------------------------

@pytest.fixture
def records(state, small_data, small_cfg):
    samples = [s for s in small_data[0]][:2]
    groups = alpo.rollout_batch(state, samples, small_cfg, SeededRng(4))
    return [r for g in groups for r in g]


def test_rollouts_are_scored_and_deterministic(state, small_data, small_cfg):
    s = small_data[0][0]
    a = alpo.rollout_group(state, s, small_cfg, SeededRng(1).child(f"sample-{s.id}"))
    b = alpo.rollout_batch(state, [s], small_cfg, SeededRng(1))[0]
    assert len(a) == small_cfg.group_size
    for x, y in zip(a, b):
        assert x.tokens == y.tokens and np.array_equal(x.old_logprobs, y.old_logprobs)
        assert x.advantage == y.advantage
    adv = [r.advantage for r in a]
    assert abs(sum(adv)) < 1e-9 * len(adv)
    for r in a:
        r.check()
        if not r.triggered:
            assert r.e_aux is None and r.reward.r_aux == 0


def test_default_group_size_gives_eight_records(state, small_data):
    cfg = AlpoConfig(max_response_len=3)
    recs = alpo.rollout_group(state, small_data[0][0], cfg, SeededRng(0))
    assert len(recs) == 8


def test_on_policy_ratio_one_and_zero_kl(state, records, small_cfg):
    ref = alpo.reference_copy(state)
    loss, kl, clip_frac = alpo.alpo_loss(state, ref, records, small_cfg)
    assert abs(kl) <= 1e-12 and clip_frac == 0.0
    assert abs(loss.item() + np.mean([r.advantage for r in records])) <= 1e-12
    for r, lp in zip(records, alpo.record_logprobs(state, records, small_cfg)):
        assert np.max(np.abs(lp - r.old_logprobs)) <= 1e-12


def test_cached_block_makes_objective_independent_of_detransformer(state, records, small_cfg):
    ref = alpo.reference_copy(state)
    before = alpo.alpo_loss(state, ref, records, small_cfg)[0].item()
    for p in state.group("detrans"):
        p.data[...] = np.random.default_rng(0).normal(size=p.data.shape)
    after = alpo.alpo_loss(state, ref, records, small_cfg)[0].item()
    assert before == after


def test_zero_signal_step_leaves_params_unchanged(state, records):
    cfg = AlpoConfig(group_size=4, max_response_len=4, kl_coef=0.0)
    for r in records:
        r.advantage = 0.0
    ref = alpo.reference_copy(state)
    fp = state.fingerprint()
    m = alpo.alpo_step(state, ref, records, cfg)
    assert state.fingerprint() == fp and m.grad_norm == 0.0


def test_step_updates_only_language_model(state, records, small_cfg):
    ref = alpo.reference_copy(state)
    before = {n: p.data.copy() for n, p in state.named_params()}
    alpo.alpo_step(state, ref, records, AlpoConfig(group_size=4, max_response_len=4, lr=1e-3))
    for n, p in state.named_params():
        moved = not np.array_equal(before[n], p.data)
        if n.split(".")[0] in ("detrans", "vision", "projector"):
            assert not moved, n


def test_surrogate_gradient_matches_finite_differences(tiny_config, small_data):
    st = toyvlm.ModelState.init(tiny_config)
    cfg = AlpoConfig(group_size=3, max_response_len=3, kl_coef=0.1)
    recs = alpo.rollout_group(st, small_data[0][1], cfg, SeededRng(2))
    for k, r in enumerate(recs):
        r.advantage = (-1.0) ** k * 0.7
        r.old_logprobs = r.old_logprobs - 0.05 * (k + 1)
    ref = st.copy()
    for p in ref.group("llm"):
        p.data += 0.01
    st.set_trainable("embed", "llm")
    worst = finite_diff_check(lambda s: alpo.alpo_loss(s, ref, recs, cfg)[0], st, n_probes=24)
    assert worst < 1e-4


def test_train_runs_and_marks_state(state, small_data, small_cfg, tmp_path):
    dump = []
    rows = alpo.train(state, small_data[0][:3], small_cfg, dump=dump)
    assert len(rows) == small_cfg.steps and "alpo" in state.markers
    assert len(dump) == small_cfg.steps * small_cfg.prompts_per_step * small_cfg.group_size
    p = tmp_path / "m.csv"
    alpo.write_metrics(rows, p)
    assert p.read_text().splitlines()[0] == ",".join(alpo.METRIC_COLUMNS)
    q = tmp_path / "r.jsonl"
    alpo.write_rollouts(dump[:3], q)
    rec = json.loads(q.read_text().splitlines()[0])
    assert set(rec) >= {"phase1_tokens", "e_aux", "phase2_tokens", "old_logprobs",
                        "reward_components", "advantage"}
