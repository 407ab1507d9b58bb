import numpy as np
import pytest

from latentvis import sft, synthdata, toyvlm
from latentvis.errors import ConfigError, ContractError
from latentvis.numerics import finite_diff_check, no_grad
from latentvis.sft import SftConfig
from latentvis.vocab import AUX


@pytest.fixture(scope="module")
def trig(small_data):
    return [s for s in small_data[0] if s.needs_aux]


@pytest.fixture(scope="module")
def direct(small_data):
    return [s for s in small_data[0] if not s.needs_aux]


@pytest.fixture
def tiny(tiny_config):
    return toyvlm.ModelState.init(tiny_config)


# -- config ----------------------------------------------------------------------

def test_config_validation_and_kv_round_trip(tmp_path):
    with pytest.raises(ConfigError):
        SftConfig(w_aux=0.5)
    with pytest.raises(ConfigError):
        SftConfig(lambda_vis=-1)
    with pytest.raises(ConfigError):
        SftConfig(replay_per_batch=-1)
    cfg = SftConfig(steps1=7, lr2=0.5, w_aux=3.0)
    p = tmp_path / "c.kv"
    p.write_text(sft.dump_kv(cfg))
    assert sft.load_sft_config(p) == cfg
    with pytest.raises(ConfigError):
        sft.config_from_kv(SftConfig, {"nope": "1"})
    assert sft.parse_kv("a = 1  # note\n\nb=x\n") == {"a": "1", "b": "x"}


def test_published_schedule_values():
    cfg = SftConfig.published_schedule()
    assert (cfg.lr1, cfg.lr2, cfg.lr3) == (1e-4, 1e-5, 4e-6)
    assert (cfg.steps1, cfg.steps2, cfg.steps3, cfg.anneal_steps) == (3000, 100, 1500, 700)
    assert (cfg.lambda_vis, cfg.cosine_weight) == (2.0, 0.5)


# -- delta_aux -------------------------------------------------------------------

def test_delta_aux_examples(state, trig):
    s = trig[0]
    same = synthdata.GridSample(**{**s.__dict__, "aux_features": s.input_features.copy()})
    assert not np.any(sft.delta_aux(state, same))
    d = sft.delta_aux(state, s)
    live = np.nonzero(np.abs(d).sum(1) > 0)[0]
    assert list(live) == synthdata.query_region(s.grid_size, *s.query_cell)
    scaled = synthdata.GridSample(**{**s.__dict__, "input_features": 2.5 * s.input_features,
                                     "aux_features": 2.5 * s.aux_features})
    assert np.allclose(sft.delta_aux(state, scaled), 2.5 * d, atol=1e-12)


def test_make_batch_contracts(state, trig, direct):
    with pytest.raises(ContractError):
        sft.make_batch(state, [])
    with pytest.raises(ContractError):
        sft.make_batch(state, direct[:1])
    b = sft.make_batch(state, trig[:3])
    assert b.size == 3 and b.phase1[0, -1] == AUX
    assert np.allclose(b.delta[0], sft.delta_aux(state, trig[0]))


# -- stage 1 -------------------------------------------------------------------------

def test_stage1_perfect_fit_is_zero_loss_and_grad(state, trig):
    b = sft.make_batch(state, trig[:3])
    with no_grad():
        A0 = sft._detrans_from_prefix(state, b).data
    b.U = b.V + A0
    state.set_trainable("detrans")
    state.zero_grad()
    loss = sft.stage1_loss(state, b)
    loss.backward()
    assert loss.item() <= 1e-28
    # U - V reproduces A0 only up to rounding
    assert max(np.abs(p.grad).max() for p in state.group("detrans")) <= 1e-12


def test_stage1_step_only_moves_detransformer(state, trig):
    before = {n: p.data.copy() for n, p in state.named_params()}
    b = sft.make_batch(state, trig[:4])
    m = sft.stage1_step(state, b, SftConfig())
    assert m.loss_vis == m.loss_total > 0
    for n, p in state.named_params():
        moved = not np.array_equal(before[n], p.data)
        assert moved == n.startswith("detrans"), n
    for p in state.group("llm") + state.group("embed"):
        assert p.grad is None or not np.any(p.grad)


def test_stage1_overfits_fixed_batch(gen_params):
    data, _ = synthdata.generate(4, gen_params, seed=11)
    st = toyvlm.ModelState.init(toyvlm.ModelConfig(seed=0))
    b = sft.make_batch(st, data)
    cfg = SftConfig()
    losses = [sft.stage1_step(st, b, cfg, k).loss_total for k in range(50)]
    assert losses[-1] < 0.1 * losses[0]
    assert sft.stage1_loss(st, b).item() < losses[0]


# -- stage 2 -------------------------------------------------------------------------

def test_stage2_unit_weights_equal_plain_ntp(state, trig):
    b = sft.make_batch(state, trig[:3])
    cfg = SftConfig(w_aux=1.0, w_normal=1.0)
    got = sft.stage2_loss(state, b, cfg).item()
    pos, tgt = sft._answer_positions(state, b)
    tr = toyvlm.forward(state, b.V, [b.question, b.phase1, b.U, b.answer])
    lp = tr.logits.data[:, pos]
    lp = lp - lp.max(-1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
    want = -np.take_along_axis(lp, tgt[..., None], -1).mean()
    assert abs(got - want) <= 1e-12


def test_stage2_uniform_policy_oracle(state, trig):
    # a head that ignores its input gives ln V per token whatever the weights
    state["llm.head_w"].data[:] = 0.0
    state["llm.head_b"].data[:] = 0.0
    b = sft.make_batch(state, trig[:2])
    for w_aux in (1.0, 4.0):
        got = sft.stage2_loss(state, b, SftConfig(w_aux=w_aux)).item()
        assert abs(got - np.log(state.config.vocab_size)) <= 1e-12


def test_stage2_weighting_closed_form(state, trig):
    b = sft.make_batch(state, trig[:2])
    cfg = SftConfig(w_aux=4.0)
    pos, tgt = sft._answer_positions(state, b)
    tr = toyvlm.forward(state, b.V, [b.question, b.phase1, b.U, b.answer])
    nll = sft.token_nll(tr.logits, tgt, pos).data
    w = np.where(tgt == AUX, 4.0, 1.0)
    assert abs(sft.stage2_loss(state, b, cfg).item() - (nll * w).sum() / w.sum()) <= 1e-12


def test_stage2_step_raises_trigger_probability(state, trig):
    b = sft.make_batch(state, trig[:4])
    pos, tgt = sft._answer_positions(state, b)
    trig_col = int(np.nonzero(tgt[0] == AUX)[0][0])

    def trigger_lp():
        with no_grad():
            tr = toyvlm.forward(state, b.V, [b.question, b.phase1, b.U, b.answer])
            z = tr.logits.data[:, pos[trig_col]]
            z = z - z.max(-1, keepdims=True)
            return (z[:, AUX] - np.log(np.exp(z).sum(-1))).mean()

    before = trigger_lp()
    sft.stage2_step(state, b, SftConfig(lr2=1e-4))
    assert trigger_lp() > before


def test_direct_samples_share_the_denominator(state, trig, direct):
    b = sft.make_batch(state, trig[:2])
    d = sft.make_direct_batch(state, direct[:2])
    cfg = SftConfig(w_aux=1.0)
    both = sft.stage2_loss(state, b, cfg, d).item()
    pos, tgt = sft._answer_positions(state, b)
    tr = toyvlm.forward(state, b.V, [b.question, b.phase1, b.U, b.answer])
    n1 = sft.token_nll(tr.logits, tgt, pos).data
    n2 = sft.direct_nll(state, d).data
    assert abs(both - (n1.sum() + n2.sum()) / (n1.size + n2.size)) <= 1e-12
    assert abs(sft.stage2_loss(state, None, cfg, d).item() - n2.mean()) <= 1e-12


def test_replay_loss_covers_answer_tail_only(state, direct):
    d = sft.make_direct_batch(state, direct[:2])
    nll = sft.direct_nll(state, d).data
    k = d.answer.shape[1] - 1
    assert abs(sft.replay_loss(state, d).item() - nll[:, -k:].mean()) <= 1e-12
    assert abs(sft.direct_loss(state, d).item() - nll.mean()) <= 1e-12


# -- stage 3 -------------------------------------------------------------------------

def test_anneal_endpoints():
    assert sft.anneal_probability(0, 700) == 1.0
    assert sft.anneal_probability(350, 700) == 0.5
    assert sft.anneal_probability(700, 700) == 0.0
    assert sft.anneal_probability(900, 700) == 0.0
    with pytest.raises(ValueError):
        sft.anneal_probability(-1, 700)


def test_vis_loss_zero_iff_exact(rng):
    for _ in range(5):
        D = rng.normal(size=(2, 6, 4))
        D[:, 3:] = 0.0
        assert sft.vis_loss(sft.ag.constant(D), D, 0.5).item() <= 1e-15
        other = D + rng.normal(size=D.shape) * 1e-3
        assert sft.vis_loss(sft.ag.constant(other), D, 0.5).item() > 0


def test_vis_loss_antiparallel_adds_twice_cosine_weight(rng):
    D = rng.normal(size=(1, 4, 3))
    D /= np.linalg.norm(D, axis=-1, keepdims=True)
    cw = 0.5
    got = sft.vis_loss(sft.ag.constant(-D), D, cw).item()
    mse = np.mean((2 * D) ** 2)
    assert abs(got - mse - 2 * cw) <= 1e-12


def test_teacher_forcing_injects_auxiliary_encoding(state, trig):
    b = sft.make_batch(state, trig[:3])
    cfg = SftConfig()
    _, ntp_tf, _ = sft.stage3_loss(state, b, cfg, tf_mask=np.ones(3, bool))
    plain = sft.stage2_loss(state, b, SftConfig(w_aux=1.0)).item()
    assert abs(ntp_tf.item() - plain) <= 1e-12
    _, ntp_self, _ = sft.stage3_loss(state, b, cfg, tf_mask=np.zeros(3, bool))
    assert ntp_self.item() != ntp_tf.item()


def test_stage3_without_triggers_has_zero_vis(state, direct):
    d = sft.make_direct_batch(state, direct[:2])
    total, ntp, lv = sft.stage3_loss(state, None, SftConfig(), direct=d)
    assert lv.item() == 0.0 and abs(total.item() - ntp.item()) <= 1e-15


# -- gradients -----------------------------------------------------------------------

def _tiny_batches(st, seed=2):
    data, _ = synthdata.generate(6, synthdata.GenParams(), seed=seed, aux_unnecessary_fraction=0.34)
    b = sft.make_batch(st, [s for s in data if s.needs_aux][:2])
    d = sft.make_direct_batch(st, [s for s in data if not s.needs_aux][:2])
    return b, d


def test_stage1_gradient(tiny):
    b, _ = _tiny_batches(tiny)
    tiny.set_trainable("detrans")
    assert finite_diff_check(lambda s: sft.stage1_loss(s, b), tiny, n_probes=24) < 1e-4


def test_stage2_gradient(tiny):
    b, d = _tiny_batches(tiny)
    tiny.set_trainable("embed", "llm")
    cfg = SftConfig()
    assert finite_diff_check(lambda s: sft.stage2_loss(s, b, cfg, d, d), tiny, n_probes=24) < 1e-4


def test_stage3_gradient(tiny):
    b, d = _tiny_batches(tiny)
    tiny.set_trainable("embed", "llm", "detrans")
    cfg = SftConfig()
    tf = np.array([True, False])
    assert finite_diff_check(lambda s: sft.stage3_loss(s, b, cfg, tf, d)[0], tiny, n_probes=24) < 1e-4


# -- drivers -------------------------------------------------------------------------

def test_stage_order_and_markers(small_data):
    data = small_data[0]
    st = toyvlm.ModelState.init(toyvlm.ModelConfig(d_model=16, d_vis=16, n_layers=2, n_heads=2,
                                                   detrans_layers=1, seed=0))
    cfg = SftConfig(steps1=3, steps2=2, steps3=4, batch_size=4, replay_per_batch=2)
    with pytest.raises(ConfigError):
        sft.run_stage(st, data, cfg, 2)
    rows = sft.run_stage(st, data, cfg, 1)
    assert len(rows) == 3 and st.markers == [sft.stage_marker(1)]
    rows = sft.run_stage(st, data, cfg, 2)
    assert len(rows) == 2
    rows = sft.run_stage(st, data, cfg, 3)
    assert len(rows) == 4 and [r.teacher_forcing_prob for r in rows] == [
        sft.anneal_probability(k, cfg.anneal_steps) for k in range(4)]
    assert st.markers == [sft.stage_marker(s) for s in (1, 2, 3)]
    assert not any(p.trainable for p in st.params.values())


def test_skipping_a_stage_leaves_no_marker(small_data):
    st = toyvlm.ModelState.init(toyvlm.ModelConfig(d_model=16, d_vis=16, n_layers=2, n_heads=2,
                                                   detrans_layers=1, seed=0))
    cfg = SftConfig(steps1=2, steps2=2, batch_size=4, replay_per_batch=0)
    out = sft.run_sft(st, small_data[0], cfg, stages=(1, 2))
    assert set(out) == {1, 2}
    assert sft.stage_marker(3) not in st.markers


def test_run_stage_is_deterministic(small_data):
    cfg = SftConfig(steps1=2, steps2=2, batch_size=4, replay_per_batch=2)
    fps = []
    for _ in range(2):
        st = toyvlm.ModelState.init(toyvlm.ModelConfig(d_model=16, d_vis=16, n_layers=2, n_heads=2,
                                                       detrans_layers=1, seed=0))
        sft.run_sft(st, small_data[0], cfg, stages=(1, 2))
        fps.append(st.fingerprint())
    assert fps[0] == fps[1]


def test_write_metrics(tmp_path):
    rows = [sft.StageMetrics(0, 1.5, 1.0, 0.5, 1.0, 0.3)]
    p = tmp_path / "m.csv"
    sft.write_metrics(rows, p)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(sft.METRIC_COLUMNS)
    assert lines[1] == "0,1.5,1.0,0.5,1.0,0.3"
