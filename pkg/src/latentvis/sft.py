"""Three-stage supervised training.

Stage 1 fits the detransformer to the visual edit ``delta_aux`` with the
language model frozen.  Stage 2 teaches the language model the token
template, including when to emit the trigger, with the ground-truth
auxiliary block injected.  Stage 3 trains both jointly, swapping the
ground-truth block for the model's own fused block with a probability that
anneals from 1 to 0.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import toyvlm
from .errors import ConfigError, ContractError
from .numerics import AdamW, SeededRng, Tensor
from .numerics import autograd as ag
from .vocab import ANS, AUX, EOS

STAGE_GROUPS = {
    0: ("embed", "llm"),
    1: ("detrans",),
    2: ("embed", "llm"),
    3: ("embed", "llm", "detrans"),
}


@dataclass
class SftConfig:
    # Learning rates and step counts are scaled for a randomly initialised
    # toy model; ``published_schedule()`` returns the published values.
    lr0: float = 3e-3
    lr1: float = 2e-3
    lr2: float = 1e-3
    lr3: float = 1e-4
    steps0_uniform: int = 100
    steps0_grid: int = 150
    pretrain_max_sigma: float = 1.0
    steps1: int = 300
    steps2: int = 200
    steps3: int = 150
    w_aux: float = 2.0
    w_normal: float = 1.0
    lambda_vis: float = 2.0
    cosine_weight: float = 0.5
    anneal_steps: int = 100
    batch_size: int = 16
    # answer-only replay of degraded direct samples during stages 2 and 3
    replay_per_batch: int = 2
    replay_weight: float = 1.0
    grad_accum: int = 1
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.w_normal <= 1.0 <= self.w_aux:
            raise ConfigError("need w_normal <= 1 <= w_aux")
        if self.lambda_vis < 0:
            raise ConfigError("lambda_vis must be non-negative")
        if self.replay_per_batch < 0 or self.replay_weight < 0:
            raise ConfigError("replay settings must be non-negative")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("batch_size and grad_accum must be positive")

    @classmethod
    def published_schedule(cls, **overrides) -> "SftConfig":
        base = dict(lr1=1e-4, lr2=1e-5, lr3=4e-6, steps1=3000, steps2=100, steps3=1500,
                    lambda_vis=2.0, cosine_weight=0.5, anneal_steps=700)
        base.update(overrides)
        return cls(**base)

    def lr(self, stage: int) -> float:
        return (self.lr0, self.lr1, self.lr2, self.lr3)[stage]

    def steps(self, stage: int) -> int:
        return (self.steps1, self.steps2, self.steps3)[stage - 1]


def _coerce(tp, raw: str):
    tp = tp if isinstance(tp, type) else {"int": int, "float": float, "str": str, "bool": bool}[tp]
    if tp is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return tp(raw.strip())


def parse_kv(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_kv(cls, values: dict, *, strict: bool = True):
    types = {f.name: f.type for f in fields(cls)}
    kw = {}
    for k, v in values.items():
        if k not in types:
            if strict:
                raise ConfigError(f"unknown {cls.__name__} key {k!r}")
            continue
        try:
            kw[k] = v if not isinstance(v, str) else _coerce(types[k], v)
        except ValueError:
            raise ConfigError(f"bad value for {k}: {v!r}") from None
    return cls(**kw)


def load_sft_config(path) -> SftConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_kv(SftConfig, parse_kv(fh.read()))


def dump_kv(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


@dataclass
class StageMetrics:
    step: int
    loss_total: float
    loss_ntp: float
    loss_vis: float
    teacher_forcing_prob: float
    grad_norm: float


METRIC_COLUMNS = ("step", "loss_total", "loss_ntp", "loss_vis", "tf_prob", "grad_norm")


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in rows:
            w.writerow([m.step, repr(m.loss_total), repr(m.loss_ntp), repr(m.loss_vis),
                        repr(m.teacher_forcing_prob), repr(m.grad_norm)])


# -- batches ------------------------------------------------------------------

def delta_aux(state, sample) -> np.ndarray:
    """Visual edit feature ``E_v(I_aux) - E_v(I)``."""
    inp = np.asarray(sample.input_features)
    aux = np.asarray(sample.aux_features)
    if inp.shape != aux.shape:
        raise toyvlm.DimensionError("input and auxiliary grids differ in shape")
    return toyvlm.encode_image(state, aux) - toyvlm.encode_image(state, inp)


@dataclass
class Batch:
    """Stacked arrays for a batch of triggering samples."""

    V: np.ndarray        # (B, N_v, d_v) encoded input
    U: np.ndarray        # (B, N_v, d_v) encoded auxiliary image
    question: np.ndarray  # (B, n_q)
    phase1: np.ndarray   # (B, n_1) ending in the trigger
    answer: np.ndarray   # (B, n_2): ANS, answer tokens, EOS

    @property
    def size(self) -> int:
        return self.V.shape[0]

    @property
    def delta(self) -> np.ndarray:
        return self.U - self.V


def answer_sequence(sample) -> list[int]:
    """Phase-2 target text: delimiter, answer, end of sequence."""
    return [ANS, *sample.answer_tokens, EOS]


def make_batch(state, samples) -> Batch:
    if not samples:
        raise ContractError("empty batch")
    lens = {(len(s.question_tokens), len(s.phase1_tokens), len(s.answer_tokens)) for s in samples}
    if len(lens) != 1:
        raise ContractError("batch mixes sequence layouts")
    for s in samples:
        if not s.phase1_tokens or s.phase1_tokens[-1] != AUX:
            raise ContractError(f"sample {s.id} lacks a phase-1 text ending in the trigger")
    inp = np.stack([s.input_features for s in samples])
    aux = np.stack([s.aux_features for s in samples])
    return Batch(
        V=toyvlm.encode_image(state, inp),
        U=toyvlm.encode_image(state, aux),
        question=np.array([s.question_tokens for s in samples], dtype=np.int64),
        phase1=np.array([s.phase1_tokens for s in samples], dtype=np.int64),
        answer=np.array([answer_sequence(s) for s in samples], dtype=np.int64),
    )


# -- losses -------------------------------------------------------------------

def token_nll(logits: Tensor, targets: np.ndarray, positions: np.ndarray) -> Tensor:
    """Per-token negative log-likelihood ``(B, n)``: logits at ``positions``
    predict ``targets``."""
    lp = ag.log_softmax(logits[:, positions])
    return -ag.gather_last(lp, targets)


def weighted_ntp(nll: Tensor, weights: np.ndarray) -> Tensor:
    """``sum w_t nll_t / sum w_t`` over every supervised position."""
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), nll.shape)
    return (nll * w).sum() * (1.0 / w.sum())


def vis_loss(A0: Tensor, target: np.ndarray, cosine_weight: float) -> Tensor:
    """MSE over all elements plus ``cosine_weight * mean(1 - cos)`` over the
    token rows whose target is nonzero (cosine is undefined elsewhere)."""
    diff = A0 - target
    mse = (diff * diff).mean()
    if cosine_weight == 0:
        return mse
    tnorm = np.sqrt((target * target).sum(-1))
    live = tnorm > 0
    if not live.any():
        return mse
    dots = (A0 * target).sum(axis=-1)
    anorm = ((A0 * A0).sum(axis=-1) + 1e-24).sqrt()
    cos = dots / (anorm * np.where(live, tnorm, 1.0))
    one_minus = (1.0 - cos) * live.astype(np.float64)
    return mse + one_minus.sum() * (cosine_weight / live.sum())


def anneal_probability(step: int, anneal_steps: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if anneal_steps <= 0:
        return 0.0
    return max(0.0, 1.0 - step / anneal_steps)


def _prefix_pieces(b: Batch):
    return [b.question, b.phase1]


def _detrans_from_prefix(state, b: Batch) -> Tensor:
    trace = toyvlm.forward(state, b.V, _prefix_pieces(b), upto_layer=state.config.hidden_layer_index)
    return toyvlm.detransform(state, trace.hidden_at_l)


def _answer_positions(state, b: Batch):
    """Positions whose logits predict phase-1, trigger and answer tokens in
    ``[X_v; q; y1; block; y2]``, with the matching targets."""
    nv = state.config.n_vis_tokens
    nq, n1, n2 = b.question.shape[1], b.phase1.shape[1], b.answer.shape[1]
    start1 = nv + nq
    pos1 = np.arange(start1 - 1, start1 + n1 - 1)
    start2 = start1 + n1 + nv
    pos2 = np.arange(start2 - 1, start2 + n2 - 1)
    return np.concatenate([pos1, pos2]), np.concatenate([b.phase1, b.answer], axis=1)


def stage1_loss(state, b: Batch) -> Tensor:
    A0 = _detrans_from_prefix(state, b)
    diff = A0 - b.delta
    return (diff * diff).mean()


def direct_nll(state, d: Batch) -> Tensor:
    """Per-token NLL ``(B, n)`` of phase-1 text and answer for trigger-free
    samples, read straight off ``[X_v; q; y1; y2]``."""
    text = np.concatenate([d.phase1, d.answer], axis=1)
    start = state.config.n_vis_tokens + d.question.shape[1]
    positions = np.arange(start - 1, start + text.shape[1] - 1)
    trace = toyvlm.forward(state, d.V, [d.question, text])
    return token_nll(trace.logits, text, positions)


def replay_loss(state, r: Batch) -> Tensor:
    """Mean NLL of the tokens after the answer delimiter only, so replayed
    samples never teach the model to skip the trigger."""
    nll = direct_nll(state, r)
    k = r.answer.shape[1] - 1
    return nll[:, nll.shape[1] - k:].mean()


def _with_replay(loss: Tensor, state, replay: Batch | None, cfg: SftConfig) -> Tensor:
    if replay is None or cfg.replay_weight == 0:
        return loss
    return loss + replay_loss(state, replay) * cfg.replay_weight


def _pooled_ntp(terms):
    """Combine ``(weighted_sum, weight_total)`` pairs into one normalised NTP."""
    num, den = None, 0.0
    for t, w in terms:
        num = t if num is None else num + t
        den += w
    if num is None:
        raise ContractError("no supervised tokens")
    return num * (1.0 / den)


def stage2_loss(state, b: Batch | None, cfg: SftConfig, direct: Batch | None = None,
                replay: Batch | None = None):
    """Weighted NTP over triggering samples ``b`` and, optionally, trigger-free
    samples ``direct``; the weight total is shared by both.  ``replay``
    adds the answer-only term."""
    terms = []
    if b is not None:
        positions, targets = _answer_positions(state, b)
        trace = toyvlm.forward(state, b.V, [b.question, b.phase1, b.U, b.answer])
        nll = token_nll(trace.logits, targets, positions)
        w = np.where(targets == AUX, cfg.w_aux, cfg.w_normal)
        terms.append(((nll * w).sum(), float(w.sum())))
    if direct is not None:
        nll = direct_nll(state, direct)
        terms.append((nll.sum() * cfg.w_normal, cfg.w_normal * nll.data.size))
    return _with_replay(_pooled_ntp(terms), state, replay, cfg)


def stage3_loss(state, b: Batch | None, cfg: SftConfig, tf_mask=None, direct: Batch | None = None,
                replay: Batch | None = None):
    """Joint loss.  ``tf_mask[i]`` selects the ground-truth block for sample i
    of ``b``; ``direct`` samples only contribute NTP.  Returns
    ``(total, ntp, vis)``."""
    terms = []
    lv = ag.constant(0.0)
    if b is not None:
        tf = np.zeros(b.size, dtype=bool) if tf_mask is None else np.asarray(tf_mask, dtype=bool)
        A0 = _detrans_from_prefix(state, b)
        fused = toyvlm.fuse_gated(b.V, A0, state.config.alpha)
        block = ag.where(tf[:, None, None], b.U, fused)
        positions, targets = _answer_positions(state, b)
        trace = toyvlm.forward(state, b.V, [b.question, b.phase1, block, b.answer])
        nll = token_nll(trace.logits, targets, positions)
        terms.append((nll.sum(), float(nll.data.size)))
        lv = vis_loss(A0, b.delta, cfg.cosine_weight)
    if direct is not None:
        nll = direct_nll(state, direct)
        terms.append((nll.sum(), float(nll.data.size)))
    ntp = _pooled_ntp(terms)
    return _with_replay(ntp + lv * cfg.lambda_vis, state, replay, cfg), ntp, lv


# -- steps --------------------------------------------------------------------

class _Trainer:
    """Optimizer bundle for one stage."""

    def __init__(self, state, stage: int, cfg: SftConfig):
        state.set_trainable(*STAGE_GROUPS[stage])
        self.params = [p for p in state.params.values() if p.trainable]
        self.opt = AdamW(self.params, lr=cfg.lr(stage), weight_decay=cfg.weight_decay,
                         max_grad_norm=cfg.max_grad_norm)
        for p in self.params:
            p.m[...] = 0.0
            p.v[...] = 0.0


def _trainer(state, stage, cfg):
    tr = getattr(state, "_trainer", None)
    if tr is None or tr[0] != stage:
        state._trainer = (stage, _Trainer(state, stage, cfg))
    return state._trainer[1]


@dataclass
class MixedBatch:
    """A batch split by layout: triggering samples and trigger-free ones.
    Either part may be ``None``."""

    trig: Batch | None
    direct: Batch | None = None
    replay: Batch | None = None

    @property
    def size(self) -> int:
        return sum(x.size for x in (self.trig, self.direct) if x is not None)


def _as_mixed(batch) -> MixedBatch:
    return batch if isinstance(batch, MixedBatch) else MixedBatch(batch, None)


def _split_one(b: Batch | None, parts: int):
    if b is None:
        return [None] * parts
    idx = np.array_split(np.arange(b.size), parts)
    return [Batch(b.V[i], b.U[i], b.question[i], b.phase1[i], b.answer[i]) if len(i) else None
            for i in idx]


def _split(batch: MixedBatch, parts: int) -> list[MixedBatch]:
    if parts == 1:
        return [batch]
    parts_ = zip(_split_one(batch.trig, parts), _split_one(batch.direct, parts),
                 _split_one(batch.replay, parts))
    return [MixedBatch(t, d, r) for t, d, r in parts_ if t is not None or d is not None]


def stage1_step(state, batch, cfg: SftConfig, step: int = 0) -> StageMetrics:
    tr = _trainer(state, 1, cfg)
    tr.opt.zero_grad()
    total = 0.0
    chunks = [c for c in _split(_as_mixed(batch), cfg.grad_accum) if c.trig is not None]
    if not chunks:
        raise ContractError("stage 1 needs triggering samples")
    for c in chunks:
        loss = stage1_loss(state, c.trig) * (1.0 / len(chunks))
        loss.backward()
        total += loss.item()
    gn = tr.opt.step()
    return StageMetrics(step, total, 0.0, total, 0.0, gn)


def stage2_step(state, batch, cfg: SftConfig, step: int = 0) -> StageMetrics:
    tr = _trainer(state, 2, cfg)
    tr.opt.zero_grad()
    total = 0.0
    chunks = _split(_as_mixed(batch), cfg.grad_accum)
    for c in chunks:
        loss = stage2_loss(state, c.trig, cfg, c.direct, c.replay) * (1.0 / len(chunks))
        loss.backward()
        total += loss.item()
    gn = tr.opt.step()
    return StageMetrics(step, total, total, 0.0, 0.0, gn)


def stage3_step(state, batch, cfg: SftConfig, step: int, rng: SeededRng) -> StageMetrics:
    tr = _trainer(state, 3, cfg)
    batch = _as_mixed(batch)
    p = anneal_probability(step, cfg.anneal_steps)
    n_trig = batch.trig.size if batch.trig is not None else 0
    tf = rng.random(n_trig) < p
    tr.opt.zero_grad()
    sums = np.zeros(3)
    chunks = _split(batch, cfg.grad_accum)
    offset = 0
    for c in chunks:
        k = c.trig.size if c.trig is not None else 0
        total, ntp, lv = stage3_loss(state, c.trig, cfg, tf[offset:offset + k], c.direct, c.replay)
        offset += k
        (total * (1.0 / len(chunks))).backward()
        sums += np.array([total.item(), ntp.item(), lv.item()]) / len(chunks)
    gn = tr.opt.step()
    return StageMetrics(step, float(sums[0]), float(sums[1]), float(sums[2]), p, gn)


# -- backbone pretraining -----------------------------------------------------
#
# The toy language model starts from random weights, unlike a pretrained VLM.
# A short direct-answer phase teaches it to read glyphs off visual tokens:
# first on images filled with a single glyph (no lookup needed), then on
# marked grids under mild degradation.  Without this, learning to find the
# one relevant row among ~140 positions stalls on a long plateau.

PRETRAIN_MARKER = "backbone-pretrain"


def make_direct_batch(state, samples) -> Batch:
    """Batch of direct-answer samples; ``phase1`` holds text without trigger."""
    inp = np.stack([s.input_features for s in samples])
    V = toyvlm.encode_image(state, inp)
    return Batch(
        V=V, U=V,
        question=np.array([s.question_tokens for s in samples], dtype=np.int64),
        phase1=np.array([s.phase1_tokens for s in samples], dtype=np.int64),
        answer=np.array([answer_sequence(s) for s in samples], dtype=np.int64),
    )


def direct_loss(state, b: Batch) -> Tensor:
    return direct_nll(state, b).mean()


def pretrain_backbone(state, gen_params, cfg: SftConfig, *, log=None) -> list[StageMetrics]:
    from . import synthdata

    codebook = synthdata.make_codebook(gen_params)
    rng = SeededRng(cfg.seed).child("pretrain")
    tr = _trainer(state, 0, cfg)
    rows = []
    total = cfg.steps0_uniform + cfg.steps0_grid
    for step in range(total):
        uniform = step < cfg.steps0_uniform
        srng = rng.child(f"batch-{step}")
        samples = [synthdata.gen_pretrain_sample(srng.child(str(i)), gen_params, codebook,
                                                 uniform=uniform,
                                                 max_sigma=cfg.pretrain_max_sigma)
                   for i in range(cfg.batch_size)]
        b = make_direct_batch(state, samples)
        tr.opt.zero_grad()
        loss = direct_loss(state, b)
        loss.backward()
        gn = tr.opt.step()
        m = StageMetrics(step, loss.item(), loss.item(), 0.0, 0.0, gn)
        rows.append(m)
        if log is not None:
            log(m)
    state._trainer = None
    state.set_trainable()
    if PRETRAIN_MARKER not in state.markers:
        state.markers.append(PRETRAIN_MARKER)
    return rows


# -- stage driver -------------------------------------------------------------

def stage_marker(stage: int) -> str:
    return f"sft-stage-{stage}"


def check_stage_order(state, stage: int, allow_out_of_order: bool = False) -> None:
    if allow_out_of_order:
        return
    missing = [s for s in range(1, stage) if stage_marker(s) not in state.markers]
    if missing:
        raise ConfigError(
            f"stage {stage} requires stage(s) {missing} first; pass the skip override for ablations"
        )


def _mixed_batch(state, samples) -> MixedBatch:
    trig = [s for s in samples if s.needs_aux]
    direct = [s for s in samples if not s.needs_aux]
    return MixedBatch(make_batch(state, trig) if trig else None,
                      make_direct_batch(state, direct) if direct else None)


def _replay_batch(state, gen_params, codebook, cfg: SftConfig, rng: SeededRng) -> Batch:
    from . import synthdata

    samples = [synthdata.gen_pretrain_sample(rng.child(str(i)), gen_params, codebook,
                                             max_sigma=cfg.pretrain_max_sigma)
               for i in range(cfg.replay_per_batch)]
    return make_direct_batch(state, samples)


def _default_gen_params(dataset):
    from . import synthdata

    s = dataset[0]
    return synthdata.GenParams(grid_size=s.grid_size, raw_dim=s.input_features.shape[1])


def run_stage(state, dataset, cfg: SftConfig, stage: int, *,
              allow_out_of_order: bool = False, log=None, gen_params=None) -> list[StageMetrics]:
    """Train one stage over shuffled batches of ``dataset`` and mark the state
    as having completed it.

    Stage 1 sees triggering samples only.  Stages 2 and 3 also train on
    trigger-free samples and replay ``replay_per_batch`` degraded direct
    samples per step (drawn from ``gen_params``), supervising only their
    answers; both keep the direct-answer path from being forgotten."""
    if stage not in (1, 2, 3):
        raise ConfigError(f"unknown stage {stage}")
    check_stage_order(state, stage, allow_out_of_order)
    pool = [s for s in dataset if s.needs_aux or stage > 1]
    if not any(s.needs_aux for s in pool):
        raise ContractError("no triggering samples to train on")
    rng = SeededRng(cfg.seed).child(f"stage{stage}")
    order_rng = rng.child("order")
    tf_rng = rng.child("teacher-forcing")
    order = order_rng.permutation(len(pool))
    cursor = 0
    bs = min(cfg.batch_size, len(pool))
    rows = []
    replay = stage > 1 and cfg.replay_per_batch > 0 and cfg.replay_weight > 0
    if replay:
        from . import synthdata

        gen_params = gen_params or _default_gen_params(dataset)
        codebook = synthdata.make_codebook(gen_params)
        replay_rng = rng.child("replay")
    state._trainer = None
    for step in range(cfg.steps(stage)):
        if cursor + bs > len(pool):
            order = order_rng.permutation(len(pool))
            cursor = 0
        batch = _mixed_batch(state, [pool[i] for i in order[cursor:cursor + bs]])
        cursor += bs
        if replay:
            batch.replay = _replay_batch(state, gen_params, codebook, cfg,
                                         replay_rng.child(f"batch-{step}"))
        if stage == 1:
            m = stage1_step(state, batch, cfg, step)
        elif stage == 2:
            m = stage2_step(state, batch, cfg, step)
        else:
            m = stage3_step(state, batch, cfg, step, tf_rng)
        if not all(np.isfinite([m.loss_total, m.grad_norm])):
            raise ContractError(f"non-finite loss at stage {stage} step {step}")
        rows.append(m)
        if log is not None:
            log(m)
    state._trainer = None
    state.set_trainable()
    if stage_marker(stage) not in state.markers:
        state.markers.append(stage_marker(stage))
    return rows


def run_sft(state, dataset, cfg: SftConfig, stages=(1, 2, 3), *, log=None,
            gen_params=None) -> dict:
    """Run several stages in order; skipping a stage requires listing only the
    ones to run (the order check is relaxed automatically)."""
    skipped = sorted(set((1, 2, 3)) - set(stages))
    out = {}
    for s in stages:
        out[s] = run_stage(state, dataset, cfg, s, allow_out_of_order=bool(skipped), log=log,
                           gen_params=gen_params)
    return out
