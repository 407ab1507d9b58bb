"""Policy optimisation with cached auxiliary latents.

Rollouts run the ordinary two-phase pipeline at temperature ``T``.  The fused
auxiliary block a rollout produced is stored verbatim on its record and, at
update time, injected back as fixed context.  Only the discrete tokens of
phase 1 and phase 2 carry importance ratios and gradients; the detransformer
is left out of the optimizer.

The objective per record is the mean over its tokens of the clipped surrogate
minus ``kl_coef`` times a k3 estimate of KL(pi || pi_ref); the batch loss is
the negated mean over records.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import inference, toyvlm
from .errors import ConfigError, ContractError
from .numerics import AdamW, Param, SeededRng, Tensor, no_grad
from .numerics import autograd as ag
from .vocab import ANS, AUX, EOS

METRIC_COLUMNS = ("step", "mean_reward", "mean_r_acc", "trigger_rate", "mean_kl",
                  "clip_frac", "policy_loss")

# large negative logit standing in for -inf where a token is disallowed
_MASKED = -1e9


@dataclass
class AlpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_coef: float = 1e-2
    lambda_fmt: float = 0.5
    lambda_aux: float = 0.3
    temperature: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 0.01
    max_response_len: int = 8     # per decoding segment
    adv_eps: float = 1e-6
    prompts_per_step: int = 8
    steps: int = 30
    max_grad_norm: float = 1.0
    max_triggers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be > 0")
        if self.temperature <= 0:
            raise ConfigError("rollouts need temperature > 0")
        if self.max_triggers != 1:
            raise ConfigError("records cache a single auxiliary block; max_triggers must be 1")
        if self.max_response_len < 1 or self.prompts_per_step < 1 or self.steps < 0:
            raise ConfigError("lengths and counts must be positive")

    @classmethod
    def published_schedule(cls, **over):
        base = dict(lr=4e-6, weight_decay=0.01, steps=54)
        base.update(over)
        return cls(**base)

    def inference_config(self) -> inference.InferenceConfig:
        return inference.InferenceConfig(
            max_phase1_tokens=self.max_response_len,
            max_phase2_tokens=self.max_response_len,
            temperature=self.temperature,
            max_triggers=self.max_triggers,
            batch_size=self.group_size * self.prompts_per_step,
        )


@dataclass
class RewardBreakdown:
    r_acc: int
    r_fmt: int
    r_aux: int
    total: float


@dataclass
class RolloutRecord:
    sample_id: int
    question_tokens: list
    phase1_tokens: list
    e_aux: np.ndarray | None
    phase2_tokens: list
    old_logprobs: np.ndarray
    visual: np.ndarray = field(repr=False, default=None)   # encoded input image
    truncated: bool = False
    n_triggers: int = 0
    reward: RewardBreakdown | None = None
    total_reward: float = 0.0
    advantage: float = 0.0

    @property
    def triggered(self) -> bool:
        return self.e_aux is not None

    @property
    def tokens(self) -> list:
        return list(self.phase1_tokens) + list(self.phase2_tokens)

    def check(self) -> None:
        if len(self.old_logprobs) != len(self.phase1_tokens) + len(self.phase2_tokens):
            raise ContractError(f"record {self.sample_id}: old_logprobs length mismatch")
        has_trigger = bool(self.phase1_tokens) and self.phase1_tokens[-1] == AUX
        if has_trigger != self.triggered:
            raise ContractError(f"record {self.sample_id}: e_aux present iff trigger emitted")
        if self.phase2_tokens and not self.triggered:
            raise ContractError(f"record {self.sample_id}: phase-2 text without a trigger")


# -- rewards and advantages ---------------------------------------------------

def compute_reward(record: RolloutRecord, sample, cfg: AlpoConfig) -> RewardBreakdown:
    """Accuracy, template and trigger rewards.  The template asks for an
    answer delimiter followed by text ending in EOS, no truncation and at
    most ``max_triggers`` triggers; the trigger counts only when it precedes
    the answer delimiter."""
    final = record.phase2_tokens if record.triggered else record.phase1_tokens
    answer = inference.extract_answer(list(final))
    r_acc = int(answer == list(sample.answer_tokens))
    well_formed = (ANS in final and bool(final) and final[-1] == EOS
                   and not record.truncated and record.n_triggers <= cfg.max_triggers)
    if record.triggered:
        # trigger before the delimiter: phase 1 must not already answer
        well_formed = well_formed and ANS not in record.phase1_tokens
    r_fmt = int(well_formed)
    r_aux = int(record.triggered and ANS not in record.phase1_tokens)
    total = r_acc + cfg.lambda_fmt * r_fmt + cfg.lambda_aux * r_aux
    return RewardBreakdown(r_acc, r_fmt, r_aux, float(total))


def group_advantages(rewards, adv_eps: float = 1e-6) -> np.ndarray:
    """``(r - mean) / (std + adv_eps)`` with the population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ContractError("a group needs at least two rewards")
    return (r - r.mean()) / (r.std() + adv_eps)


def clipped_token_objective(ratio, advantage, eps):
    """``min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)`` on plain numbers."""
    ratio = np.asarray(ratio, dtype=np.float64)
    if np.any(ratio <= 0):
        raise ContractError("ratio must be positive")
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - eps, 1 + eps) * advantage)


# -- log-probabilities under a policy ------------------------------------------

def _signature(r: RolloutRecord):
    nb = None if r.e_aux is None else r.e_aux.shape[0]
    return (len(r.question_tokens), len(r.phase1_tokens), nb, len(r.phase2_tokens))


def _group_records(records):
    groups = {}
    for i, r in enumerate(records):
        groups.setdefault(_signature(r), []).append(i)
    return list(groups.values())


def _aux_mask(n1: int, n2: int, max_triggers: int, vocab_size: int) -> np.ndarray:
    """Additive logit mask mirroring decode: the trigger is unavailable once
    ``max_triggers`` blocks have been injected."""
    m = np.zeros((n1 + n2, vocab_size))
    if max_triggers <= 0:
        m[:, AUX] = _MASKED
    elif max_triggers == 1:
        m[n1:, AUX] = _MASKED
    return m


def model_logprob_groups(state, records, cfg: AlpoConfig):
    """Yield ``(indices, logprobs)`` with ``logprobs`` a ``(B, n)`` tensor of
    token log-probabilities of ``o1 + o2`` under ``state``, the cached blocks
    injected as constants."""
    nv = state.config.n_vis_tokens
    for idx in _group_records(records):
        rs = [records[i] for i in idx]
        nq, n1, nb, n2 = _signature(rs[0])
        V = np.stack([r.visual for r in rs])
        pieces = [np.array([r.question_tokens for r in rs], dtype=np.int64),
                  np.array([r.phase1_tokens for r in rs], dtype=np.int64)]
        targets = [pieces[1]]
        pos = [np.arange(nv + nq - 1, nv + nq + n1 - 1)]
        ratio = 1
        if nb is not None:
            pieces.append(np.stack([r.e_aux for r in rs]))
            ratio = inference.ratio_for_length(nv, nb)
            if n2:
                o2 = np.array([r.phase2_tokens for r in rs], dtype=np.int64)
                pieces.append(o2)
                targets.append(o2)
                start2 = nv + nq + n1 + nb
                pos.append(np.arange(start2 - 1, start2 + n2 - 1))
        trace = toyvlm.forward(state, V, pieces, pool_ratio=ratio)
        positions = np.concatenate(pos)
        logits = trace.logits[:, positions] * (1.0 / cfg.temperature)
        logits = logits + _aux_mask(n1, n2, cfg.max_triggers, logits.shape[-1])
        lp = ag.gather_last(ag.log_softmax(logits), np.concatenate(targets, axis=1))
        yield idx, lp


def logprob_groups(policy, records, cfg: AlpoConfig):
    if hasattr(policy, "logprob_groups"):
        return policy.logprob_groups(records, cfg)
    return model_logprob_groups(policy, records, cfg)


def record_logprobs(policy, records, cfg: AlpoConfig) -> list[np.ndarray]:
    out = [None] * len(records)
    with no_grad():
        for idx, lp in logprob_groups(policy, records, cfg):
            for j, i in enumerate(idx):
                out[i] = lp.data[j].copy()
    return out


# -- rollouts -----------------------------------------------------------------

def _records_from_results(state, samples, results, cfg: AlpoConfig) -> list[RolloutRecord]:
    V = toyvlm.encode_image(state, np.stack([s.input_features for s in samples]))
    recs = []
    for s, v, res in zip(samples, V, results):
        recs.append(RolloutRecord(
            sample_id=s.id, question_tokens=list(s.question_tokens),
            phase1_tokens=list(res.phase1_tokens),
            e_aux=None if not res.aux_blocks else np.array(res.aux_blocks[0]),
            phase2_tokens=list(res.phase2_tokens),
            old_logprobs=np.zeros(0), visual=v, truncated=bool(res.truncated),
            n_triggers=int(res.n_triggers),
        ))
    for r, lp in zip(recs, record_logprobs(state, recs, cfg)):
        r.old_logprobs = lp
    return recs


def score_group(records, sample, cfg: AlpoConfig) -> None:
    for r in records:
        r.reward = compute_reward(r, sample, cfg)
        r.total_reward = r.reward.total
    adv = group_advantages([r.total_reward for r in records], cfg.adv_eps)
    for r, a in zip(records, adv):
        r.advantage = float(a)


def rollout_batch(state, samples, cfg: AlpoConfig, rng: SeededRng) -> list[list[RolloutRecord]]:
    """``G`` rollouts for each sample, decoded together.  Sample ``s`` uses the
    substreams of ``rng.child(f"sample-{s.id}")``, so the result equals
    calling :func:`rollout_group` per sample."""
    G = cfg.group_size
    reps = [s for s in samples for _ in range(G)]
    rngs = [rng.child(f"sample-{s.id}").child(f"rollout-{g}") for s in samples for g in range(G)]
    icfg = cfg.inference_config()
    results = []
    for k in range(0, len(reps), icfg.batch_size):
        results += inference.decode_with_rngs(state, reps[k:k + icfg.batch_size], icfg,
                                              rngs[k:k + icfg.batch_size])
    recs = _records_from_results(state, reps, results, cfg)
    groups = [recs[i * G:(i + 1) * G] for i in range(len(samples))]
    for s, g in zip(samples, groups):
        score_group(g, s, cfg)
    return groups


def rollout_group(state, sample, cfg: AlpoConfig, rng: SeededRng) -> list[RolloutRecord]:
    """``G`` rollouts for one sample, scored and advantage-normalised."""
    icfg = cfg.inference_config()
    rngs = [rng.child(f"rollout-{g}") for g in range(cfg.group_size)]
    reps = [sample] * cfg.group_size
    results = inference.decode_with_rngs(state, reps, icfg, rngs)
    recs = _records_from_results(state, reps, results, cfg)
    score_group(recs, sample, cfg)
    return recs


# -- update -------------------------------------------------------------------

@dataclass
class AlpoMetrics:
    step: int
    mean_reward: float
    mean_r_acc: float
    trigger_rate: float
    mean_kl: float
    clip_frac: float
    policy_loss: float
    grad_norm: float = 0.0


def surrogate(new_lp: Tensor, old_lp: np.ndarray, ref_lp: np.ndarray, adv: np.ndarray,
              cfg: AlpoConfig):
    """Sum over records of per-record mean ``clip objective - kl_coef * k3``.
    All arrays are ``(B, n)`` except ``adv`` which is ``(B,)``.  Returns
    ``(objective, kl_sum, n_clipped)`` with the last two as plain numbers."""
    A = np.asarray(adv, dtype=np.float64)[:, None]
    ratio = (new_lp - old_lp).exp()
    eps = cfg.clip_eps
    obj = ag.minimum(ratio * A, ag.clip(ratio, 1 - eps, 1 + eps) * A)
    d = ref_lp - new_lp
    k3 = d.exp() - d - 1.0
    per_token = obj - k3 * cfg.kl_coef
    n = new_lp.shape[1]
    total = per_token.sum() * (1.0 / n)
    r = ratio.data
    binding = ((r > 1 + eps) & (A > 0)) | ((r < 1 - eps) & (A < 0))
    return total, float(k3.data.mean(axis=1).sum()), float(binding.sum())


def alpo_loss(policy, ref_policy, records, cfg: AlpoConfig):
    """Negated mean objective over records, plus ``(mean_kl, clip_frac)``."""
    if not records:
        raise ContractError("no rollout records")
    for r in records:
        r.check()
    ref = record_logprobs(ref_policy, records, cfg)
    total = None
    kl = 0.0
    clipped = 0.0
    n_tok = sum(len(r.old_logprobs) for r in records)
    for idx, lp in logprob_groups(policy, records, cfg):
        if lp.shape[1] != len(records[idx[0]].old_logprobs):
            raise ContractError("record/state sequence mismatch")
        old = np.stack([records[i].old_logprobs for i in idx])
        rl = np.stack([ref[i] for i in idx])
        adv = np.array([records[i].advantage for i in idx])
        t, k, c = surrogate(lp, old, rl, adv, cfg)
        total = t if total is None else total + t
        kl += k
        clipped += c
    loss = total * (-1.0 / len(records))
    return loss, kl / len(records), clipped / max(n_tok, 1)


def _optimizer(policy, cfg: AlpoConfig) -> AdamW:
    tr = getattr(policy, "_trainer", None)
    if tr is None or tr[0] != "alpo":
        if hasattr(policy, "set_trainable"):
            policy.set_trainable("embed", "llm")
        params = [p for p in policy.params.values() if p.trainable] \
            if isinstance(policy.params, dict) else list(policy.params)
        for p in params:
            p.m[...] = 0.0
            p.v[...] = 0.0
        policy._trainer = ("alpo", AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                                         max_grad_norm=cfg.max_grad_norm))
    return policy._trainer[1]


def alpo_step(state, ref_state, records, cfg: AlpoConfig, step: int = 0) -> AlpoMetrics:
    """One optimizer step on the language-model side.  A batch with no
    learning signal (zero advantages and no KL term) leaves parameters
    untouched rather than letting momentum or weight decay move them."""
    opt = _optimizer(state, cfg)
    opt.zero_grad()
    loss, kl, clip_frac = alpo_loss(state, ref_state, records, cfg)
    silent = cfg.kl_coef == 0 and all(r.advantage == 0 for r in records)
    gn = 0.0
    if not silent:
        loss.backward()
        gn = opt.step()
    rewards = [r.total_reward for r in records]
    return AlpoMetrics(
        step=step,
        mean_reward=float(np.mean(rewards)),
        mean_r_acc=float(np.mean([r.reward.r_acc if r.reward else 0 for r in records])),
        trigger_rate=float(np.mean([r.triggered for r in records])),
        mean_kl=kl, clip_frac=clip_frac, policy_loss=loss.item(), grad_norm=gn,
    )


def reference_copy(state):
    """Frozen snapshot used for the KL term."""
    ref = state.copy()
    ref._trainer = None
    return ref


def train(state, samples, cfg: AlpoConfig, *, log=None, dump=None) -> list[AlpoMetrics]:
    """Run ``cfg.steps`` rollout/update rounds over ``samples`` (cycled in a
    seeded order).  ``dump`` collects every record when given a list."""
    if not samples:
        raise ContractError("no prompts for ALPO")
    ref = reference_copy(state)
    rng = SeededRng(cfg.seed).child("alpo")
    order = rng.child("order").permutation(len(samples))
    cursor = 0
    rows = []
    state._trainer = None
    for step in range(cfg.steps):
        take = []
        while len(take) < min(cfg.prompts_per_step, len(samples)):
            if cursor >= len(order):
                order = rng.child(f"order-{step}").permutation(len(samples))
                cursor = 0
            take.append(samples[order[cursor]])
            cursor += 1
        groups = rollout_batch(state, take, cfg, rng.child(f"step-{step}"))
        records = [r for g in groups for r in g]
        m = alpo_step(state, ref, records, cfg, step)
        if not math.isfinite(m.policy_loss):
            raise ContractError(f"non-finite ALPO loss at step {step}")
        if dump is not None:
            dump.extend(records)
        rows.append(m)
        if log is not None:
            log(m)
    state._trainer = None
    state.set_trainable()
    if "alpo" not in state.markers:
        state.markers.append("alpo")
    return rows


# -- closed-form bandit ---------------------------------------------------------

class BanditPolicy:
    """Single-token softmax policy over ``k`` actions with logits ``theta``;
    used to check the update against a closed-form policy gradient."""

    def __init__(self, theta, name: str = "bandit.theta"):
        self.theta = Param(np.asarray(theta, dtype=np.float64).reshape(1, -1), name)
        self.params = {name: self.theta}
        self._trainer = None
        self.markers = []

    def named_params(self):
        return list(self.params.items())

    def set_trainable(self, *groups):
        pass

    def logprob_groups(self, records, cfg: AlpoConfig):
        idx = list(range(len(records)))
        acts = np.array([[r.phase1_tokens[0]] for r in records], dtype=np.int64)
        lp = ag.log_softmax(self.theta * (1.0 / cfg.temperature))
        rows = lp[np.zeros(len(records), dtype=np.int64)].reshape(len(records), 1, -1)
        yield idx, ag.gather_last(rows, acts)

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        z = self.theta.data[0] / temperature
        p = np.exp(z - z.max())
        return p / p.sum()


def bandit_records(policy: BanditPolicy, actions, rewards, cfg: AlpoConfig) -> list[RolloutRecord]:
    lp = np.log(policy.probs(cfg.temperature))
    recs = [RolloutRecord(sample_id=i, question_tokens=[], phase1_tokens=[int(a)], e_aux=None,
                          phase2_tokens=[], old_logprobs=np.array([lp[a]]), total_reward=float(r))
            for i, (a, r) in enumerate(zip(actions, rewards))]
    for rec, a in zip(recs, group_advantages(rewards, cfg.adv_eps)):
        rec.advantage = float(a)
    return recs


def bandit_gradient(theta, actions, rewards, cfg: AlpoConfig, ref_theta=None) -> np.ndarray:
    """Closed-form gradient of the ALPO loss for the on-policy bandit:
    ``-(1/G) sum_i [A_i - kl * (1 - pi_ref(a_i)/pi(a_i))] (e_{a_i} - pi) / T``."""
    theta = np.asarray(theta, dtype=np.float64)
    z = theta / cfg.temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    if ref_theta is None:
        q = p
    else:
        zr = np.asarray(ref_theta, dtype=np.float64) / cfg.temperature
        q = np.exp(zr - zr.max())
        q /= q.sum()
    A = group_advantages(rewards, cfg.adv_eps)
    g = np.zeros_like(theta)
    for a, adv in zip(actions, A):
        coef = adv - cfg.kl_coef * (1.0 - q[a] / p[a])
        g -= coef * (np.eye(len(theta))[a] - p) / cfg.temperature
    return g / len(actions)


# -- output -------------------------------------------------------------------

def write_metrics(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in rows:
            w.writerow([m.step] + [repr(float(getattr(m, c))) for c in METRIC_COLUMNS[1:]])


def record_to_json(r: RolloutRecord) -> dict:
    return {
        "sample_id": int(r.sample_id),
        "phase1_tokens": [int(t) for t in r.phase1_tokens],
        "e_aux": None if r.e_aux is None else np.asarray(r.e_aux).tolist(),
        "phase2_tokens": [int(t) for t in r.phase2_tokens],
        "old_logprobs": [float(x) for x in r.old_logprobs],
        "reward_components": None if r.reward is None else
        [r.reward.r_acc, r.reward.r_fmt, r.reward.r_aux],
        "total_reward": float(r.total_reward),
        "advantage": float(r.advantage),
    }


def write_rollouts(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r), separators=(",", ":")) + "\n")


def config_dict(cfg: AlpoConfig) -> dict:
    return asdict(cfg)
