"""Two-phase generation with a single-shot auxiliary block.

Phase 1 decodes text after ``[X_v; question]`` until the trigger, EOS, or a
length limit.  On a trigger, the hidden states at the input of layer ``l``
(the whole sequence so far, trigger included) go through the detransformer,
the result is fused with the visual tokens, optionally mean-pooled, and
appended as continuous embeddings.  Phase 2 then recomputes the whole
sequence and keeps decoding.

Decoding is batched: rows that share a sequence layout advance in lockstep,
and each row draws from its own RNG substream so results do not depend on
how samples are batched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import toyvlm
from .errors import ConfigError, ContractError
from .numerics import SeededRng, no_grad
from .vocab import ANS, AUX, EOS

AUX_MODES = ("normal", "disabled", "placeholder", "raw_visual")


@dataclass
class InferenceConfig:
    max_phase1_tokens: int = 8
    max_phase2_tokens: int = 6
    temperature: float = 0.0
    pooling_ratio: int = 1
    aux_mode: str = "normal"
    placeholder_value: float = 0.0
    max_triggers: int = 1
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.aux_mode == "raw":
            self.aux_mode = "raw_visual"
        if self.aux_mode not in AUX_MODES:
            raise ConfigError(f"aux_mode must be one of {AUX_MODES}")
        if self.pooling_ratio < 1:
            raise ConfigError("pooling_ratio must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_triggers < 0:
            raise ConfigError("max_triggers must be >= 0")


@dataclass
class InferenceResult:
    id: int
    phase1_tokens: list
    triggered: bool
    aux_blocks: list = field(default_factory=list)   # fused, pooled, (n, d_v)
    raw_A0: list = field(default_factory=list)        # detransformer output per block
    phase2_tokens: list = field(default_factory=list)
    answer: list = field(default_factory=list)
    truncated: bool = False
    n_triggers: int = 0

    @property
    def aux_tokens(self):
        return self.aux_blocks[0] if self.aux_blocks else None

    @property
    def latent_len(self) -> int:
        return int(self.aux_blocks[0].shape[0]) if self.aux_blocks else 0


# -- pooling and auxiliary blocks ---------------------------------------------

def pool_tokens(X: np.ndarray, ratio: int) -> np.ndarray:
    """Mean over contiguous windows of ``ratio`` rows along axis -2; a
    remainder forms a smaller final window."""
    X = np.asarray(X, dtype=np.float64)
    if ratio == 1:
        return X
    n = X.shape[-2]
    starts = np.arange(0, n, ratio)
    sums = np.add.reduceat(X, starts, axis=-2)
    counts = np.diff(np.append(starts, n)).astype(np.float64)
    return sums / counts[:, None]


def pooled_length(n_vis: int, ratio: int) -> int:
    return -(-n_vis // ratio)


def ratio_for_length(n_vis: int, target: int) -> int:
    """Pooling ratio whose achievable length is nearest ``target`` (ties go to
    the longer sequence)."""
    best = None
    for r in range(1, n_vis + 1):
        n = pooled_length(n_vis, r)
        key = (abs(n - target), -n)
        if best is None or key < best[0]:
            best = (key, r)
    return best[1]


def aux_block(state, V: np.ndarray, A0, cfg: InferenceConfig) -> np.ndarray:
    """Fused block ``pool(V) + alpha * pool(A0')`` where ``A0'`` depends on the
    mode.  ``A0`` may be None outside normal mode."""
    alpha = state.config.alpha
    if cfg.aux_mode == "normal":
        edit = A0
    elif cfg.aux_mode == "placeholder":
        edit = np.full_like(V, cfg.placeholder_value)
    elif cfg.aux_mode == "raw_visual":
        edit = V
    else:
        raise ContractError("disabled mode builds no auxiliary block")
    return toyvlm.fuse_gated(pool_tokens(V, cfg.pooling_ratio),
                             pool_tokens(edit, cfg.pooling_ratio), alpha)


def build_auxiliary(state, trace: toyvlm.ForwardTrace, V: np.ndarray, cfg: InferenceConfig,
                    *, triggered: bool = True):
    """Detransform the trace's hidden states and fuse.  Returns ``(A, A0)``
    (batched), or ``(None, None)`` in disabled mode."""
    if not triggered:
        raise ContractError("build_auxiliary called without a trigger")
    if cfg.aux_mode == "disabled":
        return None, None
    V = np.asarray(V, dtype=np.float64)
    if V.ndim == 2:
        V = V[None]
    A0 = None
    if cfg.aux_mode == "normal":
        with no_grad():
            A0 = toyvlm.detransform(state, trace.hidden_at_l).data
    return aux_block(state, V, A0, cfg), A0


# -- decoding -----------------------------------------------------------------

def _sample_next(logits: np.ndarray, temperature: float, rngs, rows) -> np.ndarray:
    if temperature == 0:
        return logits.argmax(axis=-1)
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.empty(len(rows), dtype=np.int64)
    for j, i in enumerate(rows):
        u = rngs[i].random()
        out[j] = min(int(np.searchsorted(np.cumsum(p[j]), u, side="right")), p.shape[1] - 1)
    return out


@dataclass
class _Row:
    pieces: list               # token lists and (n, d_v) blocks, in order
    generated: list            # tokens of the current segment
    segments: list             # finished text segments
    blocks: list
    a0s: list
    triggers: int = 0
    truncated: bool = False
    done: bool = False

    def signature(self):
        sig = []
        for p in self.pieces:
            sig.append(("b", p.shape[0]) if isinstance(p, np.ndarray) else ("t", len(p)))
        return tuple(sig) + (("t", len(self.generated)),)


def _stack_pieces(rows, extra_tokens):
    """Batched pieces for rows sharing a signature."""
    out = []
    for k in range(len(rows[0].pieces)):
        first = rows[0].pieces[k]
        if isinstance(first, np.ndarray):
            out.append(np.stack([r.pieces[k] for r in rows]))
        else:
            out.append(np.array([r.pieces[k] for r in rows], dtype=np.int64))
    if extra_tokens:
        out.append(np.array([r.generated for r in rows], dtype=np.int64))
    return out


def _decode_segment(state, V, rows, idx, cfg, rngs, limit):
    """Advance rows ``idx`` (same signature) until each hits trigger, EOS or
    ``limit`` tokens in its current segment."""
    active = list(idx)
    while active:
        groups = {}
        for i in active:
            groups.setdefault(rows[i].signature(), []).append(i)
        still = []
        for group in groups.values():
            rs = [rows[i] for i in group]
            pieces = _stack_pieces(rs, bool(rs[0].generated))
            with no_grad():
                tr = toyvlm.forward(state, V[group], pieces, pool_ratio=cfg.pooling_ratio)
            logits = tr.logits.data[:, -1].copy()
            spent = np.array([rows[i].triggers >= cfg.max_triggers for i in group])
            logits[spent, AUX] = -np.inf
            nxt = _sample_next(logits, cfg.temperature, rngs, group)
            for i, tok in zip(group, nxt):
                r = rows[i]
                r.generated.append(int(tok))
                if tok in (AUX, EOS):
                    continue
                if len(r.generated) >= limit:
                    r.truncated = True
                    continue
                still.append(i)
        active = still


def _handle_stops(state, V, rows, idx, cfg):
    """Close segments that ended on a trigger: build and append blocks.
    Returns rows that need further decoding."""
    again = []
    need_block = [i for i in idx if rows[i].generated and rows[i].generated[-1] == AUX
                  and rows[i].triggers < cfg.max_triggers]
    groups = {}
    for i in need_block:
        groups.setdefault(rows[i].signature(), []).append(i)
    for group in groups.values():
        rs = [rows[i] for i in group]
        for r in rs:
            r.triggers += 1
        if cfg.aux_mode == "disabled":
            # nothing is injected: the trigger becomes the answer delimiter,
            # so the model answers from the visual tokens alone
            for i, r in zip(group, rs):
                if len(r.generated) > 1:
                    r.pieces.append(list(r.generated[:-1]))
                r.segments.append(list(r.generated))
                r.generated = [ANS]
                again.append(i)
            continue
        pieces = _stack_pieces(rs, True)
        with no_grad():
            tr = toyvlm.forward(state, V[group], pieces, upto_layer=state.config.hidden_layer_index,
                                pool_ratio=cfg.pooling_ratio)
        A, A0 = build_auxiliary(state, tr, V[group], cfg)
        for j, (i, r) in enumerate(zip(group, rs)):
            r.pieces.append(list(r.generated))
            r.pieces.append(A[j])
            r.segments.append(list(r.generated))
            r.blocks.append(A[j])
            r.a0s.append(None if A0 is None else A0[j])
            r.generated = []
            again.append(i)
    for i in idx:
        if i not in again:
            rows[i].done = True
    return again


def extract_answer(tokens) -> list:
    """Tokens after the first answer delimiter, up to EOS."""
    if ANS not in tokens:
        return []
    out = []
    for t in tokens[tokens.index(ANS) + 1:]:
        if t == EOS:
            break
        out.append(int(t))
    return out


def _rng_for(cfg: InferenceConfig, sample_id: int) -> SeededRng:
    return SeededRng(cfg.seed).child(f"infer-{sample_id}")


def _run_block(state, samples, cfg, rngs=None) -> list[InferenceResult]:
    V = toyvlm.encode_image(state, np.stack([s.input_features for s in samples]))
    if rngs is None:
        rngs = [_rng_for(cfg, s.id) for s in samples]
    rows = [_Row([list(s.question_tokens)], [], [], [], []) for s in samples]
    idx = list(range(len(samples)))
    _decode_segment(state, V, rows, idx, cfg, rngs, cfg.max_phase1_tokens)
    pending = _handle_stops(state, V, rows, idx, cfg)
    phase1 = [list(r.segments[0]) if r.segments else list(r.generated) for r in rows]
    while pending:
        _decode_segment(state, V, rows, pending, cfg, rngs, cfg.max_phase2_tokens)
        pending = _handle_stops(state, V, rows, pending, cfg)
    out = []
    for s, r, p1 in zip(samples, rows, phase1):
        triggered = r.triggers > 0
        if triggered:
            p2 = [t for seg in r.segments[1:] for t in seg] + list(r.generated)
            ans = extract_answer(p2)
        else:
            p2 = []
            ans = extract_answer(p1)
        out.append(InferenceResult(
            id=s.id, phase1_tokens=p1, triggered=triggered,
            aux_blocks=list(r.blocks), raw_A0=list(r.a0s), phase2_tokens=p2,
            answer=ans, truncated=r.truncated, n_triggers=r.triggers,
        ))
    return out


def run_inference_batch(state, samples, cfg: InferenceConfig) -> list[InferenceResult]:
    results = []
    for k in range(0, len(samples), cfg.batch_size):
        results.extend(_run_block(state, samples[k:k + cfg.batch_size], cfg))
    return results


def decode_with_rngs(state, samples, cfg: InferenceConfig, rngs) -> list[InferenceResult]:
    """Decode ``samples`` in one block, row ``i`` drawing from ``rngs[i]``."""
    if len(rngs) != len(samples):
        raise ContractError("need one RNG per sample")
    return _run_block(state, samples, cfg, rngs)


def run_inference(state, sample, cfg: InferenceConfig) -> InferenceResult:
    return _run_block(state, [sample], cfg)[0]


def generate_phase1(state, sample, cfg: InferenceConfig):
    """Decode phase-1 text.  Returns ``(tokens, trace, triggered)`` where
    ``trace`` covers ``[X_v; question; tokens]``."""
    V = toyvlm.encode_image(state, sample.input_features)[None]
    rows = [_Row([list(sample.question_tokens)], [], [], [], [])]
    _decode_segment(state, V, rows, [0], cfg, [_rng_for(cfg, sample.id)], cfg.max_phase1_tokens)
    toks = list(rows[0].generated)
    with no_grad():
        trace = toyvlm.forward(state, V, [np.array([sample.question_tokens]), np.array([toks])])
    return toks, trace, bool(toks and toks[-1] == AUX and cfg.max_triggers > 0)


def is_correct(result: InferenceResult, sample) -> bool:
    return list(result.answer) == list(sample.answer_tokens)


def accuracy(state, samples, cfg: InferenceConfig) -> float:
    res = run_inference_batch(state, samples, cfg)
    return float(np.mean([is_correct(r, s) for r, s in zip(res, samples)])) if res else 0.0


def capture_latents(state, samples, cfg: InferenceConfig):
    """Fused auxiliary blocks of every triggering sample.  Returns
    ``(latents, n_skipped)``."""
    if cfg.aux_mode != "normal":
        raise ContractError("latents are captured in normal mode only")
    res = run_inference_batch(state, samples, cfg)
    lat = [r.aux_tokens for r in res if r.triggered and r.aux_blocks]
    return lat, len(res) - len(lat)


def result_record(result: InferenceResult, sample) -> dict:
    return {
        "id": int(result.id),
        "triggered": bool(result.triggered),
        "answer": [int(t) for t in result.answer],
        "correct": bool(is_correct(result, sample)),
        "latent_len": int(result.latent_len),
    }


def write_results(results, samples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r, s in zip(results, samples):
            fh.write(json.dumps(result_record(r, s), separators=(",", ":")) + "\n")
