"""Toy vision-language model with a detransformer branch.

Frozen linear vision encoder and projector, a small pre-norm causal
transformer with learned absolute positions, and a two-layer bidirectional
"detransformer" that maps the full-sequence hidden states at the input of
layer ``l`` back to one visual-edit token per visual position.

All arrays carry a leading batch axis: visual features are ``(B, N_v, d_v)``
and token ids ``(B, n)``.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ContractError, DimensionError, SequenceLengthError
from .numerics import Param, SeededRng, Tensor, no_grad
from .numerics import autograd as ag


@dataclass
class ModelConfig:
    d_model: int = 64
    d_vis: int = 64
    raw_dim: int = 48
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    n_vis_tokens: int = 64
    hidden_layer_index: int = 0  # 0 -> round(0.71 * n_layers)
    detrans_layers: int = 2
    alpha: float = 1.0
    max_seq_len: int = 256
    ffn_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.hidden_layer_index == 0:
            self.hidden_layer_index = max(1, int(round(0.71 * self.n_layers)))
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 1 <= self.hidden_layer_index <= self.n_layers:
            raise ValueError("hidden_layer_index must lie in [1, n_layers]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


_LLM_KEYS = ("ln1_g", "ln1_b", "wqkv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")
_DET_KEYS = ("wqkv", "wo", "ln_g", "ln_b", "w1", "b1", "w2", "b2")


class ModelState:
    """All parameters, grouped as

    ``vision``/``projector`` (always frozen), ``embed`` (token and position
    tables), ``llm`` (blocks, final norm, LM head) and ``detrans``.
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        self.markers: list[str] = []
        self._trainer = None

    # -- construction ---------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig) -> "ModelState":
        cfg = config
        rng = SeededRng(cfg.seed).child("init")
        d, dv, ff = cfg.d_model, cfg.d_vis, cfg.ffn_mult * cfg.d_model
        out_scale = 1.0 / np.sqrt(2 * cfg.n_layers)
        P = {}

        def add(name, arr, frozen=False):
            P[name] = Param(arr, name=name, frozen=frozen)

        def normal(shape, std):
            return rng.standard_normal(shape) * std

        add("vision.w", normal((cfg.raw_dim, dv), 1 / np.sqrt(dv)), frozen=True)
        add("projector.w", normal((dv, d), 1 / np.sqrt(d)), frozen=True)
        add("embed.tok", normal((cfg.vocab_size, d), 0.5))
        add("embed.pos", normal((cfg.max_seq_len, d), 0.1))
        add("embed.grid", normal((cfg.n_vis_tokens, d), 0.1))
        add("embed.block", normal((1, d), 0.1))
        for i in range(cfg.n_layers):
            p = f"llm.{i}."
            add(p + "ln1_g", np.ones(d))
            add(p + "ln1_b", np.zeros(d))
            add(p + "wqkv", normal((d, 3 * d), 1 / np.sqrt(d)))
            add(p + "wo", normal((d, d), out_scale / np.sqrt(d)))
            add(p + "ln2_g", np.ones(d))
            add(p + "ln2_b", np.zeros(d))
            add(p + "w1", normal((d, ff), 1 / np.sqrt(d)))
            add(p + "b1", np.zeros(ff))
            add(p + "w2", normal((ff, d), out_scale / np.sqrt(ff)))
            add(p + "b2", np.zeros(d))
        add("llm.lnf_g", np.ones(d))
        add("llm.lnf_b", np.zeros(d))
        add("llm.head_w", normal((d, cfg.vocab_size), 1 / np.sqrt(d)))
        add("llm.head_b", np.zeros(cfg.vocab_size))
        add("detrans.ln0_g", np.ones(d))
        add("detrans.ln0_b", np.zeros(d))
        for m in range(cfg.detrans_layers):
            p = f"detrans.{m}."
            add(p + "wqkv", normal((d, 3 * d), 1 / np.sqrt(d)))
            add(p + "wo", normal((d, d), 0.5 / np.sqrt(d)))
            add(p + "ln_g", np.ones(d))
            add(p + "ln_b", np.zeros(d))
            add(p + "w1", normal((d, ff), 1 / np.sqrt(d)))
            add(p + "b1", np.zeros(ff))
            add(p + "w2", normal((ff, d), 0.5 / np.sqrt(ff)))
            add(p + "b2", np.zeros(d))
        add("detrans.head_w", normal((d, dv), 0.1 / np.sqrt(d)))
        add("detrans.head_b", np.zeros(dv))
        return cls(cfg, P)

    def copy(self) -> "ModelState":
        P = {}
        for n, p in self.params.items():
            q = Param(p.data.copy(), name=n, frozen=p.frozen)
            q.trainable = p.trainable
            P[n] = q
        out = ModelState(ModelConfig(**asdict(self.config)), P)
        out.markers = list(self.markers)
        return out

    # -- parameter groups -----------------------------------------------------

    def named_params(self):
        return self.params.items()

    def group(self, name: str) -> list[Param]:
        return [p for n, p in self.params.items() if n.split(".", 1)[0] == name]

    def set_trainable(self, *groups: str) -> None:
        """Enable exactly the named groups; frozen tensors stay frozen."""
        for n, p in self.params.items():
            p.trainable = n.split(".", 1)[0] in groups

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()

    def __getitem__(self, name):
        return self.params[name]


# -- building blocks ----------------------------------------------------------

def encode_image(state: ModelState, img_features) -> np.ndarray:
    """Frozen linear vision encoder, raw features -> ``d_v``.  Accepts a single
    ``(N_v, raw)`` grid or a batch ``(B, N_v, raw)``."""
    x = np.asarray(img_features, dtype=np.float64)
    cfg = state.config
    if x.shape[-1] != cfg.raw_dim or x.shape[-2] != cfg.n_vis_tokens:
        raise DimensionError(
            f"expected (..., {cfg.n_vis_tokens}, {cfg.raw_dim}) features, got {x.shape}"
        )
    return x @ state["vision.w"].data


def _attention(x: Tensor, wqkv: Param, wo: Param, n_heads: int, mask) -> Tensor:
    B, L, d = x.shape
    dh = d // n_heads
    qkv = (x @ wqkv).reshape(B, L, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    att = ag.masked_softmax(scores, mask)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    return out @ wo


def _ffn(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return ag.gelu(x @ w1 + b1) @ w2 + b2


_CAUSAL = {}


def _causal_mask(L: int) -> np.ndarray:
    m = _CAUSAL.get(L)
    if m is None:
        m = _CAUSAL[L] = np.tril(np.ones((L, L), dtype=bool))
    return m


@dataclass
class ForwardTrace:
    logits: Tensor | None
    hidden_at_l: Tensor
    segments: list  # (kind, start, length) per input piece
    fingerprint: str | None = None

    @property
    def length(self) -> int:
        return self.hidden_at_l.shape[1]


def embed_sequence(state: ModelState, vis_tokens, pieces, *, pool_ratio: int = 1):
    """Token embeddings for ``[X_v; piece_1; piece_2; ...]`` plus positions.

    ``vis_tokens`` is ``V`` (encoded, ``(B, N_v, d_v)``).  Each piece is either
    an integer id array ``(B, n)`` or a visual block ``(B, n, d_v)`` (array or
    Tensor) that is projected into the LLM width, like ``V`` itself.  Visual
    rows also get a grid-cell embedding; blocks pooled with ``pool_ratio``
    get the window means of it.
    """
    cfg = state.config
    proj = state["projector.w"]
    V = vis_tokens if isinstance(vis_tokens, Tensor) else Tensor(np.asarray(vis_tokens, dtype=np.float64))
    if V.ndim != 3 or V.shape[1] != cfg.n_vis_tokens or V.shape[2] != cfg.d_vis:
        raise DimensionError(f"visual tokens must be (B, {cfg.n_vis_tokens}, {cfg.d_vis}), got {V.shape}")
    B = V.shape[0]
    grid = state["embed.grid"]
    parts = [V @ proj + grid]
    segments = [("vis", 0, cfg.n_vis_tokens)]
    pos = cfg.n_vis_tokens
    for piece in pieces:
        if isinstance(piece, Tensor) or (np.asarray(piece).ndim == 3):
            blk = piece if isinstance(piece, Tensor) else Tensor(np.asarray(piece, dtype=np.float64))
            if blk.ndim != 3 or blk.shape[0] != B or blk.shape[2] != cfg.d_vis:
                raise DimensionError(f"aux block must be (B, n, {cfg.d_vis}), got {blk.shape}")
            if blk.shape[1] == cfg.n_vis_tokens and pool_ratio == 1:
                g = grid
            else:
                if blk.shape[1] != -(-cfg.n_vis_tokens // pool_ratio):
                    raise DimensionError(
                        f"aux block of {blk.shape[1]} rows does not match pooling ratio {pool_ratio}"
                    )
                g = _pool_param(grid, pool_ratio)
            parts.append(blk @ proj + g + state["embed.block"])
            segments.append(("aux", pos, blk.shape[1]))
            pos += blk.shape[1]
        else:
            ids = np.asarray(piece, dtype=np.int64)
            if ids.ndim != 2 or ids.shape[0] != B:
                raise DimensionError(f"token ids must be (B, n), got {ids.shape}")
            if ids.shape[1] == 0:
                continue
            if ids.min() < 0 or ids.max() >= cfg.vocab_size:
                raise DimensionError("token id out of vocabulary range")
            parts.append(ag.embed(state["embed.tok"], ids))
            segments.append(("tok", pos, ids.shape[1]))
            pos += ids.shape[1]
    if pos > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {pos} exceeds max_seq_len {cfg.max_seq_len}")
    x = ag.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    x = x + state["embed.pos"][:pos]
    return x, segments


def _pool_param(grid: Param, ratio: int) -> Tensor:
    n = grid.shape[0]
    starts = np.arange(0, n, ratio)
    counts = np.diff(np.append(starts, n))
    W = np.zeros((len(starts), n))
    for i, (a, c) in enumerate(zip(starts, counts)):
        W[i, a:a + c] = 1.0 / c
    return Tensor(W) @ grid


def forward(state: ModelState, vis_tokens, pieces=(), *, upto_layer: int | None = None,
            pool_ratio: int = 1) -> ForwardTrace:
    """Run the causal LLM over ``[X_v; pieces...]``.

    ``hidden_at_l`` is the residual stream at the input of block
    ``hidden_layer_index`` (1-based).  With ``upto_layer`` set, computation
    stops there and ``logits`` is None.
    """
    cfg = state.config
    x, segments = embed_sequence(state, vis_tokens, pieces, pool_ratio=pool_ratio)
    L = x.shape[1]
    mask = _causal_mask(L)
    ell = cfg.hidden_layer_index
    hidden = None
    for i in range(cfg.n_layers):
        if i == ell - 1:
            hidden = x
            if upto_layer is not None:
                return ForwardTrace(None, hidden, segments)
        p = f"llm.{i}."
        h = ag.layer_norm(x, state[p + "ln1_g"], state[p + "ln1_b"])
        x = x + _attention(h, state[p + "wqkv"], state[p + "wo"], cfg.n_heads, mask)
        h = ag.layer_norm(x, state[p + "ln2_g"], state[p + "ln2_b"])
        x = x + _ffn(h, state[p + "w1"], state[p + "b1"], state[p + "w2"], state[p + "b2"])
    x = ag.layer_norm(x, state["llm.lnf_g"], state["llm.lnf_b"])
    logits = x @ state["llm.head_w"] + state["llm.head_b"]
    return ForwardTrace(logits, hidden, segments)


def detransform(state: ModelState, H: Tensor, vis_positions=None) -> Tensor:
    """Map hidden states ``H`` (B, L, d) to visual-edit tokens (B, N_v, d_v).

    ``Z0 = LN(H)``; each layer applies unmasked self-attention with a residual,
    then a feed-forward network on a re-normalised stream with a residual.
    The rows at ``vis_positions`` are then mapped through the output head.
    """
    cfg = state.config
    if not isinstance(H, Tensor):
        H = Tensor(np.asarray(H, dtype=np.float64))
    if H.ndim == 2:
        H = H.reshape(1, *H.shape)
    B, L, d = H.shape
    if vis_positions is None:
        vis_positions = np.arange(cfg.n_vis_tokens)
    vis_positions = np.asarray(vis_positions, dtype=np.int64)
    if vis_positions.size != cfg.n_vis_tokens or vis_positions.min() < 0 or vis_positions.max() >= L:
        raise ContractError(f"need {cfg.n_vis_tokens} visual positions inside [0, {L})")
    z = ag.layer_norm(H, state["detrans.ln0_g"], state["detrans.ln0_b"])
    for m in range(cfg.detrans_layers):
        p = f"detrans.{m}."
        z = z + _attention(z, state[p + "wqkv"], state[p + "wo"], cfg.n_heads, None)
        h = ag.layer_norm(z, state[p + "ln_g"], state[p + "ln_b"])
        z = z + _ffn(h, state[p + "w1"], state[p + "b1"], state[p + "w2"], state[p + "b2"])
    rows = z[:, vis_positions]
    return rows @ state["detrans.head_w"] + state["detrans.head_b"]


def fuse_gated(V, A0, alpha: float):
    """Gated residual fusion ``V + alpha * A0``; works on arrays or Tensors."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if tuple(np.shape(V.data if isinstance(V, Tensor) else V)) != tuple(
        np.shape(A0.data if isinstance(A0, Tensor) else A0)
    ):
        raise DimensionError("V and A0 shapes differ")
    if isinstance(V, Tensor) or isinstance(A0, Tensor):
        return ag._lift(V) + ag._lift(A0) * alpha
    return np.asarray(V) + alpha * np.asarray(A0)


def backward(state: ModelState, trace: ForwardTrace, grad_logits=None, grad_hidden=None) -> None:
    """Accumulate parameter gradients for upstream gradients on the trace
    outputs.  Frozen tensors are never touched."""
    terms = []
    if grad_logits is not None:
        if trace.logits is None or np.shape(grad_logits) != trace.logits.shape:
            raise ContractError("grad_logits does not match the trace")
        terms.append((trace.logits * np.asarray(grad_logits)).sum())
    if grad_hidden is not None:
        if np.shape(grad_hidden) != trace.hidden_at_l.shape:
            raise ContractError("grad_hidden does not match the trace")
        terms.append((trace.hidden_at_l * np.asarray(grad_hidden)).sum())
    if not terms:
        return
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    total.backward()


# -- checkpoint format --------------------------------------------------------
#
# magic b"TVLM" | u32 version | u32 n_config | n_config x (u16 len, name, u8 kind, 8-byte value)
# | u32 n_tensors | per tensor: u32 name_len, name, u32 rows, u32 cols, rows*cols f64 LE
# | u32 n_markers | per marker: u32 len, utf-8 bytes

MAGIC = b"TVLM"
CKPT_VERSION = 1


def save_checkpoint(state: ModelState, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg = asdict(state.config)
    buf.write(struct.pack("<I", len(cfg)))
    for k, v in cfg.items():
        kb = k.encode()
        buf.write(struct.pack("<H", len(kb)) + kb)
        if isinstance(v, float):
            buf.write(struct.pack("<Bd", 1, v))
        else:
            buf.write(struct.pack("<Bq", 0, int(v)))
    buf.write(struct.pack("<I", len(state.params)))
    for name in sorted(state.params):
        a = state.params[name].data
        a2 = a.reshape(1, -1) if a.ndim == 1 else a
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<II", *a2.shape))
        buf.write(np.ascontiguousarray(a2, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(state.markers)))
    for m in state.markers:
        mb = m.encode()
        buf.write(struct.pack("<I", len(mb)) + mb)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    off = 0

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, view, off)
        off += struct.calcsize(fmt)
        return vals

    if bytes(view[:4]) != MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    off = 4
    (version,) = take("<I")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n_cfg,) = take("<I")
    cfg = {}
    for _ in range(n_cfg):
        (klen,) = take("<H")
        key = bytes(view[off:off + klen]).decode()
        off += klen
        (kind,) = take("<B")
        cfg[key] = take("<d")[0] if kind == 1 else take("<q")[0]
    known = {f.name for f in fields(ModelConfig)}
    state = ModelState.init(ModelConfig(**{k: v for k, v in cfg.items() if k in known}))
    (n_t,) = take("<I")
    for _ in range(n_t):
        (nlen,) = take("<I")
        name = bytes(view[off:off + nlen]).decode()
        off += nlen
        rows, cols = take("<II")
        arr = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=off).astype(np.float64)
        off += 8 * rows * cols
        p = state.params[name]
        p.data[...] = arr.reshape(p.data.shape)
    (n_m,) = take("<I")
    for _ in range(n_m):
        (mlen,) = take("<I")
        state.markers.append(bytes(view[off:off + mlen]).decode())
        off += mlen
    return state


def checkpoint_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


__all__ = [
    "ForwardTrace",
    "ModelConfig",
    "ModelState",
    "backward",
    "checkpoint_hash",
    "detransform",
    "embed_sequence",
    "encode_image",
    "forward",
    "fuse_gated",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
]
