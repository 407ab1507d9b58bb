"""Synthetic "grid needle" task.

Every cell of a ``g x g`` grid holds one of ``n_glyphs`` glyphs.  A cell's raw
feature row is the glyph's codebook vector plus a small per-cell texture.
The *input* image is degraded by a shift shared by all cells of that image:
a random mixture of codebook vectors scaled by ``sigma``.  With a large
``sigma`` the nearest-codebook reading of any single cell is close to chance,
yet the shift can be estimated from the grid as a whole, so the answer is
still latent in the input.  The *auxiliary* image equals the input except
that the query cell and its 4-neighbourhood are restored (shift removed),
the toy analogue of a zoomed crop.  The query cell carries a fixed marker
vector (orthogonal to every glyph code) in both images, like a box drawn
around the region a question refers to; a second marker flags the four
neighbours, outlining the area the auxiliary image restores.

Samples are filtered for necessity: a sample is kept only when the query
cell is ambiguous (or wrong) under nearest-codebook decoding of the input and
unambiguous under decoding of the auxiliary image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import DatasetFormatError
from .numerics import SeededRng
from .vocab import Vocab

FORMAT_VERSION = 1


@dataclass
class GenParams:
    grid_size: int = 8
    n_glyphs: int = 8
    raw_dim: int = 48
    sigma: float = 3.0
    texture: float = 0.15
    necessity_margin: float = 0.05
    marker: float = 2.0
    region_marker: float = 1.0
    codebook_seed: int = 1234


@dataclass
class GridSample:
    id: int
    grid_size: int
    glyph_ids: np.ndarray
    query_cell: tuple
    input_features: np.ndarray
    aux_features: np.ndarray
    question_tokens: list
    phase1_tokens: list
    answer_tokens: list
    needs_aux: bool = True

    @property
    def n_vis(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def query_index(self) -> int:
        r, c = self.query_cell
        return r * self.grid_size + c

    @property
    def answer_glyph(self) -> int:
        r, c = self.query_cell
        return int(self.glyph_ids[r, c])


@dataclass
class DatasetHeader:
    version: int = FORMAT_VERSION
    seed: int = 0
    n_samples: int = 0
    grid_size: int = 8
    noise_level: float = 3.0
    necessity_margin: float = 0.05
    n_glyphs: int = 8
    raw_dim: int = 48
    texture: float = 0.15
    marker: float = 2.0
    region_marker: float = 1.0
    codebook_seed: int = 1234
    codebook_min_distance: float = 0.0
    kept_fraction: float = 1.0
    aux_unnecessary_fraction: float = 0.0

    def gen_params(self) -> GenParams:
        return GenParams(
            grid_size=self.grid_size,
            n_glyphs=self.n_glyphs,
            raw_dim=self.raw_dim,
            sigma=self.noise_level,
            texture=self.texture,
            marker=self.marker,
            region_marker=self.region_marker,
            necessity_margin=self.necessity_margin,
            codebook_seed=self.codebook_seed,
        )


def make_codebook(params: GenParams) -> np.ndarray:
    """Unit-norm random glyph vectors, deterministic in ``codebook_seed``."""
    rng = SeededRng(params.codebook_seed).child("codebook")
    C = rng.standard_normal((params.n_glyphs, params.raw_dim))
    return C / np.linalg.norm(C, axis=1, keepdims=True)


def make_markers(params: GenParams) -> np.ndarray:
    """Two orthonormal vectors, both orthogonal to the span of the codebook:
    row 0 marks the query cell, row 1 its neighbours.  Adding either to a row
    changes every glyph distance by the same amount, so decoding margins are
    unaffected."""
    C = make_codebook(params)
    v = SeededRng(params.codebook_seed).child("marker").standard_normal((params.raw_dim, 2))
    Q, _ = np.linalg.qr(np.concatenate([C.T, v], axis=1))
    M = Q[:, C.shape[0]:C.shape[0] + 2].T
    return M * np.sign(np.sum(M * v.T, axis=1, keepdims=True))


def make_marker(params: GenParams) -> np.ndarray:
    """The query-cell marker."""
    return make_markers(params)[0]


def codebook_min_distance(codebook: np.ndarray) -> float:
    d = np.linalg.norm(codebook[:, None, :] - codebook[None, :, :], axis=-1)
    return float(d[~np.eye(len(codebook), dtype=bool)].min())


def query_region(grid_size: int, r: int, c: int) -> list[int]:
    """Row indices of the query cell and its in-bounds 4-neighbours."""
    cells = [(r, c), (r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
    return sorted(i * grid_size + j for i, j in cells if 0 <= i < grid_size and 0 <= j < grid_size)


def gen_sample(rng: SeededRng, params: GenParams, codebook=None, *, sample_id=0,
               needs_aux: bool = True) -> GridSample:
    """Draw one sample.  ``needs_aux=False`` produces an undegraded image whose
    phase-1 text carries no trigger (the model may answer directly)."""
    if codebook is None:
        codebook = make_codebook(params)
    g, K = params.grid_size, params.n_glyphs
    glyphs = rng.integers(0, K, size=(g, g))
    r, c = (int(v) for v in rng.integers(0, g, size=2))
    tex = rng.standard_normal((g * g, params.raw_dim)) * (params.texture / np.sqrt(params.raw_dim))
    clean = codebook[glyphs.ravel()] + tex
    markers = make_markers(params)
    region = query_region(g, r, c)
    q = r * g + c
    clean[q] += params.marker * markers[0]
    clean[[i for i in region if i != q]] += params.region_marker * markers[1]
    weights = rng.standard_normal(K) / np.sqrt(K)
    sigma = params.sigma if needs_aux else 0.0
    shift = sigma * (weights @ codebook)
    inp = clean + shift
    aux = inp.copy()
    aux[region] = clean[region]
    vocab = Vocab(g, K)
    return GridSample(
        id=int(sample_id),
        grid_size=g,
        glyph_ids=glyphs,
        query_cell=(r, c),
        input_features=inp,
        aux_features=aux,
        question_tokens=vocab.question(r, c),
        phase1_tokens=vocab.phase1(r, c, trigger=needs_aux),
        answer_tokens=[vocab.glyph(int(glyphs[r, c]))],
        needs_aux=needs_aux,
    )


def gen_pretrain_sample(rng: SeededRng, params: GenParams, codebook=None, *, sample_id=0,
                        uniform: bool = False, max_sigma: float = 1.0) -> GridSample:
    """Direct-answer sample for backbone pretraining: no trigger, the
    degradation strength drawn from ``[0, max_sigma]``.  ``uniform`` fills
    every cell with the answer glyph."""
    if codebook is None:
        codebook = make_codebook(params)
    s = gen_sample(rng, params, codebook, sample_id=sample_id, needs_aux=False)
    g = s.grid_size
    if uniform:
        glyph = s.answer_glyph
        delta = codebook[glyph] - codebook[s.glyph_ids.ravel()]
        s.glyph_ids = np.full((g, g), glyph)
        s.input_features = s.input_features + delta
    shift = rng.uniform(0.0, max_sigma) * ((rng.standard_normal(params.n_glyphs)
                                            / np.sqrt(params.n_glyphs)) @ codebook)
    s.input_features = s.input_features + shift
    s.aux_features = s.input_features.copy()
    return s


def nearest_codebook(rows: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    rows = np.atleast_2d(rows)
    d = ((rows[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
    return d.argmin(axis=1)


def decoding_margin(row: np.ndarray, true_glyph: int, codebook: np.ndarray) -> float:
    """Distance to the closest wrong glyph minus distance to the true glyph.

    Negative when nearest-codebook decoding is wrong."""
    d = np.linalg.norm(codebook - row, axis=1)
    wrong = np.delete(d, true_glyph)
    return float(wrong.min() - d[true_glyph])


def necessity_filter(sample: GridSample, params: GenParams, codebook=None) -> bool:
    """Keep iff the query cell is ambiguous without the auxiliary image and
    unambiguous with it."""
    if codebook is None:
        codebook = make_codebook(params)
    q = sample.query_index
    x_in = sample.input_features[q]
    x_aux = sample.aux_features[q]
    if np.array_equal(x_in, x_aux):
        return False  # nothing to restore: margin is infinite
    g = sample.answer_glyph
    m_in = decoding_margin(x_in, g, codebook)
    m_aux = decoding_margin(x_aux, g, codebook)
    return m_in < params.necessity_margin and m_aux > params.necessity_margin


def generate(n: int, params: GenParams, seed: int, *, filtered: bool = True,
             aux_unnecessary_fraction: float = 0.0, max_draws: int | None = None):
    """Generate ``n`` samples.  Returns ``(samples, header)``.

    Candidate ``j`` is drawn from its own substream, so the output depends only
    on ``(seed, params)``.  A fraction of the returned samples can be built
    aux-unnecessary (undegraded, no trigger); those bypass the filter.
    """
    codebook = make_codebook(params)
    root = SeededRng(seed)
    n_direct = int(round(n * aux_unnecessary_fraction))
    plan = root.child("plan").permutation(n)
    direct_slots = set(int(i) for i in plan[:n_direct])
    samples = []
    draws = kept = 0
    max_draws = max_draws or 50 * max(n, 1)
    j = 0
    while len(samples) < n:
        i = len(samples)
        if i in direct_slots:
            s = gen_sample(root.child(f"direct-{i}"), params, codebook, sample_id=i,
                           needs_aux=False)
            samples.append(s)
            continue
        if draws >= max_draws:
            raise RuntimeError(
                f"necessity filter kept only {kept} of {draws} draws; loosen the margin"
            )
        s = gen_sample(root.child(f"cand-{j}"), params, codebook, sample_id=i)
        j += 1
        draws += 1
        if not filtered or necessity_filter(s, params, codebook):
            kept += 1
            samples.append(s)
    header = DatasetHeader(
        seed=int(seed),
        n_samples=n,
        grid_size=params.grid_size,
        noise_level=params.sigma,
        necessity_margin=params.necessity_margin,
        n_glyphs=params.n_glyphs,
        raw_dim=params.raw_dim,
        texture=params.texture,
        marker=params.marker,
        region_marker=params.region_marker,
        codebook_seed=params.codebook_seed,
        codebook_min_distance=codebook_min_distance(codebook),
        kept_fraction=kept / draws if draws else 1.0,
        aux_unnecessary_fraction=aux_unnecessary_fraction,
    )
    return samples, header


# -- serialisation -----------------------------------------------------------

def _sample_to_json(s: GridSample) -> dict:
    return {
        "type": "sample",
        "id": s.id,
        "grid_size": s.grid_size,
        "glyph_ids": s.glyph_ids.tolist(),
        "query_cell": list(s.query_cell),
        "input_features": s.input_features.tolist(),
        "aux_features": s.aux_features.tolist(),
        "question_tokens": list(s.question_tokens),
        "phase1_tokens": list(s.phase1_tokens),
        "answer_tokens": list(s.answer_tokens),
        "needs_aux": bool(s.needs_aux),
    }


def _sample_from_json(d: dict) -> GridSample:
    return GridSample(
        id=int(d["id"]),
        grid_size=int(d["grid_size"]),
        glyph_ids=np.asarray(d["glyph_ids"], dtype=np.int64),
        query_cell=tuple(int(v) for v in d["query_cell"]),
        input_features=np.asarray(d["input_features"], dtype=np.float64),
        aux_features=np.asarray(d["aux_features"], dtype=np.float64),
        question_tokens=[int(t) for t in d["question_tokens"]],
        phase1_tokens=[int(t) for t in d["phase1_tokens"]],
        answer_tokens=[int(t) for t in d["answer_tokens"]],
        needs_aux=bool(d.get("needs_aux", True)),
    )


def _dumps(obj) -> str:
    # repr-based float formatting is the shortest string that round-trips
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_dataset(samples, path, header: DatasetHeader) -> None:
    header = DatasetHeader(**{**asdict(header), "n_samples": len(samples)})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps({"type": "header", **asdict(header)}) + "\n")
        for s in samples:
            fh.write(_dumps(_sample_to_json(s)) + "\n")


def load_dataset(path):
    """Read a dataset file.  Returns ``(samples, header)``."""
    known = {f.name for f in fields(DatasetHeader)}
    samples = []
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"malformed JSON ({exc.msg})", line=lineno) from None
            if lineno == 1:
                if obj.get("type") != "header":
                    raise DatasetFormatError("first line must be the header", line=1)
                if obj.get("version") != FORMAT_VERSION:
                    raise DatasetFormatError(
                        f"unsupported version {obj.get('version')!r} (expected {FORMAT_VERSION})",
                        line=1,
                    )
                header = DatasetHeader(**{k: v for k, v in obj.items() if k in known})
                continue
            try:
                samples.append(_sample_from_json(obj))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"bad sample record ({exc!r})", line=lineno) from None
    if header is None:
        raise DatasetFormatError("empty file: missing header", line=1)
    return samples, header
