"""Diagnostics on auxiliary latents: information gain, length sweeps, padding.

Information gain at position ``t`` is the norm of the part of token ``t+1``
that the span of tokens ``1..t`` cannot reconstruct.  It is measured here on
the fused auxiliary tokens (``V + alpha * A0`` rows, before pooling), which
is the space the language model actually reads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import inference, toyvlm
from .errors import ContractError, DimensionError
from .numerics import SeededRng, projection_residual, truncated_svd_project

SVD_THRESHOLD = 500
SVD_MAX_K = 256


def information_gain_sequence(latents, use_svd_threshold: int = SVD_THRESHOLD) -> np.ndarray:
    """``IG_t`` for ``t = 1..T-1``: residual of row ``t`` (0-based) against
    rows ``0..t-1``.  Prefixes longer than ``use_svd_threshold`` use the
    top-``min(t, 256)`` singular subspace instead of the exact projection."""
    L = np.asarray(latents, dtype=np.float64)
    if L.ndim != 2:
        raise DimensionError(f"latents must be T x d, got shape {L.shape}")
    T = L.shape[0]
    if T < 2:
        raise ContractError("need at least two latent tokens")
    out = np.empty(T - 1)
    for t in range(1, T):
        if t <= use_svd_threshold:
            out[t - 1] = projection_residual(L[:t], L[t])
        else:
            out[t - 1] = truncated_svd_project(L[:t], L[t], min(t, SVD_MAX_K))
    return out


@dataclass
class IGCurve:
    positions: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    n_sequences: int

    def at(self, t: int) -> float:
        hit = np.nonzero(self.positions == t)[0]
        if not hit.size:
            raise ContractError(f"position {t} not on the curve")
        return float(self.median[hit[0]])


def ig_curve(latent_sequences, max_pos: int | None = None, *,
             use_svd_threshold: int = SVD_THRESHOLD) -> IGCurve:
    """Per-position median and quartiles; position ``t`` pools only the
    sequences long enough to have an ``IG_t``."""
    seqs = list(latent_sequences)
    if not seqs:
        raise ContractError("ig_curve needs at least one sequence")
    igs = [information_gain_sequence(s, use_svd_threshold) for s in seqs]
    longest = max(len(g) for g in igs)
    top = longest if max_pos is None else min(max_pos, longest)
    pos, med, lo, hi = [], [], [], []
    for t in range(1, top + 1):
        vals = np.array([g[t - 1] for g in igs if len(g) >= t])
        pos.append(t)
        q = np.percentile(vals, [25, 50, 75])
        lo.append(q[0])
        med.append(q[1])
        hi.append(q[2])
    return IGCurve(np.array(pos), np.array(med), np.array(lo), np.array(hi), len(seqs))


def ar_baseline_map(d: int, rho: float = 0.9, seed: int = 0) -> np.ndarray:
    """``rho * Q`` with ``Q`` a seeded random orthogonal matrix, so the map
    is contractive with spectral norm ``rho``."""
    rng = SeededRng(seed).child("ar-baseline")
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    return rho * Q


def ar_baseline_latents(state, sample, T: int, *, rho: float = 0.9, noise: float = 0.0,
                        seed: int = 0, transition=None) -> np.ndarray:
    """Chain-propagated latents: ``z_0`` is the mean encoded visual token and
    ``z_t = M z_{t-1} + noise * eps_t``.  Stands in for autoregressive latent
    generation when contrasting information gain."""
    if T < 1:
        raise ContractError("T must be >= 1")
    V = toyvlm.encode_image(state, np.asarray(sample.input_features))
    d = V.shape[1]
    M = ar_baseline_map(d, rho, seed) if transition is None else np.asarray(transition)
    rng = SeededRng(seed).child(f"ar-noise-{sample.id}")
    out = np.empty((T, d))
    z = V.mean(axis=0)
    out[0] = z
    for t in range(1, T):
        z = M @ z
        if noise:
            z = z + noise * rng.standard_normal(d)
        out[t] = z
    return out


@dataclass
class SweepResult:
    latent_lengths: list
    accuracy_normal: list
    accuracy_padded: list
    n_samples: int
    pooling_ratios: list
    requested_lengths: list


def latent_length_sweep(state, dataset, lengths, cfg: inference.InferenceConfig | None = None) -> SweepResult:
    """Accuracy in normal and placeholder modes at each achievable latent
    length (the nearest pooled length to each request)."""
    samples = list(dataset)
    if not samples:
        raise ContractError("empty dataset")
    cfg = cfg or inference.InferenceConfig()
    nv = state.config.n_vis_tokens
    base = asdict(cfg)
    got, acc_n, acc_p, ratios = [], [], [], []
    for L in lengths:
        r = inference.ratio_for_length(nv, int(L))
        n_cfg = inference.InferenceConfig(**{**base, "pooling_ratio": r, "aux_mode": "normal"})
        p_cfg = inference.InferenceConfig(**{**base, "pooling_ratio": r, "aux_mode": "placeholder"})
        ratios.append(r)
        got.append(inference.pooled_length(nv, r))
        acc_n.append(inference.accuracy(state, samples, n_cfg))
        acc_p.append(inference.accuracy(state, samples, p_cfg))
    return SweepResult(got, acc_n, acc_p, len(samples), ratios, [int(x) for x in lengths])


def padding_gap(sweep: SweepResult) -> np.ndarray:
    return np.asarray(sweep.accuracy_normal, dtype=np.float64) - \
        np.asarray(sweep.accuracy_padded, dtype=np.float64)


# -- output -------------------------------------------------------------------

def _sidecar(path, meta: dict) -> None:
    with open(str(path) + ".json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_ig_curve(curve: IGCurve, path, meta: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["position", "median", "q25", "q75"])
        for row in zip(curve.positions, curve.median, curve.q25, curve.q75):
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
    _sidecar(path, {"n_sequences": curve.n_sequences,
                    "space": "fused auxiliary tokens, pre-pooling", **(meta or {})})


def write_sweep(sweep: SweepResult, path, meta: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["length", "acc_normal", "acc_padded"])
        for row in zip(sweep.latent_lengths, sweep.accuracy_normal, sweep.accuracy_padded):
            w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2]))])
    _sidecar(path, {"n_samples": sweep.n_samples, "pooling_ratios": sweep.pooling_ratios,
                    "requested_lengths": sweep.requested_lengths, **(meta or {})})
