"""Dense kernels on 2-D float64 arrays.

Arrays are plain ``numpy.ndarray`` objects in row-major (C) order; there is no
wrapper type.  Every public function validates shapes and raises
:class:`~latentvis.errors.DimensionError` on mismatch.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConvergenceError, DimensionError, NumericError

__all__ = [
    "as_matrix",
    "matmul",
    "layer_norm",
    "softmax_rows",
    "projection_residual",
    "top_right_singular_vectors",
    "truncated_svd_project",
]


def as_matrix(x, name: str = "array") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 2 and 1 in v.shape:
        v = v.ravel()
    if v.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {v.shape}")
    return v


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` with an explicit inner-dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul result")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """Normalise each row to zero mean and unit variance, then apply a
    per-column affine map."""
    x = as_matrix(x, "x")
    gain = _as_vector(gain, "gain")
    bias = _as_vector(bias, "bias")
    if gain.size != x.shape[1] or bias.size != x.shape[1]:
        raise DimensionError(
            f"gain/bias length {gain.size}/{bias.size} != x.cols {x.shape[1]}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def softmax_rows(x) -> np.ndarray:
    x = as_matrix(x, "x")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- orthogonal projection residuals ----------------------------------------

_REFINE_PASSES = 2
_RIDGE_PASSES = 3


def _gram_solver(E: np.ndarray):
    """Return ``solve(b)`` for the Gram system ``E E^T c = b``.

    Falls back to a ridge-regularised system when the Gram matrix is
    singular, with ``lam = 1e-10 * trace(G) / t``.  Returns the solver and a
    flag telling whether the ridge path is in use.
    """
    t, d = E.shape
    G = E @ E.T
    scale = np.trace(G) / t
    if scale == 0.0:
        return None, True
    singular = t > d
    if not singular:
        try:
            L = np.linalg.cholesky(G)
            singular = np.min(np.diag(L)) ** 2 < 1e-12 * scale
        except np.linalg.LinAlgError:
            singular = True
    if singular:
        L = np.linalg.cholesky(G + 1e-10 * scale * np.eye(t))

    def solve(b):
        y = np.linalg.solve(L, b)
        return np.linalg.solve(L.T, y)

    return solve, singular


def projection_residual(E, e_new) -> float:
    """Norm of the part of ``e_new`` orthogonal to the row space of ``E``.

    Computes ``|| e - E^T (E E^T)^{-1} E e ||``.  The residual is re-projected
    a few times, which removes round-off left in the row space; on the
    singular (ridge) path the repetition is iterated Tikhonov and converges to
    the exact orthogonal projection.
    """
    e = _as_vector(e_new, "e_new")
    E = np.asarray(E, dtype=np.float64)
    if E.size == 0:
        return float(np.linalg.norm(e))
    E = as_matrix(E, "E")
    if E.shape[1] != e.size:
        raise DimensionError(f"E has {E.shape[1]} columns but e_new has {e.size}")
    solve, singular = _gram_solver(E)
    if solve is None:  # E is all zeros
        return float(np.linalg.norm(e))
    r = e.copy()
    for _ in range(_RIDGE_PASSES if singular else _REFINE_PASSES):
        r = r - E.T @ solve(E @ r)
    return float(np.linalg.norm(r))


def top_right_singular_vectors(
    E,
    k: int,
    *,
    max_iter: int = 200,
    tol: float = 1e-10,
    seed: int = 0,
):
    """Top-``k`` singular values and right singular vectors of ``E``.

    Block power (subspace) iteration on ``E^T E`` with QR re-orthonormalisation
    and a Rayleigh-Ritz rotation each sweep.  Stops when no singular value
    moves by more than ``tol * max(1, s_max)``.  Working through ``E^T E``
    loses half the digits, so singular values below about
    ``64 * sqrt(max(t, d) * eps) * s_max`` count as zero: they are left out
    of the convergence test and dropped from the result, and fewer than ``k``
    columns may come back for rank-deficient input.

    Returns ``(s, V)`` with ``V`` of shape ``(d, k')``.
    """
    E = as_matrix(E, "E")
    t, d = E.shape
    k = int(max(1, min(k, t, d)))
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    prev = None
    delta = np.inf
    null_floor = np.sqrt(max(t, d) * np.finfo(np.float64).eps) * 64
    for it in range(1, max_iter + 1):
        Q, _ = np.linalg.qr(E.T @ (E @ Q))
        B = E @ Q
        w, U = np.linalg.eigh(B.T @ B)
        order = np.argsort(w)[::-1]
        Q = Q @ U[:, order]
        s = np.sqrt(np.clip(w[order], 0.0, None))
        # null directions hold square roots of round-off and never settle,
        # so only the numerically nonzero values are tested
        keep = s > null_floor * s[0]
        if prev is not None:
            delta = float(np.max(np.abs(s - prev)[keep | (prev > null_floor * prev[0])]))
            if delta < tol * max(1.0, s[0]):
                return s[keep], Q[:, keep]
        prev = s
    raise ConvergenceError(
        f"subspace iteration did not converge in {max_iter} sweeps "
        f"(k={k}, shape={E.shape}, last singular-value change {delta:.3e})",
        iterations=max_iter,
        last_delta=delta,
    )


def truncated_svd_project(E, e_new, k: int, **kwargs) -> float:
    """Residual norm of ``e_new`` against the span of the top-``k`` right
    singular vectors of ``E``."""
    e = _as_vector(e_new, "e_new")
    E = np.asarray(E, dtype=np.float64)
    if E.size == 0:
        return float(np.linalg.norm(e))
    E = as_matrix(E, "E")
    if E.shape[1] != e.size:
        raise DimensionError(f"E has {E.shape[1]} columns but e_new has {e.size}")
    if not np.any(E):
        return float(np.linalg.norm(e))
    _, V = top_right_singular_vectors(E, k, **kwargs)
    r = e.copy()
    for _ in range(_REFINE_PASSES):
        r = r - V @ (V.T @ r)
    return float(np.linalg.norm(r))
