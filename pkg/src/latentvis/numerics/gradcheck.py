from __future__ import annotations

import numpy as np

from .autograd import Param


def _named_params(state):
    if hasattr(state, "named_params"):
        return list(state.named_params())
    if isinstance(state, dict):
        return list(state.items())
    return [(p.name, p) for p in state]


def finite_diff_check(loss_fn, state, n_probes: int = 16, h: float = 1e-5,
                      rng=None, floor: float = 1e-6, report: bool = False):
    """Compare analytic gradients with central differences.

    ``loss_fn(state)`` must return a scalar :class:`Tensor` and be
    deterministic.  ``n_probes`` coordinates are drawn uniformly from all
    trainable parameter entries; for each, the analytic derivative ``a`` is
    compared with ``(f(x+h) - f(x-h)) / 2h`` as
    ``|a - n| / max(|a|, |n|, floor)``.  Returns the worst ratio (and the
    per-probe records when ``report`` is set).
    """
    params = [(n, p) for n, p in _named_params(state) if isinstance(p, Param) and p.trainable]
    if not params:
        raise ValueError("no trainable parameters to probe")
    for _, p in params:
        p.zero_grad()
    loss_fn(state).backward()
    analytic = {n: p.grad.copy() for n, p in params}

    rng = np.random.default_rng(0) if rng is None else rng
    sizes = np.array([p.data.size for _, p in params], dtype=np.int64)
    flat = rng.choice(int(sizes.sum()), size=min(n_probes, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    records = []
    for f in flat:
        i = int(np.searchsorted(bounds, f, side="right"))
        name, p = params[i]
        j = int(f - (bounds[i - 1] if i else 0))
        idx = np.unravel_index(j, p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + h
        fp = float(loss_fn(state).data)
        p.data[idx] = orig - h
        fm = float(loss_fn(state).data)
        p.data[idx] = orig
        num = (fp - fm) / (2 * h)
        a = float(analytic[name][idx])
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
        records.append((name, idx, a, num, err))
    for _, p in params:
        p.zero_grad()
    return (worst, records) if report else worst
