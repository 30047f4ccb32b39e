from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Parameter, Tensor


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over ``params``.

    ``fn`` must rebuild the graph on every call and return a scalar.  With
    ``max_entries`` only that many randomly chosen entries per parameter are
    probed.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = fn()
    if loss.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise FloatingPointError("grad_check: loss is not finite")
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"grad_check: loss not finite when perturbing {p.name!r}")
            num = (up - down) / (2 * eps)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    for p in params:
        p.zero_grad()
    return worst
