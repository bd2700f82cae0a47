"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


def relative_error(analytic: float, numeric: float, floor: float = 0.0) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    if denom == 0.0:
        return 0.0
    return abs(analytic - numeric) / denom


def check_gradients(fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-6,
                    n_coords: int | None = 20, rng: np.random.Generator | None = None,
                    floor: float = 0.0, return_details: bool = False, reference=None):
    """Worst relative error between backprop and central differences.

    ``fn`` rebuilds the scalar loss from the current parameter values. Frozen
    parameters are skipped. Coordinates are sampled uniformly across all
    trainable entries (``n_coords=None`` checks every one). ``floor`` bounds
    the denominator from below for near-zero gradients.

    ``reference=(fn64, params64)`` takes the differences on a second copy of
    the model (typically float64 at the same values) instead, which is how a
    32-bit backprop is checked without float32 round-off swamping the
    difference quotient.
    """
    rng = rng or np.random.default_rng(0)
    live = {k: p for k, p in params.items() if p.trainable}
    with Tape() as tape:
        loss = fn()
    grads = tape.backprop(loss)

    coords = [(k, i) for k in sorted(live) for i in range(live[k].size)]
    if n_coords is not None and n_coords < len(coords):
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    num_fn, num_params = (fn, live) if reference is None else reference
    worst = 0.0
    details = []
    for name, i in coords:
        p = num_params[name]
        if not p.data.flags.c_contiguous or not p.data.flags.writeable:
            p.data = np.array(p.data, order="C")
        flat = p.data.reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        up = float(num_fn().data)
        flat[i] = old - eps
        down = float(num_fn().data)
        flat[i] = old
        numeric = (up - down) / (2.0 * eps)
        analytic = float(grads[name].reshape(-1)[i]) if name in grads else 0.0
        err = relative_error(analytic, numeric, floor)
        details.append((name, i, analytic, numeric, err))
        worst = max(worst, err)
    if return_details:
        return worst, details
    return worst
