"""Finite-difference gradient verification.

The oracle only ever evaluates forward passes, so it stays independent of
the backward implementations it checks. Checks run in float64 with
central differences; the error is measured relative to
max(|analytic|, |numeric|, 1), i.e. relative error floored at unit scale.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tape import Tape
from .tensor import Parameter, Tensor


def central_difference(f: Callable[[], float], bump: Callable[[float], None], eps: float) -> float:
    """d f / d theta via (f(theta+eps) - f(theta-eps)) / 2eps.

    `bump(delta)` must shift the coordinate by delta from its current value.
    """
    bump(+eps)
    f_plus = f()
    bump(-2 * eps)
    f_minus = f()
    bump(+eps)
    return (f_plus - f_minus) / (2.0 * eps)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def check_parameter_gradients(
    forward: Callable[[], Tensor],
    params: Sequence[Parameter],
    rng: np.random.Generator,
    coords_per_param: int = 3,
    eps: float = 1e-4,
    stability_screen: bool = True,
) -> float:
    """Max relative error between tape gradients and finite differences.

    `forward()` must rebuild the computation from current parameter values
    and return the scalar loss tensor.

    With `stability_screen`, each coordinate's quotient is recomputed at
    eps/4; coordinates where the two disagree are skipped because the FD
    oracle itself is invalid there (a ReLU kink inside the interval). A
    wrong backward produces a stable quotient and is still caught.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = forward()
    tape.backward(loss)
    analytic = {id(p): p.gradient.data.copy() for p in params}

    worst = 0.0
    for p in params:
        if not p.trainable:
            continue
        n = p.value.size
        k = min(coords_per_param, n)
        coords = rng.choice(n, size=k, replace=False)
        for c in coords:
            idx = np.unravel_index(int(c), p.value.shape)

            def bump(delta, p=p, idx=idx):
                arr = p.value.data.copy()
                arr[idx] += delta
                p.assign(arr)

            fd = central_difference(lambda: forward().item(), bump, eps)
            if stability_screen:
                fd_fine = central_difference(lambda: forward().item(), bump, eps / 4.0)
                if _rel_err(fd, fd_fine) > 1e-6:
                    continue
            worst = max(worst, _rel_err(float(analytic[id(p)][idx]), fd))
    return worst


def check_input_gradients(
    forward: Callable[[Tensor], Tensor],
    x0: np.ndarray,
    rng: np.random.Generator,
    n_coords: int = 5,
    eps: float = 1e-4,
) -> float:
    """Same check for d loss / d input on a leaf input tensor."""
    x = Tensor(x0.astype(np.float64))
    with Tape() as tape:
        loss = forward(x)
    (analytic,) = tape.backward(loss, wrt=(x,))

    arr = x0.astype(np.float64).copy()
    worst = 0.0
    coords = rng.choice(arr.size, size=min(n_coords, arr.size), replace=False)
    for c in coords:
        idx = np.unravel_index(int(c), arr.shape)

        def bump(delta):
            arr[idx] += delta

        fd = central_difference(lambda: forward(Tensor(arr)).item(), bump, eps)
        worst = max(worst, _rel_err(float(analytic[idx]), fd))
    return worst
