"""Reverse-mode gradient tape.

Ops record themselves on the active tape in execution order, which is
already a topological order, so backward is a single reverse sweep.
Gradients flow into Parameter.gradient only for trainable parameters;
frozen parameters are skipped entirely, which keeps their gradients
identically zero.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor

_STACK: list["Tape"] = []


def active_tape():
    return _STACK[-1] if _STACK else None


class Tape:
    """Records (output, parents, backward_fn) triples during forward."""

    def __init__(self):
        # each entry: (out Tensor, parents tuple of Tensor|Parameter, fn(grad)->grads per parent)
        self._entries: list[tuple[Tensor, tuple, callable]] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STACK.pop()

    def record(self, out: Tensor, parents: tuple, backward_fn) -> None:
        self._entries.append((out, parents, backward_fn))

    def backward(self, loss: Tensor, wrt: tuple[Tensor, ...] = ()) -> list[np.ndarray]:
        """Accumulate d(loss)/d(param) into each trainable parameter's gradient.

        `wrt` may name leaf input tensors; their gradients are returned in
        order (zeros if the loss does not depend on them).
        """
        if self._used:
            raise RuntimeError("tape already consumed by a backward pass")
        self._used = True
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        param_grads: dict[int, list] = {}  # id -> [Parameter, grad accumulator]
        wrt_ids = {id(t) for t in wrt}

        for out, parents, fn in reversed(self._entries):
            key = id(out)
            g = grads.get(key)
            if g is None:
                continue
            if key not in wrt_ids:
                del grads[key]
            parent_grads = fn(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None:
                    continue
                if isinstance(parent, Parameter):
                    if not parent.trainable:
                        continue
                    pkey = id(parent)
                    if pkey in param_grads:
                        param_grads[pkey][1] += pg
                    else:
                        param_grads[pkey] = [parent, pg.copy()]
                else:
                    pkey = id(parent)
                    if pkey in grads:
                        grads[pkey] = grads[pkey] + pg
                    else:
                        grads[pkey] = pg

        for param, g in param_grads.values():
            acc = param.gradient.data + g
            param.gradient = Tensor._wrap(acc.astype(param.dtype, copy=False))

        return [grads.get(id(t), np.zeros(t.shape, dtype=t.dtype)) for t in wrt]
