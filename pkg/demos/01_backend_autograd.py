"""Tensor backend walkthrough: layer primitives, the gradient tape, Adam,
and the finite-difference oracle that keeps the backward passes honest.

Run:  python3 demos/01_backend_autograd.py
"""

import numpy as np

from boxprompt.backend import (
    Adam,
    Parameter,
    RunningStats,
    Tape,
    Tensor,
    batchnorm2d,
    check_parameter_gradients,
    conv2d,
    relu,
    sum_all,
    upsample2x,
)

rng = np.random.default_rng(0)

print("== forward semantics ==")
x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 1, 2, 2))
print("input:\n", x.data[0, 0])
print("nearest-neighbor upsample x2:\n", upsample2x(x).data[0, 0])

ident = np.zeros((1, 1, 3, 3), np.float32)
ident[0, 0, 1, 1] = 1.0
w = Parameter(Tensor(ident), name="w")
print("conv with the identity kernel returns the input:",
      np.array_equal(conv2d(x, w, None, padding=1).data, x.data))

print("\n== tape backprop on a small conv net ==")
x = Tensor(rng.normal(0, 1, (4, 3, 8, 8)).astype(np.float32))
w1 = Parameter(Tensor(rng.normal(0, 0.3, (6, 3, 3, 3)).astype(np.float32)), name="w1")
b1 = Parameter(Tensor(np.zeros(6, np.float32)), name="b1")
gamma = Parameter(Tensor(np.ones(6, np.float32)), name="gamma")
beta = Parameter(Tensor(np.zeros(6, np.float32)), name="beta")
stats = RunningStats(6)

with Tape() as tape:
    h = relu(batchnorm2d(conv2d(x, w1, b1, padding=1), gamma, beta, stats, train=True))
    loss = sum_all(h)
tape.backward(loss)
print(f"loss = {loss.item():.4f}")
for p in (w1, gamma, beta):
    print(f"  grad[{p.name}]: max |g| = {np.abs(p.gradient.data).max():.4f}")

print("\n== frozen parameters receive no gradient ==")
w_frozen = Parameter(Tensor(rng.normal(0, 0.3, (2, 3, 3, 3)).astype(np.float32)),
                     trainable=False, name="w_frozen")
with Tape() as tape:
    loss = sum_all(conv2d(x, w_frozen, None, padding=1))
tape.backward(loss)
print("max |grad| on frozen conv:", np.abs(w_frozen.gradient.data).max())

print("\n== Adam on a quadratic bowl ==")
theta = Parameter(Tensor(np.array([4.0, -3.0], np.float32)), name="theta")
opt = Adam([theta], lr=0.2)
for step in range(60):
    g = 2 * theta.value.data  # d/dtheta of ||theta||^2
    theta.gradient = Tensor(g)
    opt.step()
print("after 60 steps, theta =", theta.value.data, "(analytic minimum is the origin)")

print("\n== finite-difference check (64-bit) ==")
xd = Tensor(rng.normal(0, 1, (2, 2, 6, 6)))
wd = Parameter(Tensor(rng.normal(0, 0.4, (3, 2, 3, 3))), name="wd")
bd = Parameter(Tensor(rng.normal(0.2, 0.1, (3,))), name="bd")
err = check_parameter_gradients(
    lambda: sum_all(relu(conv2d(xd, wd, bd, padding=1))), [wd, bd],
    np.random.default_rng(1), coords_per_param=6,
)
print(f"worst relative error vs central differences: {err:.2e}")
