"""A tour of the reverse-mode engine: tape, gradient check, optimizer.

Fits a tiny convolution to a known target with Adam under a cosine
schedule, and verifies a composite op's gradients against central
differences.
"""

import numpy as np

import evsfm.diffcore as dc
from evsfm.diffcore import Tensor

rng = np.random.default_rng(0)

# gradients of a composite expression, checked against finite differences
err = dc.grad_check(
    lambda x, w: dc.tsum(dc.leaky_relu(dc.conv2d(x, w)) ** 2.0),
    [rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))],
)
print(f"conv -> leaky-relu -> sum-of-squares gradient check: {err:.2e}")

# fit a 3x3 kernel so conv(x) matches a target produced by a hidden kernel
true_w = rng.normal(size=(1, 1, 3, 3))
x = rng.normal(size=(8, 1, 10, 10))
target = dc.conv2d(Tensor(x), Tensor(true_w)).data

w = Tensor(rng.normal(size=(1, 1, 3, 3)) * 0.1, requires_grad=True)
opt = dc.Adam([w], lr=0.05)
steps = 200
for step in range(steps):
    opt.zero_grad()
    pred = dc.conv2d(Tensor(x), w)
    loss = dc.tmean((pred - Tensor(target)) ** 2.0)
    loss.backward()
    opt.step(lr=dc.cosine_lr(step, steps, 0.05))
    if step % 50 == 0 or step == steps - 1:
        print(f"step {step:3d}  lr {dc.cosine_lr(step, steps, 0.05):.4f}  "
              f"loss {loss.item():.6f}")
print(f"recovered kernel error: {np.abs(w.data - true_w).max():.4f}")
