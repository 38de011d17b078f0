"""Reverse-mode differentiation engine on dense numpy arrays.

The op set is deliberately small and closed: elementwise arithmetic,
reductions, reshaping, matmul, 3x3 same-padded convolution, align-corners
bilinear resizing and sampling, and the normalization layers built from
those primitives.  Training runs in single precision; gradient checks run
the same code in double precision.
"""

from __future__ import annotations

import math
import struct

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "matmul",
    "conv2d",
    "bilinear_resize",
    "bilinear_sample",
    "sample_mask",
    "leaky_relu",
    "softplus",
    "batch_norm",
    "group_norm",
    "adam_step",
    "adam_init",
    "Adam",
    "cosine_lr",
    "grad_check",
    "resize_shape",
    "write_tensor_file",
    "read_tensor_file",
    "save_checkpoint",
    "load_checkpoint",
]


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the parent's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """Dense array with an optional tape entry for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data**exponent
    return _op(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _op(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a):
    a = as_tensor(a)
    return _op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def leaky_relu(a, slope=0.1):
    a = as_tensor(a)
    scale = np.where(a.data >= 0, 1.0, slope)
    return _op(a.data * scale, (a,), lambda g: (g * scale,))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _op(out, (a,), lambda g: (g * sig,))


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _op(out, (a,), lambda g: (g * out * (1.0 - out),))


def sqrt(a):
    return power(a, 0.5)


# -- reductions and shape ops ---------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(ax % a.data.ndim for ax in axes))
        return (np.broadcast_to(g, a.shape).copy(),)

    return _op(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _op(a.data[idx], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _op(a.data @ b.data, (a, b), backward)


def trace2d(a):
    a = as_tensor(a)
    n = a.shape[-1]

    def backward(g):
        return (np.asarray(g) * np.eye(n, dtype=a.dtype),)

    return _op(np.trace(a.data), (a,), backward)


# -- convolution -----------------------------------------------------------


def conv2d(x, weight, bias=None):
    """3x3 cross-correlation with zero padding 1; spatial size is preserved.

    x: (N, C_in, H, W); weight: (C_out, C_in, 3, 3); bias: (C_out,) or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape[2:] != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {weight.shape[2:]}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    n, _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, weight.shape[0], h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            out += np.einsum(
                "oc,nchw->nohw",
                weight.data[:, :, dy, dx],
                xp[:, :, dy : dy + h, dx : dx + w],
                optimize=True,
            )
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for dy in range(3):
            for dx in range(3):
                gxp[:, :, dy : dy + h, dx : dx + w] += np.einsum(
                    "oc,nohw->nchw", weight.data[:, :, dy, dx], g, optimize=True
                )
                gw[:, :, dy, dx] = np.einsum(
                    "nohw,nchw->oc", g, xp[:, :, dy : dy + h, dx : dx + w], optimize=True
                )
        grads = [gxp[:, :, 1:-1, 1:-1], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _op(out, parents, backward)


# -- bilinear resizing and sampling ---------------------------------------


def resize_shape(size, scale):
    """Output edge length for a resize: round half up, at least 1."""
    return max(1, int(math.floor(size * scale + 0.5)))


def _resize_axis(n_in, n_out, dtype):
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.floor(src).astype(np.int64)
    i0 = np.clip(i0, 0, max(0, n_in - 2))
    frac = (src - i0).astype(dtype)
    if n_in == 1:
        i0 = np.zeros(n_out, dtype=np.int64)
        frac = np.zeros(n_out, dtype=dtype)
    return i0, i0 + (1 if n_in > 1 else 0), frac


def bilinear_resize(x, scale=None, size=None):
    """Align-corners bilinear resize of an NCHW tensor.

    Either a uniform scale or an explicit (H, W) output size must be given.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError("scale must be positive")
        size = (resize_shape(h, scale), resize_shape(w, scale))
    ho, wo = size
    if (ho, wo) == (h, w):
        return _op(x.data.copy(), (x,), lambda g: (g,))
    y0, y1, fy = _resize_axis(h, ho, x.dtype)
    x0, x1, fx = _resize_axis(w, wo, x.dtype)
    rows = x.data[:, :, y0, :] * (1 - fy)[None, None, :, None] + x.data[
        :, :, y1, :
    ] * fy[None, None, :, None]
    out = rows[:, :, :, x0] * (1 - fx) + rows[:, :, :, x1] * fx

    def backward(g):
        grows = np.zeros((n, c, ho, w), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), slice(None), x0), g * (1 - fx))
        np.add.at(grows, (slice(None), slice(None), slice(None), x1), g * fx)
        gx = np.zeros_like(x.data)
        np.add.at(
            gx, (slice(None), slice(None), y0), grows * (1 - fy)[None, None, :, None]
        )
        np.add.at(gx, (slice(None), slice(None), y1), grows * fy[None, None, :, None])
        return (gx,)

    return _op(out, (x,), backward)


def sample_mask(grid_data, height, width):
    """Boolean (N, H, W) mask of grid positions inside the source image."""
    gx, gy = grid_data[..., 0], grid_data[..., 1]
    return (gx >= 0) & (gx <= width - 1) & (gy >= 0) & (gy <= height - 1)


def bilinear_sample(x, grid):
    """Sample an NCHW tensor at absolute pixel positions with zero padding.

    grid: (N, H, W, 2) tensor of (x, y) coordinates in source pixel units.
    Differentiable with respect to both the source values and the grid.
    """
    x, grid = as_tensor(x), as_tensor(grid)
    n, c, hi, wi = x.shape
    gx, gy = grid.data[..., 0], grid.data[..., 1]
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx, fy = gx - x0, gy - y0

    corners = []
    for yi, xi, wgt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ):
        valid = (xi >= 0) & (xi < wi) & (yi >= 0) & (yi < hi)
        yc, xc = np.clip(yi, 0, hi - 1), np.clip(xi, 0, wi - 1)
        # (N, H, W, C) gather, masked to zero outside the image
        vals = x.data[np.arange(n)[:, None, None], :, yc, xc] * valid[..., None]
        corners.append((yc, xc, wgt, valid, vals))
    out = sum(
        (wgt[..., None] * vals for _, _, wgt, _, vals in corners),
        start=np.zeros_like(corners[0][4]),
    ).transpose(0, 3, 1, 2)

    v00, v10, v01, v11 = (cr[4] for cr in corners)

    def backward(g):
        gp = g.transpose(0, 2, 3, 1)  # (N, H, W, C)
        gsrc = np.zeros_like(x.data)
        n_i = np.arange(n)[:, None, None, None]
        c_i = np.arange(c)[None, None, None, :]
        for yc, xc, wgt, valid, _ in corners:
            np.add.at(
                gsrc,
                (n_i, c_i, yc[..., None], xc[..., None]),
                gp * (wgt * valid)[..., None],
            )
        dgx = (1 - fy)[..., None] * (v10 - v00) + fy[..., None] * (v11 - v01)
        dgy = (1 - fx)[..., None] * (v01 - v00) + fx[..., None] * (v11 - v10)
        ggrid = np.stack([(gp * dgx).sum(-1), (gp * dgy).sum(-1)], axis=-1)
        return gsrc, ggrid

    return _op(out, (x, grid), backward)


# -- normalization ---------------------------------------------------------


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and the running buffers
    (plain numpy arrays, updated in place) track them with the given
    momentum; in eval mode the running buffers are used as constants.
    """
    x = as_tensor(x)
    if training:
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        var = tmean(power(x - mu, 2.0), axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(-1)
    else:
        mu = Tensor(running_mean.reshape(1, -1, 1, 1))
        var = Tensor(running_var.reshape(1, -1, 1, 1))
    xhat = (x - mu) * power(var + eps, -0.5)
    g = reshape(as_tensor(gamma), (1, -1, 1, 1))
    b = reshape(as_tensor(beta), (1, -1, 1, 1))
    return xhat * g + b


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Normalize per (sample, group) over the grouped channels and space."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = reshape(x, (n, groups, c // groups, h, w))
    mu = tmean(xg, axis=(2, 3, 4), keepdims=True)
    var = tmean(power(xg - mu, 2.0), axis=(2, 3, 4), keepdims=True)
    xhat = reshape((xg - mu) * power(var + eps, -0.5), (n, c, h, w))
    g = reshape(as_tensor(gamma), (1, -1, 1, 1))
    b = reshape(as_tensor(beta), (1, -1, 1, 1))
    return xhat * g + b


# -- optimization ----------------------------------------------------------


def adam_init(shapes):
    return {
        "step": 0,
        "m": [np.zeros(s) for s in shapes],
        "v": [np.zeros(s) for s in shapes],
    }


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; params are mutated in place."""
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a list of parameter Tensors."""

    def __init__(self, params, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = adam_init([p.shape for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in self.params
        ]
        adam_step(
            [p.data for p in self.params],
            grads,
            self.state,
            self.lr if lr is None else lr,
            self.betas,
            self.eps,
        )


def cosine_lr(step, total, lr0):
    """lr0 * (1 + cos(pi * step / total)) / 2."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


# -- gradient verification -------------------------------------------------


def grad_check(op, inputs, eps=1e-4):
    """Max relative error between reverse-mode and central-difference grads.

    op maps the input Tensors to a scalar Tensor; inputs should be float64.
    """
    inputs = [as_tensor(t) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = op(*inputs)
    out.backward()
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = op(*inputs).item()
            flat[i] = orig - eps
            fm = op(*inputs).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = ga.reshape(-1)[i]
            # unit floor: behaves like an absolute tolerance for tiny
            # gradients, where central differences are all rounding noise
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, rel)
    return worst


# -- binary tensor format --------------------------------------------------

TEN1_MAGIC = b"TEN1"


def write_tensor_file(arr, f):
    """Write one array as a TEN1 blob: magic, u32 ndim, dims, f32 payload."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    close = False
    if not hasattr(f, "write"):
        f, close = open(f, "wb"), True
    try:
        f.write(TEN1_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())
    finally:
        if close:
            f.close()


def read_tensor_file(f):
    close = False
    if not hasattr(f, "read"):
        f, close = open(f, "rb"), True
    try:
        magic = f.read(4)
        if magic != TEN1_MAGIC:
            raise ValueError(f"bad tensor magic {magic!r}")
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError("truncated tensor payload")
        return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    finally:
        if close:
            f.close()


def save_checkpoint(named_arrays, path):
    """Sequence of (u16 name length, name bytes, TEN1 blob) records."""
    with open(path, "wb") as f:
        for name, arr in named_arrays.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            write_tensor_file(arr, f)


def load_checkpoint(path):
    out = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(2)
            if not head:
                break
            (nlen,) = struct.unpack("<H", head)
            name = f.read(nlen).decode("utf-8")
            out[name] = read_tensor_file(f)
    return out
