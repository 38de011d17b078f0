"""Feature decorrelation through coupled matrix iterations.

The whitening transform is the inverse square root of the grouped feature
covariance, obtained with Denman-Beavers iterations.  The covariance is
trace-normalized before iterating; the raw recursion diverges whenever the
matrix is far from identity.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "denman_beavers_invsqrt",
    "invsqrt_eig",
    "decorrelate_features",
    "group_covariance",
]


def _check_symmetric(c, tol=1e-9):
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {c.shape}")
    scale = max(1.0, float(np.abs(c).max()))
    if np.abs(c - c.T).max() > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return c


def denman_beavers_invsqrt(c, iters=5):
    """Approximate C^{-1/2} of a symmetric positive-definite matrix.

    Starting from Y = C/tr(C), Z = I, iterate
        Y <- Y (3I - Z Y) / 2,   Z <- (3I - Z Y) Z / 2
    and return Z / sqrt(tr(C)).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    c = _check_symmetric(c)
    n = c.shape[0]
    tr = float(np.trace(c))
    y = c / tr
    z = np.eye(n)
    eye3 = 3.0 * np.eye(n)
    for _ in range(iters):
        m = eye3 - z @ y
        y = 0.5 * (y @ m)
        z = 0.5 * (m @ z)
    return z / np.sqrt(tr)


def invsqrt_eig(c):
    """Eigendecomposition oracle: C^{-1/2} = U diag(l^{-1/2}) U^T."""
    c = _check_symmetric(c)
    evals, evecs = np.linalg.eigh(c)
    if np.any(evals <= 0):
        raise ValueError("matrix is not positive definite")
    return (evecs * (1.0 / np.sqrt(evals))) @ evecs.T


def _grouped_samples(x, groups):
    """Reshape NCHW features to a (groups, samples) matrix of rows."""
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = dc.reshape(x, (n, groups, c // groups, h, w))
    xg = dc.transpose(xg, (1, 0, 2, 3, 4))
    return dc.reshape(xg, (groups, n * (c // groups) * h * w))


def group_covariance(x, groups):
    """groups x groups covariance of group-mean-centered features (numpy)."""
    s = _grouped_samples(dc.as_tensor(x), groups)
    sd = s.data - s.data.mean(axis=1, keepdims=True)
    return (sd @ sd.T) / sd.shape[1]


def decorrelate_features(x, groups=16, iters=5, ridge=1e-5):
    """Whiten grouped features so the group covariance approaches identity.

    Each group's channels are treated as one signal; the transform mixes the
    group-mean-centered signals by the covariance's inverse square root.
    Gradients flow through every iteration step.  A ridge of
    ridge * tr(C)/groups is added to keep near-singular covariances usable.

    Returns (whitened NCHW tensor, whitening matrix, group means), the last
    two as numpy arrays so a trainer can freeze them for eval.
    """
    x = dc.as_tensor(x)
    n, c, h, w = x.shape
    s = _grouped_samples(x, groups)
    mu = dc.tmean(s, axis=1, keepdims=True)
    s = s - mu
    m = s.shape[1]
    cov = dc.matmul(s, dc.transpose(s, (1, 0))) * (1.0 / m)
    tr0 = dc.trace2d(cov)
    eye = Tensor(np.eye(groups, dtype=x.dtype))
    cov = cov + eye * (tr0 * (ridge / groups))

    tr = dc.trace2d(cov)
    y = cov * (1.0 / tr)
    z = eye
    for _ in range(iters):
        mm = eye * 3.0 - dc.matmul(z, y)
        y = dc.matmul(y, mm) * 0.5
        z = dc.matmul(mm, z) * 0.5
    wmat = z * dc.power(tr, -0.5)

    white = dc.matmul(wmat, s)
    white = dc.reshape(white, (groups, n, c // groups, h, w))
    white = dc.transpose(white, (1, 0, 2, 3, 4))
    return dc.reshape(white, (n, c, h, w)), wmat.data.copy(), mu.data.reshape(-1).copy()


def apply_whitening(x, groups, wmat, mu):
    """Apply a frozen whitening transform (eval mode) to NCHW features."""
    x = dc.as_tensor(x)
    n, c, h, w = x.shape
    s = _grouped_samples(x, groups)
    s = s - Tensor(np.asarray(mu).reshape(groups, 1))
    white = dc.matmul(Tensor(np.asarray(wmat)), s)
    white = dc.reshape(white, (groups, n, c // groups, h, w))
    white = dc.transpose(white, (1, 0, 2, 3, 4))
    return dc.reshape(white, (n, c, h, w))
