"""Inverse matrix square roots and grouped feature whitening."""

import numpy as np
import pytest

import evsfm.diffcore as dc
from evsfm.decorr import (
    apply_whitening,
    decorrelate_features,
    denman_beavers_invsqrt,
    group_covariance,
    invsqrt_eig,
)


def spd_matrix(n, seed, spread=3.0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    evals = np.exp(rng.uniform(-spread / 2.0, spread / 2.0, n))
    q, _ = np.linalg.qr(a)
    return (q * evals) @ q.T


def test_invsqrt_eig_oracle_is_exact():
    c = spd_matrix(6, seed=0)
    r = invsqrt_eig(c)
    np.testing.assert_allclose(r @ c @ r, np.eye(6), atol=1e-10)


def test_invsqrt_eig_rejects_non_spd():
    with pytest.raises(ValueError):
        invsqrt_eig(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        invsqrt_eig(np.array([[1.0, 5.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        invsqrt_eig(np.ones((2, 3)))


def test_denman_beavers_identity():
    # trace pre-normalization starts the iteration at I/n, so even the
    # identity needs a few steps to converge back to itself
    np.testing.assert_allclose(
        denman_beavers_invsqrt(np.eye(4), iters=20), np.eye(4), atol=1e-10
    )


def test_denman_beavers_diagonal_known_value():
    # diag(4, 1) -> diag(1/2, 1)
    c = np.diag([4.0, 1.0])
    approx = denman_beavers_invsqrt(c, iters=12)
    np.testing.assert_allclose(approx, np.diag([0.5, 1.0]), atol=1e-8)


def test_denman_beavers_matches_eig_oracle():
    for seed in range(4):
        c = spd_matrix(8, seed=seed, spread=2.5)
        approx = denman_beavers_invsqrt(c, iters=20)
        exact = invsqrt_eig(c)
        np.testing.assert_allclose(approx, exact, atol=1e-7)


def test_denman_beavers_trace_normalization_stays_bounded():
    # condition number ~e^6; the unnormalized recursion diverges here
    c = spd_matrix(8, seed=9, spread=6.0)
    approx = denman_beavers_invsqrt(c, iters=30)
    assert np.all(np.isfinite(approx))
    np.testing.assert_allclose(approx, invsqrt_eig(c), atol=1e-5)


def test_denman_beavers_validation():
    with pytest.raises(ValueError):
        denman_beavers_invsqrt(np.eye(3), iters=0)
    with pytest.raises(ValueError):
        denman_beavers_invsqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_group_covariance_matches_numpy_cov():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 8, 5, 5))
    cov = group_covariance(x, groups=4)
    rows = x.reshape(2, 4, 2, 5, 5).transpose(1, 0, 2, 3, 4).reshape(4, -1)
    expected = np.cov(rows, bias=True)
    np.testing.assert_allclose(cov, expected, atol=1e-12)


def test_decorrelate_features_whitens_covariance():
    rng = np.random.default_rng(4)
    # build strongly correlated channels
    base = rng.normal(size=(4, 1, 8, 8))
    x = base + 0.1 * rng.normal(size=(4, 16, 8, 8))
    white, wmat, mu = decorrelate_features(dc.Tensor(x), groups=16, iters=25)
    cov = group_covariance(white.data, groups=16)
    # the always-on ridge biases the result away from exact identity by
    # roughly its own magnitude relative to the eigenvalue spread
    np.testing.assert_allclose(cov, np.eye(16), atol=5e-3)
    assert wmat.shape == (16, 16)
    assert mu.shape == (16,)


def test_decorrelate_features_ridge_handles_rank_deficiency():
    # two identical groups make the covariance singular; the ridge keeps
    # the iteration finite
    rng = np.random.default_rng(5)
    half = rng.normal(size=(2, 2, 6, 6))
    x = np.concatenate([half, half], axis=1)
    white, _, _ = decorrelate_features(dc.Tensor(x), groups=4, iters=10)
    assert np.all(np.isfinite(white.data))


def test_decorrelate_features_gradient_flows_through_iterations():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 4, 3, 3))

    def op(a):
        white, _, _ = decorrelate_features(a, groups=2, iters=4)
        return dc.tsum(white**2.0)

    assert dc.grad_check(op, [x], eps=1e-5) < 1e-5


def test_apply_whitening_reproduces_fit_transform():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 8, 4, 4))
    white, wmat, mu = decorrelate_features(dc.Tensor(x), groups=4, iters=15)
    replay = apply_whitening(dc.Tensor(x), 4, wmat, mu)
    np.testing.assert_allclose(replay.data, white.data, atol=1e-10)
    # a frozen transform applied to new data is linear, not re-fit
    y = rng.normal(size=(3, 8, 4, 4))
    frozen = apply_whitening(dc.Tensor(y), 4, wmat, mu)
    cov = group_covariance(frozen.data, groups=4)
    assert np.abs(cov - np.eye(4)).max() > 1e-3  # not exactly whitened


def test_decorrelate_rejects_bad_grouping():
    with pytest.raises(ValueError):
        decorrelate_features(dc.Tensor(np.zeros((1, 6, 2, 2))), groups=4)
