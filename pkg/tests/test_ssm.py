import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s4m import autodiff as ad
from s4m.ssm import (S4Channels, SsmChannelParams, DiscreteSsm, apply_convolution, bilinear_discretize,
                     direct_convolution, hippo_legs_matrix, materialize_kernel, run_recurrence)


def random_channel(rng, H, log_delta=None):
    A = hippo_legs_matrix(H)
    return SsmChannelParams(A, rng.normal(size=(H, 1)), rng.normal(size=(1, H)), float(rng.normal()),
                            float(rng.uniform(np.log(1e-3), np.log(1e-1)) if log_delta is None else log_delta))


def power_kernel(d: DiscreteSsm, C, L):
    """k[i] = C Ā^i B̄ by explicit matrix powers."""
    return np.array([(C @ np.linalg.matrix_power(d.A_bar, i) @ d.B_bar).item() for i in range(L)])


def test_hippo_small_cases():
    assert np.array_equal(hippo_legs_matrix(1), [[-1.0]])
    assert np.allclose(hippo_legs_matrix(2), [[-1, 0], [-np.sqrt(3), -2]])
    A3 = hippo_legs_matrix(3)
    assert np.array_equal(np.triu(A3, 1), np.zeros((3, 3)))
    assert np.array_equal(np.diag(A3), [-1, -2, -3])
    # triangular, so the eigenvalues are the diagonal
    assert np.all(np.diag(A3) < 0)


def test_hippo_entries_follow_legs_formula():
    H = 6
    A = hippo_legs_matrix(H)
    for n in range(H):
        for k in range(H):
            want = -np.sqrt((2 * n + 1) * (2 * k + 1)) if n > k else (-(n + 1) if n == k else 0.0)
            assert A[n, k] == pytest.approx(want, abs=1e-14)


def test_bilinear_zero_matrix():
    H = 3
    p = SsmChannelParams(np.zeros((H, H)), np.ones((H, 1)), np.ones((1, H)), 0.0, np.log(0.3))
    d = bilinear_discretize(p)
    assert np.allclose(d.A_bar, np.eye(H), atol=1e-15)
    assert np.allclose(d.B_bar, 0.3 * np.ones((H, 1)))


def test_bilinear_scalar_case():
    d = bilinear_discretize(SsmChannelParams(np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]), 0.0, 0.0))
    assert d.A_bar[0, 0] == pytest.approx(1 / 3, abs=1e-14)
    assert d.B_bar[0, 0] == pytest.approx(2 / 3, abs=1e-14)


def test_bilinear_small_step_is_second_order():
    A = hippo_legs_matrix(4)
    errs = []
    for dt in (1e-2, 1e-3):
        d = bilinear_discretize(SsmChannelParams(A, np.ones((4, 1)), np.ones((1, 4)), 0.0, np.log(dt)))
        errs.append(np.linalg.norm(d.A_bar - (np.eye(4) + dt * A)))
    assert 80 < errs[0] / errs[1] < 120


def test_kernel_scalar_geometric():
    k = materialize_kernel(DiscreteSsm(np.array([[0.5]]), np.array([[1.0]])), np.array([[1.0]]), 3)
    assert np.allclose(k, [1, 0.5, 0.25])


def test_kernel_zero_readout():
    rng = np.random.default_rng(0)
    d = bilinear_discretize(random_channel(rng, 4))
    assert np.array_equal(materialize_kernel(d, np.zeros((1, 4)), 8), np.zeros(8))


def test_kernel_matches_matrix_powers():
    rng = np.random.default_rng(1)
    p = random_channel(rng, 4)
    d = bilinear_discretize(p)
    assert np.max(np.abs(materialize_kernel(d, p.C, 16) - power_kernel(d, p.C, 16))) < 1e-10


def test_recurrence_zero_input():
    rng = np.random.default_rng(2)
    y, h = run_recurrence(random_channel(rng, 3), np.zeros(10))
    assert np.array_equal(y, np.zeros(10)) and np.array_equal(h, np.zeros(3))


def test_recurrence_scalar_impulse():
    p = SsmChannelParams(np.array([[-1.0]]), np.array([[1.0]]), np.array([[2.0]]), 0.5, 0.0)
    y, _ = run_recurrence(p, [1.0, 0.0, 0.0])
    ab, bb, c = 1 / 3, 2 / 3, 2.0
    assert np.allclose(y, [c * bb + 0.5, c * ab * bb, c * ab * ab * bb])


def test_impulse_response_is_kernel():
    rng = np.random.default_rng(3)
    p = random_channel(rng, 5)
    p.D = 0.0
    u = np.zeros(20)
    u[0] = 1.0
    y, _ = run_recurrence(p, u)
    assert np.allclose(y, materialize_kernel(bilinear_discretize(p), p.C, 20), atol=1e-13)


def test_convolution_identity_kernel_and_zero_input():
    u = np.random.default_rng(4).normal(size=12)
    k = np.zeros(12)
    k[0] = 1.0
    assert np.allclose(apply_convolution(k, 0.0, u), u, atol=1e-12)
    assert np.allclose(apply_convolution(u, 0.0, np.zeros(12)), 0.0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(L=st.integers(1, 64), seed=st.integers(0, 2**31 - 1))
def test_fft_matches_direct_convolution(L, seed):
    rng = np.random.default_rng(seed)
    k, u = rng.normal(size=L), rng.normal(size=L)
    assert np.max(np.abs(apply_convolution(k, 0.0, u) - direct_convolution(k, u))) < 1e-9


@settings(max_examples=40, deadline=None)
@given(H=st.integers(1, 8), L=st.integers(1, 128), seed=st.integers(0, 2**31 - 1))
def test_recurrence_equals_convolution(H, L, seed):
    rng = np.random.default_rng(seed)
    p = random_channel(rng, H)
    u = rng.normal(size=L)
    y_rec, _ = run_recurrence(p, u)
    y_conv = apply_convolution(materialize_kernel(bilinear_discretize(p), p.C, L), p.D, u)
    assert np.max(np.abs(y_rec - y_conv)) < 1e-8


def test_length_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        apply_convolution(np.ones(4), 0.0, np.ones(5))


def test_channels_layer_matches_per_channel_recurrence():
    rng = np.random.default_rng(5)
    layer = S4Channels(3, 4, rng)
    u = rng.normal(size=(2, 10, 3))
    y = layer(ad.as_tensor(u)).data
    for n in range(2):
        for r in range(3):
            want, _ = run_recurrence(layer.channel(r), u[n, :, r])
            assert np.allclose(y[n, :, r], want, atol=1e-10)


def test_channels_gradient_matches_fd():
    rng = np.random.default_rng(6)
    layer = S4Channels(2, 3, rng, train_A=True)
    u = rng.normal(size=(8, 2))
    proj = rng.normal(size=(8, 2))
    f = lambda: ad.sum(ad.mul(layer(ad.as_tensor(u)), proj))  # noqa: E731
    for name, t in layer.params().items():
        assert ad.finite_difference_check(f, t) < 1e-5, name
