"""Linear state-space machinery: HiPPO-LegS init, bilinear discretization,
kernel materialization, and the recurrent / convolutional execution modes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_DT_MIN = np.log(1e-3)
LOG_DT_MAX = np.log(1e-1)


class DiscretizationError(ArithmeticError):
    pass


def hippo_legs_matrix(H: int) -> np.ndarray:
    """HiPPO-LegS state matrix (lower triangular, diagonal -(n+1))."""
    if H < 1:
        raise ValueError(f"state size must be >= 1, got {H}")
    q = np.sqrt(2.0 * np.arange(H) + 1.0)
    A = -np.tril(np.outer(q, q), -1)
    A[np.diag_indices(H)] = -(np.arange(H) + 1.0)
    return A


@dataclass
class SsmChannelParams:
    """One scalar-in / scalar-out channel: A (H,H), B (H,1), C (1,H), D, log Δ."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float
    log_delta: float

    @property
    def H(self) -> int:
        return self.A.shape[0]

    @property
    def delta(self) -> float:
        return float(np.exp(self.log_delta))


@dataclass
class DiscreteSsm:
    A_bar: np.ndarray
    B_bar: np.ndarray


def discretize(A: Tensor, log_delta: Tensor, *inputs: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Batched bilinear transform on the tape.

    A: (H,H) shared or (R,H,H); log_delta: (R,); each input (R,H).
    Returns A_bar (R,H,H) and the discretized inputs (I - ΔA/2)^-1 Δ X.
    """
    A, log_delta = ad.as_tensor(A), ad.as_tensor(log_delta)
    H = A.shape[-1]
    R = log_delta.shape[0]
    delta = ad.exp(log_delta)
    dA = ad.mul(ad.reshape(delta, (R, 1, 1)), A)
    half = ad.scale(dA, 0.5)
    eye = np.eye(H)
    lhs = ad.sub(eye, half)
    try:
        lhs_inv = ad.inv(lhs)
    except (np.linalg.LinAlgError, ad.NumericError):
        raise DiscretizationError(f"(I - ΔA/2) is singular for Δ = {np.exp(log_delta.data).tolist()}") from None
    A_bar = ad.matmul(lhs_inv, ad.add(eye, half))
    dcol = ad.reshape(delta, (R, 1, 1))
    outs = []
    for X in inputs:
        X = ad.as_tensor(X)
        xcol = ad.reshape(X, (R, H, 1))
        outs.append(ad.reshape(ad.matmul(lhs_inv, ad.mul(dcol, xcol)), (R, H)))
    return A_bar, outs


def bilinear_discretize(params: SsmChannelParams) -> DiscreteSsm:
    A_bar, (B_bar,) = discretize(params.A, np.array([params.log_delta]), params.B.reshape(1, -1))
    return DiscreteSsm(A_bar.data[0], B_bar.data[0].reshape(-1, 1))


def materialize_kernel(d: DiscreteSsm, C: np.ndarray, L: int) -> np.ndarray:
    """k[i] = C A_bar^i B_bar for i < L, by iterated state application."""
    if L < 1:
        raise ValueError("kernel length must be >= 1")
    H = d.A_bar.shape[0]
    k = ad.ssm_kernel(d.A_bar[None], d.B_bar.reshape(1, H), np.asarray(C, float).reshape(1, H), L)
    return k.data[:, 0]


def run_recurrence(params: SsmChannelParams, u, h0=None) -> tuple[np.ndarray, np.ndarray]:
    """Stepwise h_t = A_bar h_{t-1} + B_bar u_t, y_t = C h_t + D u_t."""
    d = bilinear_discretize(params)
    u = np.asarray(u, dtype=float)
    h = np.zeros(params.H) if h0 is None else np.asarray(h0, dtype=float).copy()
    b = d.B_bar[:, 0]
    c = np.asarray(params.C, float).reshape(-1)
    y = np.empty(len(u))
    for t, ut in enumerate(u):
        h = d.A_bar @ h + b * ut
        y[t] = c @ h + params.D * ut
    return y, h


def apply_convolution(k, D: float, u) -> np.ndarray:
    """y_t = sum_{i<=t} k[i] u[t-i] + D u_t via FFT on length-2L buffers."""
    k = np.asarray(k, float)
    u = np.asarray(u, float)
    if k.shape != u.shape:
        raise ad.ShapeError(f"kernel length {k.shape} != input length {u.shape}")
    y = ad.fft_conv(k[:, None], u[:, None]).data[:, 0]
    return y + D * u


def direct_convolution(k, u) -> np.ndarray:
    """O(L^2) causal convolution; reference for the FFT path."""
    k = np.asarray(k, float)
    u = np.asarray(u, float)
    L = len(u)
    y = np.zeros(L)
    for t in range(L):
        for i in range(t + 1):
            y[t] += k[i] * u[t - i]
    return y


class S4Channels:
    """R independent SSM channels sharing state size H.

    Parameters live as tape leaves: ``A`` (H,H, frozen unless ``train_A``),
    ``B``/``C`` (R,H), ``D`` and ``log_delta`` (R,).
    """

    def __init__(self, R: int, H: int, rng: np.random.Generator, train_A: bool = False):
        self.R, self.H = R, H
        self.A = Tensor(hippo_legs_matrix(H), requires_grad=train_A)
        self.B = Tensor(np.ones((R, H)), requires_grad=True)
        self.C = Tensor(rng.standard_normal((R, H)) / np.sqrt(H), requires_grad=True)
        self.D = Tensor(np.ones(R), requires_grad=True)
        self.log_delta = Tensor(rng.uniform(LOG_DT_MIN, LOG_DT_MAX, size=R), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B, "C": self.C, "D": self.D, "log_delta": self.log_delta}

    def channel(self, r: int) -> SsmChannelParams:
        return SsmChannelParams(self.A.data.copy(), self.B.data[r].reshape(-1, 1).copy(),
                                self.C.data[r].reshape(1, -1).copy(), float(self.D.data[r]),
                                float(self.log_delta.data[r]))

    def kernel(self, L: int) -> Tensor:
        A_bar, (B_bar,) = discretize(self.A, self.log_delta, self.B)
        return ad.ssm_kernel(A_bar, B_bar, self.C, L)

    def __call__(self, u: Tensor) -> Tensor:
        """u: (..., L, R) -> (..., L, R), convolution mode."""
        L = u.shape[-2]
        return ad.add(ad.fft_conv(self.kernel(L), u), ad.mul(self.D, u))
