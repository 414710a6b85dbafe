"""Adaptive temporal prototype mapper.

Local statistics fill missing entries from the window's observed extrema;
a query encoder turns each short trailing slice into a vector that reads a
two-level FIFO prototype bank, while a momentum copy of the encoder writes
new prototypes into it.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .ssm import S4Channels

log = logging.getLogger(__name__)


class DegenerateVariableError(ValueError):
    """A variable has no observed entry inside the window."""


class EmptyBankError(RuntimeError):
    pass


# ---------------------------------------------------------------- local statistics

class DecayParams:
    """Per-variable W1, b1, W2, b2 of the two exponential weights."""

    def __init__(self, D: int, w_init: float = 0.1):
        self.W1 = Tensor(np.full(D, w_init), requires_grad=True)
        self.b1 = Tensor(np.zeros(D), requires_grad=True)
        self.W2 = Tensor(np.full(D, w_init), requires_grad=True)
        self.b2 = Tensor(np.zeros(D), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class LocalStats:
    z: Tensor
    omega1: np.ndarray
    omega2: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    delta_min: np.ndarray
    delta_max: np.ndarray


def _extrema(x: np.ndarray, mask: np.ndarray, fallback):
    L = x.shape[-2]
    obs = mask.astype(bool)
    any_obs = obs.any(axis=-2)
    if not np.all(any_obs) and fallback is None:
        raise DegenerateVariableError("variable with no observed entries in window")
    lo = np.where(obs, x, np.inf)
    hi = np.where(obs, x, -np.inf)
    i_min = lo.argmin(axis=-2)
    i_max = hi.argmax(axis=-2)
    x_min = np.take_along_axis(lo, i_min[..., None, :], axis=-2)[..., 0, :]
    x_max = np.take_along_axis(hi, i_max[..., None, :], axis=-2)[..., 0, :]
    t = np.arange(L).reshape((L, 1))
    d_min = np.abs(t - i_min[..., None, :]).astype(float)
    d_max = np.abs(t - i_max[..., None, :]).astype(float)
    if not np.all(any_obs):
        fb = np.broadcast_to(np.asarray(fallback, float), any_obs.shape)
        x_min = np.where(any_obs, x_min, fb)
        x_max = np.where(any_obs, x_max, fb)
        dead = ~any_obs[..., None, :]
        d_min = np.where(dead, float(L), d_min)
        d_max = np.where(dead, float(L), d_max)
    return x_min, x_max, d_min, d_max


def extract_local_stats(x, mask, decay: DecayParams, fallback=None) -> LocalStats:
    """Z = M∘X + (1-M)∘(Ω1'·x_min + Ω2'·x_max).

    x, mask: (..., L, D). Values under mask 0 are never read. ``fallback``
    (per-variable value, e.g. the training mean) stands in for both extrema
    of a variable with no observation in the window.
    """
    x = np.asarray(x, float)
    mask = np.asarray(mask, float)
    if x.shape != mask.shape:
        raise ContractError(f"values {x.shape} vs mask {mask.shape}")
    x_obs = np.where(mask == 1, x, 0.0)
    x_min, x_max, d_min, d_max = _extrema(x_obs, mask, fallback)
    om1 = ad.exp(ad.neg(ad.relu(ad.add(ad.mul(decay.W1, d_min), decay.b1))))
    om2 = ad.exp(ad.neg(ad.relu(ad.add(ad.mul(decay.W2, d_max), decay.b2))))
    tot = ad.add(om1, om2)
    w1, w2 = ad.div(om1, tot), ad.div(om2, tot)
    L = x.shape[-2]
    xmin_b = np.repeat(x_min[..., None, :], L, axis=-2)
    xmax_b = np.repeat(x_max[..., None, :], L, axis=-2)
    fill = ad.add(ad.mul(w1, xmin_b), ad.mul(w2, xmax_b))
    z = ad.add(x_obs, ad.mul(1.0 - mask, fill))
    return LocalStats(z, w1.data, w2.data, x_min, x_max, d_min, d_max)


# ---------------------------------------------------------------- encoder

def delay_index(L: int, s: int, W: int, times=None) -> np.ndarray:
    """Index (n_t, T_c, W) into the time axis for the slice of length s ending
    at each t, unfolded into conv windows of width W; t < s-1 repeats row 0."""
    t = np.arange(L) if times is None else np.asarray(times)
    Tc = s - W + 1
    idx = t[:, None, None] - (s - 1) + np.arange(Tc)[None, :, None] + np.arange(W)[None, None, :]
    return np.maximum(idx, 0)


@dataclass
class EncoderConfig:
    s: int = 16
    W: int = 4
    R: int = 32
    H: int = 16
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.s < self.W:
            raise ValueError(f"window s={self.s} shorter than conv width W={self.W}")


class Encoder:
    """Delay embedding → W×D convolution (R filters) + ReLU + dropout →
    temporal self-attention (residual) → SSM compression to one R-vector."""

    def __init__(self, D: int, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        R, WD = cfg.R, cfg.W * D
        self.conv_w = Tensor(rng.standard_normal((WD, R)) / np.sqrt(WD), requires_grad=True)
        self.conv_b = Tensor(np.zeros(R), requires_grad=True)
        self.Wq = Tensor(rng.standard_normal((R, R)) / np.sqrt(R), requires_grad=True)
        self.Wk = Tensor(rng.standard_normal((R, R)) / np.sqrt(R), requires_grad=True)
        self.Wv = Tensor(rng.standard_normal((R, R)) / np.sqrt(R), requires_grad=True)
        self.compress = S4Channels(R, cfg.H, rng)

    def params(self) -> dict[str, Tensor]:
        p = {"conv_w": self.conv_w, "conv_b": self.conv_b, "Wq": self.Wq, "Wk": self.Wk, "Wv": self.Wv}
        p.update({f"compress.{k}": v for k, v in self.compress.params().items()})
        return p

    def __call__(self, z, times=None, training: bool = False, rng=None) -> Tensor:
        """z: (..., L, D) → (..., n_t, R), one encoding per slice end time."""
        z = ad.as_tensor(z)
        L, D = z.shape[-2:]
        cfg = self.cfg
        # Overlapping slices share conv rows: evaluate every row-wise map once
        # per absolute start position, then gather the (n_t, Tc) layout.
        t = np.arange(L) if times is None else np.asarray(times)
        starts = t[:, None] - (cfg.s - 1) + np.arange(cfg.s - cfg.W + 1)[None]
        lo = int(starts.min())
        pos = np.arange(lo, int(starts.max()) + 1)
        rows = np.maximum(pos[:, None] + np.arange(cfg.W)[None], 0)
        win = ad.take_rows(z, rows)                      # (..., P, W, D)
        win = ad.reshape(win, win.shape[:-2] + (cfg.W * D,))
        h = ad.relu(ad.add(ad.matmul(win, self.conv_w), self.conv_b))
        h = ad.dropout(h, cfg.dropout_rate, rng, training)
        sel = starts - lo
        q, k, v = (ad.take_rows(ad.matmul(h, Wx), sel) for Wx in (self.Wq, self.Wk, self.Wv))
        h = ad.take_rows(h, sel)                         # (..., n_t, Tc, R)
        nd = h.ndim
        kt = ad.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
        att = ad.softmax(ad.scale(ad.matmul(q, kt), 1.0 / np.sqrt(cfg.R)), axis=-1)
        h = ad.add(h, ad.matmul(att, v))
        Tc = h.shape[-2]
        kern = self.compress.kernel(Tc)                  # (Tc, R)
        kflip = kern[::-1]
        y = ad.sum(ad.mul(h, kflip), axis=-2)
        return ad.add(y, ad.mul(self.compress.D, h[..., Tc - 1, :]))


def encode(z_window, enc: Encoder) -> np.ndarray:
    """Encode one (s, D) slice; the vector at its last time step."""
    z_window = np.asarray(z_window, float)
    return enc(z_window, times=[z_window.shape[0] - 1]).data[0]


def momentum_update(theta_p: dict[str, Tensor], theta_q: dict[str, Tensor], gamma: float) -> None:
    """θ_p ← γ θ_p + (1-γ) θ_q, in place, outside any tape."""
    if not 0.0 <= gamma < 1.0:
        raise ContractError(f"momentum must lie in [0, 1), got {gamma}")
    if theta_p.keys() != theta_q.keys():
        raise ContractError("parameter sets differ")
    for k, p in theta_p.items():
        q = theta_q[k]
        if p.shape != q.shape:
            raise ContractError(f"{k}: shape {p.shape} vs {q.shape}")
        p.data[...] = gamma * p.data + (1.0 - gamma) * q.data


# ---------------------------------------------------------------- prototype bank

def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(np.linalg.norm(v), 1e-12)


@dataclass
class Cluster:
    centroid: np.ndarray
    members: deque
    seq: int
    member_seqs: deque

    def refresh(self) -> None:
        self.centroid = _unit(np.mean(np.stack(self.members), axis=0))


@dataclass
class PrototypeBank:
    K1: int = 30
    K2: int = 10
    tau1: float = 0.9
    tau2: float = 0.6
    top_k: int = 3
    clusters: deque = field(default_factory=deque)
    _counter: int = 0

    def __post_init__(self):
        if not self.tau2 < self.tau1:
            raise ValueError(f"need tau2 < tau1, got {self.tau2} >= {self.tau1}")
        self.clusters = deque(self.clusters, maxlen=self.K1)

    def __len__(self) -> int:
        return len(self.clusters)

    def _next(self) -> int:
        self._counter += 1
        return self._counter

    def centroids(self) -> np.ndarray:
        if not self.clusters:
            raise EmptyBankError("prototype bank must be initialized before use")
        return np.stack([c.centroid for c in self.clusters])

    def new_cluster(self, p: np.ndarray) -> None:
        p = _unit(p)
        seq = self._next()
        self.clusters.append(Cluster(p.copy(), deque([p], maxlen=self.K2), seq, deque([seq], maxlen=self.K2)))

    def add_member(self, j: int, p: np.ndarray) -> None:
        c = self.clusters[j]
        c.members.append(_unit(p))
        c.member_seqs.append(self._next())
        c.refresh()

    def write_one(self, p: np.ndarray) -> str:
        """Route one prototype; returns 'member', 'cluster' or 'skip'."""
        p = _unit(np.asarray(p, float))
        sims = self.centroids() @ p
        j = int(np.argmax(sims))
        if sims[j] >= self.tau1:
            self.add_member(j, p)
            return "member"
        if sims[j] < self.tau2:
            self.new_cluster(p)
            return "cluster"
        return "skip"

    def state_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for c in self.clusters:
            h.update(c.centroid.tobytes())
            h.update(np.stack(c.members).tobytes())
            h.update(str((c.seq, tuple(c.member_seqs))).encode())
        return h.hexdigest()

    def copy(self) -> "PrototypeBank":
        out = PrototypeBank(self.K1, self.K2, self.tau1, self.tau2, self.top_k)
        out._counter = self._counter
        for c in self.clusters:
            out.clusters.append(Cluster(c.centroid.copy(), deque([m.copy() for m in c.members], maxlen=self.K2),
                                        c.seq, deque(c.member_seqs, maxlen=self.K2)))
        return out

    def dump(self) -> str:
        """One record per cluster, oldest first."""
        lines = [f"# prototype bank: {len(self)} clusters, K1={self.K1} K2={self.K2} "
                 f"tau1={self.tau1} tau2={self.tau2} top_k={self.top_k}"]
        for i, c in enumerate(self.clusters):
            lines.append(f"cluster {i} seq={c.seq} members={len(c.members)} "
                         f"member_seqs={','.join(map(str, c.member_seqs))} "
                         f"centroid={','.join(repr(float(v)) for v in c.centroid)}")
        return "\n".join(lines) + "\n"


def bank_state(bank: PrototypeBank) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Flatten a bank into arrays plus string metadata for checkpointing."""
    arrays, meta = {}, {"bank.counter": str(bank._counter), "bank.size": str(len(bank)),
                        "bank.hyper": f"{bank.K1},{bank.K2},{bank.tau1!r},{bank.tau2!r},{bank.top_k}"}
    for i, c in enumerate(bank.clusters):
        arrays[f"bank.{i:03d}.centroid"] = c.centroid
        arrays[f"bank.{i:03d}.members"] = np.stack(c.members)
        meta[f"bank.{i:03d}.seqs"] = ",".join(map(str, [c.seq, *c.member_seqs]))
    return arrays, meta


def bank_from_state(arrays: dict[str, np.ndarray], meta: dict[str, str]) -> PrototypeBank:
    K1, K2, tau1, tau2, top_k = meta["bank.hyper"].split(",")
    bank = PrototypeBank(int(K1), int(K2), float(tau1), float(tau2), int(top_k))
    bank._counter = int(meta["bank.counter"])
    for i in range(int(meta["bank.size"])):
        seq, *mseq = (int(v) for v in meta[f"bank.{i:03d}.seqs"].split(","))
        members = deque([np.array(r) for r in np.atleast_2d(arrays[f"bank.{i:03d}.members"])], maxlen=bank.K2)
        bank.clusters.append(Cluster(np.array(arrays[f"bank.{i:03d}.centroid"]), members, seq,
                                     deque(mseq, maxlen=bank.K2)))
    return bank


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, iters: int = 50, tol: float = 1e-6):
    """Lloyd iterations from a seeded farthest-point start. Returns (centers, labels)."""
    n = len(X)
    first = int(rng.integers(n))
    seeds = [first]
    d = ((X - X[first]) ** 2).sum(1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        seeds.append(nxt)
        d = np.minimum(d, ((X - X[nxt]) ** 2).sum(1))
    centers = X[seeds].copy()
    labels = np.zeros(n, dtype=int)
    for _ in range(iters):
        dist = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = dist.argmin(1)
        new = centers.copy()
        for j in range(k):
            sel = labels == j
            if sel.any():
                new[j] = X[sel].mean(0)
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    return centers, labels


def bank_init(encodings, k_init: int, rng: np.random.Generator, **bank_kw) -> PrototypeBank:
    """k-means over unit-normalized encodings; each cluster keeps its most
    recent K2 assigned vectors and a centroid equal to their normalized mean."""
    X = np.asarray(encodings, float)
    X = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    if len(X) < k_init:
        log.warning("only %d encodings for k_init=%d; reducing k_init", len(X), k_init)
        k_init = len(X)
    bank = PrototypeBank(**bank_kw)
    k_init = min(k_init, bank.K1)
    _, labels = kmeans(X, k_init, rng)
    for j in range(k_init):
        rows = np.flatnonzero(labels == j)
        if rows.size == 0:
            continue
        rows = rows[-bank.K2:]
        seq = bank._next()
        members = deque([X[r] for r in rows], maxlen=bank.K2)
        c = Cluster(X[rows[0]].copy(), members, seq, deque([bank._next() for _ in rows], maxlen=bank.K2))
        c.refresh()
        bank.clusters.append(c)
    return bank


# ---------------------------------------------------------------- read / write

@dataclass
class ReadOutput:
    o: Tensor
    q: Tensor
    indices: np.ndarray
    weights: np.ndarray


class Combine:
    """Dense map [z_t, q_t, q̂_t] → R."""

    def __init__(self, D: int, R: int, rng: np.random.Generator):
        n_in = D + 2 * R
        self.W = Tensor(rng.standard_normal((n_in, R)) / np.sqrt(n_in), requires_grad=True)
        self.d = Tensor(np.zeros(R), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"W": self.W, "d": self.d}


def bank_read(z, enc_q: Encoder, bank: PrototypeBank, combine: Combine,
              training: bool = False, rng=None) -> ReadOutput:
    """Top-K cosine read of the centroids for every step of z (..., L, D)."""
    if len(bank) == 0:
        raise EmptyBankError("prototype bank must be initialized before reading")
    z = ad.as_tensor(z)
    q = enc_q(z, training=training, rng=rng)            # (..., L, R)
    C = bank.centroids()                                 # (J, R) unit rows
    rho = ad.matmul(ad.l2_normalize(q), C.T)             # (..., L, J)
    K = min(bank.top_k, len(C))
    idx = np.argsort(-rho.data, axis=-1, kind="stable")[..., :K]
    w = ad.softmax(ad.take_along_axis(rho, idx, axis=-1), axis=-1)
    c_sel = C[idx]                                       # (..., L, K, R)
    w4 = ad.reshape(w, w.shape[:-1] + (1, K))
    q_hat = ad.matmul(w4, c_sel)
    q_hat = ad.reshape(q_hat, q.shape)
    v = ad.add(ad.matmul(ad.concat([z, q, q_hat], axis=-1), combine.W), combine.d)
    return ReadOutput(ad.add(q, v), q, idx, w.data)


def bank_write(z, enc_p: Encoder, bank: PrototypeBank, n_samples: int,
               rng: np.random.Generator) -> dict[str, int]:
    """Sample n slice end-times per window, encode with E_p, route each."""
    counts = {"member": 0, "cluster": 0, "skip": 0}
    z = np.asarray(z.data if isinstance(z, Tensor) else z, float)
    if z.ndim == 2:
        z = z[None]
    L = z.shape[-2]
    n = min(n_samples, L)
    s = enc_p.cfg.s
    flat = z.reshape((-1,) + z.shape[-2:])
    slices = []
    for zb in flat:
        times = np.sort(rng.choice(L, size=n, replace=False))
        rows = np.maximum(times[:, None] - (s - 1) + np.arange(s)[None], 0)
        slices.append(zb[rows])
    with ad.no_grad():
        p = enc_p(np.concatenate(slices), times=[s - 1]).data[:, 0]
    for row in p:
        counts[bank.write_one(row)] += 1
    return counts
