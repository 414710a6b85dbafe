"""Missing-aware dual-stream SSM layer, the block built around it, and the
stacked forecasting backbone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .ssm import S4Channels, discretize


class ConfigError(ValueError):
    pass


@dataclass
class BlockConfig:
    R: int = 32
    F_ch: int = 64
    n_blocks: int = 2
    dropout_rate: float = 0.1
    H: int = 16
    train_A: bool = False

    def __post_init__(self):
        if self.n_blocks < 1 or self.R < 1 or self.F_ch < 1:
            raise ConfigError(f"invalid block config {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


class MaskEncoder:
    """Per-step ReLU(m W + b), mapping D mask bits to R features."""

    def __init__(self, D: int, R: int, rng: np.random.Generator):
        self.W = Tensor(rng.standard_normal((D, R)) / np.sqrt(D), requires_grad=True)
        self.b = Tensor(np.zeros(R), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}

    def __call__(self, m) -> Tensor:
        m = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=float)
        if not np.all((m == 0) | (m == 1)):
            raise ContractError("mask entries must be 0 or 1")
        return ad.relu(ad.add(ad.matmul(m, self.W), self.b))


def mask_encode(m, encoder: MaskEncoder) -> np.ndarray:
    return encoder(m).data


class DualStreamS4:
    """h_t = Ā h_{t-1} + B̄ o_t + Ē e_t ;  y_t = C h_t + D o_t + F e_t

    with e = mask encoder output, one scalar channel per feature r.
    E starts at zero so a fresh layer behaves as plain S4.
    """

    def __init__(self, R: int, H: int, D_vars: int, rng: np.random.Generator, train_A: bool = False):
        self.ssm = S4Channels(R, H, rng, train_A=train_A)
        self.E = Tensor(np.zeros((R, H)), requires_grad=True)
        self.F = Tensor(np.zeros(R), requires_grad=True)
        self.mask_encoder = MaskEncoder(D_vars, R, rng)

    def params(self) -> dict[str, Tensor]:
        p = dict(self.ssm.params())
        p.update(E=self.E, F=self.F)
        p.update({f"mask_encoder.{k}": v for k, v in self.mask_encoder.params().items()})
        return p

    def kernels(self, L: int) -> tuple[Tensor, Tensor]:
        s = self.ssm
        A_bar, (B_bar, E_bar) = discretize(s.A, s.log_delta, s.B, self.E)
        return ad.ssm_kernel(A_bar, B_bar, s.C, L), ad.ssm_kernel(A_bar, E_bar, s.C, L)

    def __call__(self, o: Tensor, m) -> Tensor:
        return dual_stream_convolution(self, o, m)


def dual_stream_convolution(layer: DualStreamS4, o, m, e: Tensor | None = None) -> Tensor:
    """Two-kernel form: y = K1 * o + K2 * e + D o + F e (kernels carry C)."""
    o = ad.as_tensor(o)
    m_arr = np.asarray(m.data if isinstance(m, Tensor) else m)
    if m_arr.shape[-2] != o.shape[-2]:
        raise ContractError(f"length mismatch: o has {o.shape[-2]} steps, mask {m_arr.shape[-2]}")
    if e is None:
        e = layer.mask_encoder(m_arr)
    L = o.shape[-2]
    k1, k2 = layer.kernels(L)
    y = ad.add(ad.fft_conv(k1, o), ad.fft_conv(k2, e))
    y = ad.add(y, ad.mul(layer.ssm.D, o))
    return ad.add(y, ad.mul(layer.F, e))


def dual_stream_recurrence(layer: DualStreamS4, o, m, e=None) -> np.ndarray:
    """Stepwise reference evaluation; o: (L, R) or (N, L, R)."""
    o = np.asarray(o.data if isinstance(o, Tensor) else o, float)
    m = np.asarray(m.data if isinstance(m, Tensor) else m, float)
    if m.shape[-2] != o.shape[-2]:
        raise ContractError(f"length mismatch: o has {o.shape[-2]} steps, mask {m.shape[-2]}")
    if e is None:
        e = mask_encode(m, layer.mask_encoder)
    e = np.asarray(e, float)
    s = layer.ssm
    with ad.no_grad():
        A_bar, (B_bar, E_bar) = discretize(s.A, s.log_delta, s.B, layer.E)
    A_bar, B_bar, E_bar = A_bar.data, B_bar.data, E_bar.data
    C, D, F = s.C.data, s.D.data, layer.F.data
    lead = o.shape[:-2]
    L, R = o.shape[-2:]
    h = np.zeros(lead + (R, s.H))
    y = np.empty(o.shape)
    for t in range(L):
        ot, et = o[..., t, :], e[..., t, :]
        h = np.einsum("rij,...rj->...ri", A_bar, h) + B_bar * ot[..., None] + E_bar * et[..., None]
        y[..., t, :] = (h * C).sum(-1) + D * ot + F * et
    return y


class MdsBlock:
    """SSM (dual-stream or plain) + residual + LayerNorm, then
    Conv1D(R→F, k=1) + ReLU + dropout, Conv1D(F→R, k=1) + dropout."""

    def __init__(self, cfg: BlockConfig, D_vars: int, rng: np.random.Generator, dual: bool):
        self.cfg = cfg
        self.dual = dual
        if dual:
            self.ssm = DualStreamS4(cfg.R, cfg.H, D_vars, rng, cfg.train_A)
        else:
            self.ssm = S4Channels(cfg.R, cfg.H, rng, cfg.train_A)
        self.ln_g = Tensor(np.ones(cfg.R), requires_grad=True)
        self.ln_b = Tensor(np.zeros(cfg.R), requires_grad=True)
        self.w1 = Tensor(rng.standard_normal((1, cfg.R, cfg.F_ch)) / np.sqrt(cfg.R), requires_grad=True)
        self.b1 = Tensor(np.zeros(cfg.F_ch), requires_grad=True)
        self.w2 = Tensor(rng.standard_normal((1, cfg.F_ch, cfg.R)) / np.sqrt(cfg.F_ch), requires_grad=True)
        self.b2 = Tensor(np.zeros(cfg.R), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        p = {f"ssm.{k}": v for k, v in self.ssm.params().items()}
        p.update(ln_g=self.ln_g, ln_b=self.ln_b, w1=self.w1, b1=self.b1, w2=self.w2, b2=self.b2)
        return p

    def __call__(self, x: Tensor, m=None, training: bool = False, rng=None) -> Tensor:
        y = self.ssm(x, m) if self.dual else self.ssm(x)
        h = ad.layer_norm(ad.add(x, y))
        h = ad.add(ad.mul(h, self.ln_g), self.ln_b)
        h = ad.relu(ad.conv1d(h, self.w1, self.b1))
        h = ad.dropout(h, self.cfg.dropout_rate, rng, training)
        h = ad.conv1d(h, self.w2, self.b2)
        return ad.dropout(h, self.cfg.dropout_rate, rng, training)


def mds_block_forward(block: MdsBlock, layer_input, m, training: bool = False, rng=None) -> Tensor:
    return block(ad.as_tensor(layer_input), m, training, rng)


class Backbone:
    """First block dual-stream (unless ``mask_aware`` is off), the rest plain S4,
    then an affine R→D readout; returns the last ``horizon`` steps."""

    def __init__(self, cfg: BlockConfig, D_vars: int, horizon: int, rng: np.random.Generator,
                 mask_aware: bool = True):
        self.cfg = cfg
        self.horizon = horizon
        self.blocks = [MdsBlock(cfg, D_vars, rng, dual=(i == 0 and mask_aware)) for i in range(cfg.n_blocks)]
        self.W_out = Tensor(rng.standard_normal((cfg.R, D_vars)) / np.sqrt(cfg.R), requires_grad=True)
        self.b_out = Tensor(np.zeros(D_vars), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        p = {}
        for i, blk in enumerate(self.blocks):
            p.update({f"block{i}.{k}": v for k, v in blk.params().items()})
        p.update({"readout.W": self.W_out, "readout.b": self.b_out})
        return p

    def __call__(self, o: Tensor, m=None, training: bool = False, rng=None) -> Tensor:
        L = o.shape[-2]
        if self.horizon > L:
            raise ConfigError(f"horizon {self.horizon} exceeds look-back length {L}")
        h = o
        for blk in self.blocks:
            h = blk(h, m, training, rng)
        y = ad.add(ad.matmul(h, self.W_out), self.b_out)
        if self.horizon == L:
            return y
        return y[..., L - self.horizon:, :]


def backbone_forward(backbone: Backbone, o, m, training: bool = False, rng=None) -> Tensor:
    return backbone(ad.as_tensor(o), m, training, rng)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_HEADER = "# s4m-checkpoint v1"


def save_checkpoint(path, tensors: dict[str, np.ndarray | Tensor], meta: dict[str, str] | None = None) -> None:
    """Text checkpoint: header, optional ``@key=value`` meta lines, then one
    ``name<TAB>shape<TAB>values`` line per tensor (repr floats, exact round trip)."""
    with open(path, "w") as f:
        f.write(CHECKPOINT_HEADER + "\n")
        for k, v in (meta or {}).items():
            f.write(f"@{k}={v}\n")
        for name in sorted(tensors):
            arr = np.asarray(tensors[name].data if isinstance(tensors[name], Tensor) else tensors[name], float)
            shape = "x".join(str(n) for n in arr.shape) or "scalar"
            vals = " ".join(repr(float(x)) for x in arr.reshape(-1))
            f.write(f"{name}\t{shape}\t{vals}\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not an s4m checkpoint (bad header)")
    tensors, meta = {}, {}
    for ln in lines[1:]:
        if ln.startswith("@"):
            k, _, v = ln[1:].partition("=")
            meta[k] = v
            continue
        name, shape, vals = ln.split("\t")
        dims = () if shape == "scalar" else tuple(int(n) for n in shape.split("x"))
        data = np.array([float(x) for x in vals.split()]) if vals else np.zeros(0)
        tensors[name] = data.reshape(dims)
    return tensors, meta
