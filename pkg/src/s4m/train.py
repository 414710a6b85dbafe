"""Training (bank init, read, write, momentum, backbone, masked loss, Adam),
inference, metrics, imputation baselines and ablations."""
from __future__ import annotations

import csv
import logging
import time
import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .atpm import (Combine, DecayParams, Encoder, EncoderConfig, EmptyBankError, PrototypeBank,
                   bank_init, bank_read, bank_write, extract_local_stats, momentum_update)
from .autodiff import NumericError, Tape, Tensor
from .data import TimeSeriesFrame, WindowBatch
from .mds import Backbone, BlockConfig

log = logging.getLogger(__name__)

METHODS = ("s4m", "s4_mean", "s4_ffill", "s4_decay", "s4m_no_mask", "s4m_no_atpm")


class TrainingError(RuntimeError):
    pass


def derive_seed(root: int, label: str) -> int:
    """Stable sub-seed for a named stage."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(label.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    gamma: float = 0.99
    K1: int = 30
    K2: int = 10
    top_k: int = 3
    tau1: float = 0.9
    tau2: float = 0.6
    s: int = 16
    W_emb: int = 4
    n_samples: int = 4
    k_init: int = 4
    H: int = 16
    R: int = 32
    F_ch: int = 64
    n_blocks: int = 2
    dropout: float = 0.1
    train_A: bool = False
    lookback: int = 96
    horizon: int = 24
    train_stride: int = 1
    eval_stride: int = 1
    shuffle: bool = False
    seed: int = 0
    no_mask: bool = False
    no_atpm: bool = False
    loss_mask: bool = True
    decay_lambda: float = 10.0

    def __post_init__(self):
        if self.horizon > self.lookback:
            raise ValueError(f"horizon {self.horizon} must not exceed lookback {self.lookback}")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.R, self.F_ch, self.n_blocks, self.dropout, self.H, self.train_A)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.s, self.W_emb, self.R, self.H, self.dropout)


# ---------------------------------------------------------------- loss / metrics

_empty_mask_warnings = 0


def masked_mse_loss(pred, target, mask, use_mask: bool = True) -> Tensor:
    """Σ mask∘(pred-target)² / max(1, Σ mask). Hidden targets are never read."""
    global _empty_mask_warnings
    pred = ad.as_tensor(pred)
    mask = np.ones(pred.shape) if not use_mask else np.asarray(mask, float)
    target = np.where(mask == 1, np.asarray(target, float), 0.0)
    n = mask.sum()
    if n == 0:
        _empty_mask_warnings += 1
        log.warning("masked loss over an empty mask (%d so far)", _empty_mask_warnings)
    diff = ad.mul(ad.sub(pred, target), mask)
    return ad.scale(ad.sum(ad.mul(diff, diff)), 1.0 / max(1.0, n))


def metrics(pred, truth) -> tuple[float, float]:
    err = np.asarray(pred, float) - np.asarray(truth, float)
    return float(np.abs(err).mean()), float((err ** 2).mean())


def masked_metrics(pred, truth, mask) -> tuple[float, float]:
    mask = np.asarray(mask, bool)
    err = (np.asarray(pred, float) - np.where(mask, truth, 0.0))[mask]
    if err.size == 0:
        return float("nan"), float("nan")
    return float(np.abs(err).mean()), float((err ** 2).mean())


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros(p.shape))
            v = self.v.get(name, np.zeros(p.shape))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            p.data[...] = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Adam, lr: float | None = None) -> Adam:
    if lr is not None:
        state.lr = lr
    state.step(params, grads)
    return state


# ---------------------------------------------------------------- models

def _prefixed(prefix: str, d: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in d.items()}


class S4M:
    """Local stats → prototype read (or a linear map when ``no_atpm``) →
    dual-stream backbone."""

    def __init__(self, D: int, cfg: TrainConfig, rng: np.random.Generator):
        self.D, self.cfg = D, cfg
        ecfg = cfg.encoder_config()
        self.decay = DecayParams(D)
        self.enc_q = Encoder(D, ecfg, rng)
        self.enc_p = Encoder(D, ecfg, rng)
        for k, p in self.enc_p.params().items():
            p.data[...] = self.enc_q.params()[k].data
            p.requires_grad = False
        self.combine = Combine(D, cfg.R, rng)
        self.proj_W = Tensor(rng.standard_normal((D, cfg.R)) / np.sqrt(D), requires_grad=True)
        self.proj_b = Tensor(np.zeros(cfg.R), requires_grad=True)
        self.backbone = Backbone(cfg.block_config(), D, cfg.horizon, rng, mask_aware=True)
        self.bank: PrototypeBank | None = None
        self.bank_calls = 0
        if cfg.no_mask:
            dual = self.backbone.blocks[0].ssm
            for t in (dual.E, dual.F, dual.mask_encoder.W, dual.mask_encoder.b):
                t.data[...] = 0.0
                t.requires_grad = False

    @property
    def theta_q(self) -> dict[str, Tensor]:
        return self.enc_q.params()

    @property
    def theta_p(self) -> dict[str, Tensor]:
        return self.enc_p.params()

    def all_tensors(self) -> dict[str, Tensor]:
        p = {}
        p.update(_prefixed("stats", self.decay.params()))
        p.update(_prefixed("atpm.query", self.enc_q.params()))
        p.update(_prefixed("atpm.proto", self.enc_p.params()))
        p.update(_prefixed("atpm.combine", self.combine.params()))
        p.update({"input.W": self.proj_W, "input.b": self.proj_b})
        p.update(self.backbone.params())
        return p

    def trainable(self) -> dict[str, Tensor]:
        skip_atpm = ("atpm.",) if self.cfg.no_atpm else ("input.",)
        return {k: v for k, v in self.all_tensors().items()
                if v.requires_grad and not k.startswith(skip_atpm)}

    def new_bank(self) -> PrototypeBank:
        c = self.cfg
        return PrototypeBank(c.K1, c.K2, c.tau1, c.tau2, c.top_k)

    def init_bank(self, z: np.ndarray, rng) -> None:
        self.bank_calls += 1
        c = self.cfg
        with ad.no_grad():
            enc = self.enc_p(z).data
        self.bank = bank_init(enc.reshape(-1, enc.shape[-1]), c.k_init, rng,
                              K1=c.K1, K2=c.K2, tau1=c.tau1, tau2=c.tau2, top_k=c.top_k)

    def represent(self, x, m, training=False, rng=None):
        z = extract_local_stats(x, m, self.decay, fallback=0.0).z
        if self.cfg.no_atpm:
            return z, ad.add(ad.matmul(z, self.proj_W), self.proj_b), None
        if self.bank is None or len(self.bank) == 0:
            raise EmptyBankError("model has no prototype bank; train it first")
        self.bank_calls += 1
        read = bank_read(z, self.enc_q, self.bank, self.combine, training, rng)
        return z, read.o, read

    def forward(self, x, m, training=False, rng=None) -> Tensor:
        _, o, _ = self.represent(x, m, training, rng)
        return self.backbone(o, m, training, rng)


class S4Baseline:
    """Plain S4 stack on an imputed input; mask is not seen."""

    def __init__(self, D: int, cfg: TrainConfig, rng: np.random.Generator, method: str):
        self.D, self.cfg, self.method = D, cfg, method
        self.proj_W = Tensor(rng.standard_normal((D, cfg.R)) / np.sqrt(D), requires_grad=True)
        self.proj_b = Tensor(np.zeros(cfg.R), requires_grad=True)
        self.backbone = Backbone(cfg.block_config(), D, cfg.horizon, rng, mask_aware=False)
        self.bank = None
        self.bank_calls = 0

    def all_tensors(self) -> dict[str, Tensor]:
        p = {"input.W": self.proj_W, "input.b": self.proj_b}
        p.update(self.backbone.params())
        return p

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.all_tensors().items() if v.requires_grad}

    def forward(self, x, m, training=False, rng=None) -> Tensor:
        o = ad.add(ad.matmul(np.asarray(x, float), self.proj_W), self.proj_b)
        return self.backbone(o, None, training, rng)


# ---------------------------------------------------------------- imputation baselines

def baseline_impute(frame: TimeSeriesFrame, method: str, train_mean=None, lam: float = 10.0) -> TimeSeriesFrame:
    """Fill hidden entries by the training mean, last observation, or
    w·last + (1-w)·mean with w = exp(-δ/λ), δ = steps since last observation."""
    if method not in ("mean", "ffill", "decay"):
        raise ValueError(f"unknown imputation method {method!r}")
    mean = np.zeros(frame.D) if train_mean is None else np.asarray(train_mean, float)
    vals = frame.masked_values()
    out = vals.copy()
    if method == "mean":
        out = np.where(frame.mask, vals, mean)
    else:
        for d in range(frame.D):
            last, gap = None, 0
            for t in range(frame.T):
                if frame.mask[t, d]:
                    last, gap = vals[t, d], 0
                    continue
                gap += 1
                if last is None:
                    out[t, d] = mean[d]
                elif method == "ffill":
                    out[t, d] = last
                else:
                    w = np.exp(-gap / lam) if lam > 0 else 0.0
                    out[t, d] = w * last + (1 - w) * mean[d]
    return TimeSeriesFrame(out, np.ones_like(frame.mask), list(frame.names), frame.granularity)


# ---------------------------------------------------------------- training

@dataclass
class MetricsReport:
    method: str
    test_mae: float = float("nan")
    test_mse: float = float("nan")
    test_mae_observed: float = float("nan")
    test_mse_observed: float = float("nan")
    val_mse: float = float("nan")
    best_epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def rows(self) -> list[tuple]:
        r = [("test", "mae", self.test_mae, self.best_epoch), ("test", "mse", self.test_mse, self.best_epoch),
             ("test", "mae_observed", self.test_mae_observed, self.best_epoch),
             ("test", "mse_observed", self.test_mse_observed, self.best_epoch),
             ("val", "mse", self.val_mse, self.best_epoch)]
        for h in self.history:
            r.append(("train", "loss", h["train_loss"], h["epoch"]))
            r.append(("val", "mse", h["val_mse"], h["epoch"]))
        return r


def make_model(method: str, D: int, cfg: TrainConfig):
    rng = np.random.default_rng(derive_seed(cfg.seed, "init"))
    if method in ("s4m", "s4m_no_mask", "s4m_no_atpm"):
        c = replace(cfg, no_mask=cfg.no_mask or method == "s4m_no_mask",
                    no_atpm=cfg.no_atpm or method == "s4m_no_atpm")
        return S4M(D, c, rng)
    if method in ("s4_mean", "s4_ffill", "s4_decay"):
        return S4Baseline(D, cfg, rng, method)
    raise ValueError(f"unknown method {method!r}")


class Trainer:
    """Runs the per-batch pipeline and early stopping for one model.

    ``before_step`` / ``after_step`` callbacks receive the trainer; they are
    meant for instrumentation and must not mutate parameters.
    """

    def __init__(self, model, cfg: TrainConfig):
        self.model, self.cfg = model, cfg
        self.opt = Adam(cfg.lr)
        self.rng_bank = np.random.default_rng(derive_seed(cfg.seed, "bank"))
        self.rng_drop = np.random.default_rng(derive_seed(cfg.seed, "dropout"))
        self.rng_order = np.random.default_rng(derive_seed(cfg.seed, "order"))
        self.before_step: list = []
        self.after_step: list = []
        self.epoch = 0
        self.batch_index = 0
        self.last_grads: dict[str, np.ndarray] = {}
        self.last_tape: Tape | None = None

    @property
    def is_s4m(self) -> bool:
        return isinstance(self.model, S4M)

    def step(self, batch: WindowBatch) -> float:
        """One optimisation step; returns the loss."""
        for cb in self.before_step:
            cb(self)
        model, cfg = self.model, self.cfg
        params = model.trainable()
        with Tape() as tape:
            try:
                if self.is_s4m:
                    z, o, _ = self._represent_and_update(batch)
                    pred = model.backbone(o, batch.m, True, self.rng_drop)
                else:
                    pred = model.forward(batch.x, batch.m, True, self.rng_drop)
                loss = masked_mse_loss(pred, batch.y, batch.ym, cfg.loss_mask)
            except NumericError as e:
                raise TrainingError(f"non-finite value at epoch {self.epoch}, batch {self.batch_index}, "
                                    f"op {e.op}") from e
        names = {id(v): k for k, v in params.items()}
        leaf = tape.backward(loss, params.values())
        grads = {names[id(p)]: g for p, g in leaf.items() if id(p) in names}
        self.last_grads, self.last_tape = grads, tape
        self.opt.step(params, grads)
        for cb in self.after_step:
            cb(self)
        return loss.item()

    def _represent_and_update(self, batch):
        model, cfg = self.model, self.model.cfg
        stats = extract_local_stats(batch.x, batch.m, model.decay, fallback=0.0)
        z = stats.z
        if model.cfg.no_atpm:
            return z, ad.add(ad.matmul(z, model.proj_W), model.proj_b), None
        if model.bank is None:
            model.init_bank(z.data, self.rng_bank)
        model.bank_calls += 1
        read = bank_read(z, model.enc_q, model.bank, model.combine, True, self.rng_drop)
        with ad.no_grad():
            bank_write(z.data, model.enc_p, model.bank, cfg.n_samples, self.rng_bank)
            momentum_update(model.theta_p, model.theta_q, cfg.gamma)
        return z, read.o, read

    def predict(self, batch: WindowBatch, chunk: int = 128) -> np.ndarray:
        return predict(self.model, batch, chunk)

    def fit(self, train: WindowBatch, val: WindowBatch | None = None) -> MetricsReport:
        cfg = self.cfg
        report = MetricsReport(getattr(self.model, "method", "s4m"))
        best, best_state, bad = np.inf, None, 0
        n = len(train)
        if n == 0:
            raise TrainingError("no training windows")
        for ep in range(1, cfg.max_epochs + 1):
            self.epoch = ep
            t_start = time.perf_counter()
            order = self.rng_order.permutation(n) if cfg.shuffle else np.arange(n)
            losses = []
            for bi, s in enumerate(range(0, n, cfg.batch_size)):
                self.batch_index = bi
                losses.append(self.step(train.take(order[s:s + cfg.batch_size])))
            val_mse = float("nan")
            if val is not None and len(val):
                pred = self.predict(val)
                val_mse = masked_metrics(pred, val.y, val.ym)[1]
            report.history.append({"epoch": ep, "train_loss": float(np.mean(losses)), "val_mse": val_mse,
                                   "seconds": time.perf_counter() - t_start})
            score = val_mse if np.isfinite(val_mse) else float(np.mean(losses))
            if score < best:
                best, bad = score, 0
                best_state = self.snapshot()
                report.best_epoch, report.val_mse = ep, val_mse
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
        if best_state is not None:
            self.restore(best_state)
        return report

    def snapshot(self):
        m = self.model
        return ({k: v.data.copy() for k, v in m.all_tensors().items()},
                m.bank.copy() if getattr(m, "bank", None) is not None else None)

    def restore(self, state) -> None:
        arrays, bank = state
        for k, v in self.model.all_tensors().items():
            v.data[...] = arrays[k]
        if bank is not None:
            self.model.bank = bank


def predict(model, batch: WindowBatch, chunk: int = 128) -> np.ndarray:
    """Inference: read-only bank, no writes, no momentum, dropout off."""
    if isinstance(model, S4M) and not model.cfg.no_atpm and (model.bank is None or len(model.bank) == 0):
        raise EmptyBankError("prototype bank is empty; train the model first")
    outs = []
    with ad.no_grad():
        for s in range(0, len(batch), chunk):
            sl = slice(s, s + chunk)
            outs.append(model.forward(batch.x[sl], batch.m[sl], training=False).data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------- experiments

@dataclass
class PreparedData:
    train: WindowBatch
    val: WindowBatch
    test: WindowBatch
    train_mean: np.ndarray


def prepare_data(corrupted: TimeSeriesFrame, clean: TimeSeriesFrame | None, cfg: TrainConfig,
                 impute: str | None = None, ratios=(0.7, 0.1, 0.2)) -> PreparedData:
    """Split, normalize with observed training statistics, optionally impute
    inputs, and window each split independently."""
    from .data import chronological_split, fit_norm, stack_windows

    splits = chronological_split(corrupted, ratios)
    stats = fit_norm(splits[0])
    normed = [stats.apply(f) for f in splits]
    if clean is not None:
        csplits = chronological_split(clean, ratios)
        clean_n = [TimeSeriesFrame(stats.apply_dense(f.values), np.ones_like(f.mask)) for f in csplits]
    else:
        clean_n = [None] * 3
    train_mean = np.zeros(corrupted.D)
    out = []
    for i, (f, c) in enumerate(zip(normed, clean_n)):
        stride = cfg.train_stride if i == 0 else cfg.eval_stride
        wb = stack_windows(f, cfg.lookback, cfg.horizon, stride, clean=c)
        if impute is not None:
            filled = baseline_impute(f, impute, train_mean, cfg.decay_lambda)
            wf = stack_windows(filled, cfg.lookback, cfg.horizon, stride)
            wb = WindowBatch(wf.x, wf.m, wb.y, wb.ym, wb.y_true, wb.t0)
        out.append(wb)
    return PreparedData(out[0], out[1], out[2], train_mean)


def run_method(method: str, corrupted: TimeSeriesFrame, clean: TimeSeriesFrame | None,
               cfg: TrainConfig) -> tuple[MetricsReport, object]:
    impute = {"s4_mean": "mean", "s4_ffill": "ffill", "s4_decay": "decay"}.get(method)
    data = prepare_data(corrupted, clean, cfg, impute)
    model = make_model(method, corrupted.D, cfg)
    if isinstance(model, S4Baseline):
        model.method = method
    trainer = Trainer(model, cfg)
    report = trainer.fit(data.train, data.val)
    report.method = method
    pred = predict(model, data.test)
    report.test_mae, report.test_mse = metrics(pred, data.test.y_true)
    report.test_mae_observed, report.test_mse_observed = masked_metrics(pred, data.test.y, data.test.ym)
    return report, model


def train(cfg: TrainConfig, corrupted: TimeSeriesFrame, clean: TimeSeriesFrame | None = None):
    """Full S4M (honouring the ablation flags in ``cfg``)."""
    method = "s4m_no_mask" if cfg.no_mask else ("s4m_no_atpm" if cfg.no_atpm else "s4m")
    return run_method(method, corrupted, clean, cfg)


def run_ablation(cfg: TrainConfig, corrupted: TimeSeriesFrame, clean: TimeSeriesFrame | None = None) -> MetricsReport:
    return train(cfg, corrupted, clean)[0]


def compare(cfg: TrainConfig, corrupted: TimeSeriesFrame, clean: TimeSeriesFrame | None = None,
            methods=METHODS) -> list[MetricsReport]:
    return [run_method(m, corrupted, clean, cfg)[0] for m in methods]


# ---------------------------------------------------------------- CSV reports

def write_metrics_csv(path, reports) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "split", "metric", "value", "epoch"])
        for r in reports:
            for split, metric, value, epoch in r.rows():
                w.writerow([r.method, split, metric, repr(float(value)), epoch])


def write_comparison_csv(path, reports) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "MAE", "MSE"])
        for r in reports:
            w.writerow([r.method, repr(r.test_mae), repr(r.test_mse)])


def write_timing_csv(path, reports) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "epoch", "seconds"])
        for r in reports:
            for h in r.history:
                w.writerow([r.method, h["epoch"], f"{h['seconds']:.3f}"])
