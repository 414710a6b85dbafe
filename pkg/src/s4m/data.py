"""Series I/O, synthetic generation, block-missing corruption, splitting,
windowing and z-score normalization."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np


class DataError(ValueError):
    """Malformed input data."""


class ConfigError(ValueError):
    pass


@dataclass
class TimeSeriesFrame:
    values: np.ndarray            # (T, D)
    mask: np.ndarray              # (T, D) bool, True = observed
    names: list[str] = field(default_factory=list)
    granularity: str = "1"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise DataError(f"values {self.values.shape} and mask {self.mask.shape} must match (T, D)")
        if not self.names:
            self.names = [f"x{i}" for i in range(self.D)]
        if not np.all(np.isfinite(self.values[self.mask])):
            raise DataError("non-finite value at an observed entry")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def with_mask(self, mask) -> "TimeSeriesFrame":
        return replace(self, values=self.values.copy(), mask=np.asarray(mask, bool))

    def masked_values(self) -> np.ndarray:
        """Values with every hidden entry replaced by 0."""
        return np.where(self.mask, self.values, 0.0)

    def slice(self, start: int, stop: int) -> "TimeSeriesFrame":
        return replace(self, values=self.values[start:stop].copy(), mask=self.mask[start:stop].copy())


# ---------------------------------------------------------------- CSV

def load_csv(path) -> TimeSeriesFrame:
    """Header of variable names, one row per step; empty or NaN cells are missing."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path}: empty file")
    names = [h.strip() for h in rows[0]]
    D = len(names)
    vals = np.zeros((len(rows) - 1, D))
    mask = np.ones((len(rows) - 1, D), dtype=bool)
    for i, row in enumerate(rows[1:]):
        if len(row) != D:
            raise DataError(f"{path}: line {i + 2}: expected {D} cells, got {len(row)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell.lower() == "nan":
                mask[i, j] = False
                continue
            try:
                vals[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: line {i + 2}: non-numeric cell {cell!r}") from None
    return TimeSeriesFrame(vals, mask, names)


def save_csv(frame: TimeSeriesFrame, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(frame.names)
        for v, m in zip(frame.values, frame.mask):
            w.writerow([repr(float(x)) if ok else "" for x, ok in zip(v, m)])


def write_manifest(path, entries: dict) -> None:
    with open(path, "w") as f:
        for k, v in entries.items():
            f.write(f"{k} = {v}\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for ln in f:
            if "=" in ln and not ln.startswith("#"):
                k, _, v = ln.partition("=")
                out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthSpec:
    """Per-variable sinusoids (periods, amplitudes), linear trends, a D×D
    mixing matrix applied across variables, and Gaussian noise sigma."""

    periods: list[float]
    amplitudes: list[float]
    slopes: list[float]
    mixing: np.ndarray | None = None
    sigma: float = 0.1

    @classmethod
    def default(cls, D: int, sigma: float = 0.1) -> "SynthSpec":
        base = [24.0, 48.0, 12.0, 168.0, 36.0, 72.0, 6.0, 96.0]
        periods = [base[i % len(base)] * (1 + i // len(base)) for i in range(D)]
        amps = [1.0 + 0.25 * (i % 3) for i in range(D)]
        slopes = [(0.5 if i % 2 == 0 else -0.3) / 1000.0 for i in range(D)]
        mixing = np.eye(D)
        for i in range(D):
            mixing[i, (i + 1) % D] += 0.3 if D > 1 else 0.0
        return cls(periods, amps, slopes, mixing, sigma)


def synth_generate(T: int, D: int, seed: int, spec: SynthSpec | None = None) -> TimeSeriesFrame:
    spec = spec or SynthSpec.default(D)
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=float)[:, None]
    P = np.asarray(spec.periods, float)[None, :D]
    A = np.asarray(spec.amplitudes, float)[None, :D]
    S = np.asarray(spec.slopes, float)[None, :D]
    base = A * np.sin(2 * np.pi * t / P) + S * t
    mix = np.eye(D) if spec.mixing is None else np.asarray(spec.mixing, float)
    values = base if np.array_equal(mix, np.eye(D)) else base @ mix.T
    if spec.sigma > 0:
        values = values + spec.sigma * rng.standard_normal((T, D))
    return TimeSeriesFrame(values, np.ones((T, D), dtype=bool))


# ---------------------------------------------------------------- block missing

def _block_hits(T: int, anchors: np.ndarray, block_len: int) -> np.ndarray:
    hit = np.zeros(T + block_len, dtype=bool)
    for off in range(block_len):
        hit[anchors + off] = True
    return hit[:T]


def inject_time_point_missing(frame: TimeSeriesFrame, r: float, block_len: int = 5,
                              seed: int = 0) -> TimeSeriesFrame:
    """Draw floor(r·T) anchor steps (uniform, with replacement); hide each
    anchor and the following block_len-1 steps for every variable."""
    if not 0.0 <= r < 1.0:
        raise ConfigError(f"missing rate must lie in [0, 1), got {r}")
    rng = np.random.default_rng(seed)
    n = int(math.floor(r * frame.T))
    hit = _block_hits(frame.T, rng.integers(0, frame.T, size=n), block_len)
    return frame.with_mask(frame.mask & ~hit[:, None])


def inject_variable_missing(frame: TimeSeriesFrame, r: float, block_len: int = 5,
                            seed: int = 0) -> TimeSeriesFrame:
    """Same as time-point missing, drawn independently per variable."""
    if not 0.0 <= r < 1.0:
        raise ConfigError(f"missing rate must lie in [0, 1), got {r}")
    rng = np.random.default_rng(seed)
    n = int(math.floor(r * frame.T))
    mask = frame.mask.copy()
    for d in range(frame.D):
        mask[:, d] &= ~_block_hits(frame.T, rng.integers(0, frame.T, size=n), block_len)
    return frame.with_mask(mask)


def inject_missing(frame, pattern: str, r: float, block_len: int = 5, seed: int = 0) -> TimeSeriesFrame:
    if pattern in ("time-point", "time_point", "time"):
        return inject_time_point_missing(frame, r, block_len, seed)
    if pattern in ("variable", "var"):
        return inject_variable_missing(frame, r, block_len, seed)
    raise ConfigError(f"unknown missing pattern {pattern!r} (expected 'time-point' or 'variable')")


def overall_missing_ratio(frame: TimeSeriesFrame) -> float:
    return float((~frame.mask).sum()) / frame.mask.size


# ---------------------------------------------------------------- split / windows / scaling

def chronological_split(frame: TimeSeriesFrame, ratios=(0.7, 0.1, 0.2)):
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    n_tr = int(round(ratios[0] * frame.T))
    n_va = int(round(ratios[1] * frame.T))
    n_va = min(n_va, frame.T - n_tr)
    return (frame.slice(0, n_tr), frame.slice(n_tr, n_tr + n_va), frame.slice(n_tr + n_va, frame.T))


@dataclass
class WindowPair:
    lookback: np.ndarray
    lookback_mask: np.ndarray
    horizon: np.ndarray
    horizon_mask: np.ndarray
    t0: int


def window_starts(T: int, lookback: int, horizon: int, stride: int = 1) -> np.ndarray:
    if lookback + horizon > T:
        raise ConfigError(f"window of {lookback}+{horizon} steps longer than frame ({T})")
    return np.arange(0, T - lookback - horizon + 1, stride)


def make_windows(frame: TimeSeriesFrame, lookback: int, horizon: int, stride: int = 1) -> list[WindowPair]:
    out = []
    for t0 in window_starts(frame.T, lookback, horizon, stride):
        a, b, c = t0, t0 + lookback, t0 + lookback + horizon
        out.append(WindowPair(frame.values[a:b], frame.mask[a:b], frame.values[b:c], frame.mask[b:c], int(t0)))
    return out


@dataclass
class WindowBatch:
    """Stacked windows. Hidden input entries are zeroed; ``y_true`` holds
    uncorrupted targets when a clean frame is supplied."""

    x: np.ndarray
    m: np.ndarray
    y: np.ndarray
    ym: np.ndarray
    y_true: np.ndarray
    t0: np.ndarray

    def __len__(self):
        return len(self.x)

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.x[idx], self.m[idx], self.y[idx], self.ym[idx], self.y_true[idx], self.t0[idx])


def stack_windows(frame: TimeSeriesFrame, lookback: int, horizon: int, stride: int = 1,
                  clean: TimeSeriesFrame | None = None) -> WindowBatch:
    starts = window_starts(frame.T, lookback, horizon, stride)
    tl = starts[:, None] + np.arange(lookback)[None]
    th = starts[:, None] + lookback + np.arange(horizon)[None]
    v = frame.masked_values()
    m = frame.mask.astype(float)
    truth = (clean.values if clean is not None else v)
    return WindowBatch(v[tl], m[tl], v[th], m[th], truth[th], starts)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, frame: TimeSeriesFrame) -> TimeSeriesFrame:
        vals = np.where(frame.mask, (frame.values - self.mean) / self.std, 0.0)
        return replace(frame, values=vals, mask=frame.mask.copy())

    def apply_dense(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def fit_norm(train: TimeSeriesFrame, floor: float = 1e-8) -> NormStats:
    mean = np.zeros(train.D)
    std = np.ones(train.D)
    for d in range(train.D):
        obs = train.values[train.mask[:, d], d]
        if obs.size:
            mean[d] = obs.mean()
            std[d] = max(obs.std(), floor)
    return NormStats(mean, std)


def normalize(train: TimeSeriesFrame, others=()):
    """z-score every frame with statistics of the observed training entries."""
    stats = fit_norm(train)
    return stats.apply(train), [stats.apply(f) for f in others], stats


def denormalize(frame: TimeSeriesFrame, stats: NormStats) -> TimeSeriesFrame:
    return replace(frame, values=np.where(frame.mask, stats.invert(frame.values), 0.0), mask=frame.mask.copy())
