"""Dataset ingestion, chronological splitting, windowing, and synthetic
generators.

Two CSV layouts are supported. A series file has a `timestamp` column and
one numeric column per channel. A stock panel file has one row per
(date, asset) with six price features, a next-day return label, and
tradability flags. Loaders validate finiteness and ordering; generators
are pure functions of their arguments and a seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .model import PriorParams, prior_params
from .seeding import derive_seed

# median timestamp spacing (seconds) -> frequency label
_SPACING_LABELS = {
    600: "10min",
    900: "15min",
    3600: "1h",
    86400: "1day",
    604800: "1week",
}

PANEL_COLUMNS = ("date", "asset", "f1", "f2", "f3", "f4", "f5", "f6",
                 "label", "suspended", "limit")


# ---------------------------------------------------------------------------
# series container and loader
# ---------------------------------------------------------------------------

@dataclass
class SeriesMatrix:
    """A (D, T) block of aligned channels with optional timestamps."""

    values: np.ndarray
    channels: tuple
    timestamps: np.ndarray | None = None
    frequency: str | None = None
    start_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"series values must be 2-d (D, T), got {self.values.shape}")
        if len(self.channels) != self.values.shape[0]:
            raise ValueError(f"{len(self.channels)} channel names for "
                             f"{self.values.shape[0]} rows")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def segment(self, start: int, stop: int) -> "SeriesMatrix":
        ts = self.timestamps[start:stop] if self.timestamps is not None else None
        return SeriesMatrix(self.values[:, start:stop], self.channels, ts,
                            self.frequency, self.start_index + start)


def infer_frequency(timestamps: np.ndarray) -> str | None:
    """Median spacing mapped to a known label; None when unrecognized."""
    if timestamps is None or len(timestamps) < 2:
        return None
    if not np.issubdtype(np.asarray(timestamps).dtype, np.datetime64):
        return None
    deltas = np.diff(timestamps.astype("datetime64[s]").astype(np.int64))
    med = int(np.median(deltas))
    return _SPACING_LABELS.get(med)


def load_series(path, frequency: str | None = None) -> SeriesMatrix:
    """Read a `timestamp,<channels...>` CSV into channel-major form.

    Rejects NaN cells (naming the first offending data row) and
    non-increasing timestamps. Frequency comes from the argument when
    given, otherwise from the median timestamp spacing.
    """
    frame = pd.read_csv(path)
    if frame.shape[1] < 2:
        raise ValueError(f"{path}: need a timestamp column plus at least one channel")
    channels = tuple(frame.columns[1:])
    values = frame.iloc[:, 1:].to_numpy(dtype=np.float64).T  # (D, T)
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.argwhere(bad.any(axis=0))[0][0])
        raise ValueError(f"{path}: non-finite value at data row {row}")

    raw_ts = frame.iloc[:, 0]
    if pd.api.types.is_numeric_dtype(raw_ts):
        # plain positional index, not wall-clock time
        ts = None
        order = np.diff(raw_ts.to_numpy(dtype=np.float64))
    else:
        try:
            ts = pd.to_datetime(raw_ts).to_numpy()
        except (ValueError, TypeError):
            ts = None
        order = (np.diff(ts.astype("datetime64[s]").astype(np.int64))
                 if ts is not None else np.array([]))
    if len(order) and order.min() <= 0:
        raise ValueError(f"{path}: timestamps must be strictly increasing")
    freq = frequency if frequency is not None else infer_frequency(ts)
    return SeriesMatrix(values, channels, ts, freq)


def save_series(path, series: SeriesMatrix) -> None:
    if series.timestamps is not None:
        stamp = pd.Series(series.timestamps).dt.strftime("%Y-%m-%d %H:%M:%S")
    else:
        stamp = pd.Series(np.arange(series.length))
    frame = pd.DataFrame({"timestamp": stamp})
    for i, name in enumerate(series.channels):
        frame[name] = series.values[i]
    frame.to_csv(path, index=False, float_format="%.10g")


@dataclass(frozen=True)
class DatasetSpec:
    """How to slice and window one dataset."""

    path: str = ""
    frequency: str | None = None
    ratios: tuple = (6, 2, 2)
    input_window: int = 0
    horizon: int = 1
    rates: tuple | None = None

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"ratios must be three non-negative numbers, got {self.ratios}")
        if sum(self.ratios) <= 0:
            raise ValueError("ratios must not all be zero")


# ---------------------------------------------------------------------------
# splitting and windowing
# ---------------------------------------------------------------------------

def split_lengths(t_len: int, ratios) -> tuple[int, int, int]:
    """Segment lengths: floor for train/valid, remainder goes to test."""
    total = float(sum(ratios))
    n_train = int(t_len * ratios[0] / total)
    n_valid = int(t_len * ratios[1] / total)
    n_test = t_len - n_train - n_valid
    if min(n_train, n_valid, n_test) <= 0:
        raise ValueError(f"empty split: lengths ({n_train}, {n_valid}, {n_test}) "
                         f"from T={t_len}, ratios {tuple(ratios)}")
    return n_train, n_valid, n_test


def chronological_split(series: SeriesMatrix, ratios):
    """Contiguous train/valid/test segments in temporal order."""
    n_train, n_valid, _ = split_lengths(series.length, ratios)
    return (series.segment(0, n_train),
            series.segment(n_train, n_train + n_valid),
            series.segment(n_train + n_valid, series.length))


def window_starts(t_len: int, input_len: int, horizon: int) -> np.ndarray:
    """Stride-1 window start indices; count = t_len - input_len - horizon + 1."""
    if input_len <= 0:
        raise ValueError(f"input length must be positive, got {input_len}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    count = t_len - input_len - horizon + 1
    if count <= 0:
        raise ValueError(f"segment of length {t_len} too short for input "
                         f"{input_len} + horizon {horizon}")
    return np.arange(count)


def make_windows(values: np.ndarray, input_len: int, horizon: int):
    """All (X, Y) pairs over a (D, T) block.

    Returns (X, Y, starts) with X of shape (N, D, input_len) and Y of
    shape (N, D, horizon); window i covers columns
    [starts[i], starts[i] + input_len) and its target the next `horizon`.
    """
    values = np.asarray(values, dtype=np.float64)
    starts = window_starts(values.shape[1], input_len, horizon)
    x = np.stack([values[:, s:s + input_len] for s in starts])
    y = np.stack([values[:, s + input_len:s + input_len + horizon] for s in starts])
    return x, y, starts


def context_window_starts(seg_start: int, seg_end: int, input_len: int,
                          horizon: int) -> np.ndarray:
    """Absolute starts of windows whose targets lie inside [seg_start, seg_end).

    Inputs may reach back before `seg_start` (the usual evaluation
    protocol); starts below 0 are dropped.
    """
    if input_len <= 0 or horizon <= 0:
        raise ValueError("input length and horizon must be positive")
    first_target = max(seg_start, input_len)
    last_target = seg_end - horizon
    if last_target < first_target:
        raise ValueError(f"segment [{seg_start}, {seg_end}) too short for "
                         f"horizon {horizon}")
    return np.arange(first_target - input_len, last_target - input_len + 1)


def pad_for_dilation(x: np.ndarray, kernel: int, rate: int) -> np.ndarray:
    """Prepend (kernel-1)*rate zero columns along the time axis."""
    x = np.asarray(x, dtype=np.float64)
    pad = (kernel - 1) * rate
    if pad < 0:
        raise ValueError(f"negative pad from kernel {kernel}, rate {rate}")
    if pad == 0:
        return x.copy()
    width = [(0, 0)] * (x.ndim - 1) + [(pad, 0)]
    return np.pad(x, width)


# ---------------------------------------------------------------------------
# synthetic series with known factors
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTruth:
    """Ground truth behind a generated series."""

    factors: np.ndarray        # (K, L, T)
    mixing: np.ndarray         # (D, K*L)
    bias: np.ndarray           # (D,)
    noise_std: float
    prior: PriorParams

    def clean_observations(self) -> np.ndarray:
        k, l, t = self.factors.shape
        return self.mixing @ self.factors.reshape(k * l, t) + self.bias[:, None]


def generate_synthetic_identifiable(seed: int, n_components: int = 2,
                                    n_factors: int = 2, n_channels: int = 4,
                                    t_len: int = 2000, noise_std: float = 0.05,
                                    identity_mix: bool = False,
                                    prior_seed: int = 101):
    """Series whose latent factors follow the hash-derived conditional prior.

    Factors are sampled from the prior at each time index; observations are
    an injective affine mix plus isotropic noise. The prior table depends
    only on (shape arguments, prior_seed), so varying `seed` resamples the
    factors under a fixed prior.
    """
    n_latent = n_components * n_factors
    if n_channels < n_latent:
        raise ValueError(f"need n_channels >= {n_latent} for an injective mix")
    prior = prior_params(np.arange(t_len), n_components, n_factors, prior_seed)
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "synth-factors")))
    factors = prior.mean + prior.std * rng.standard_normal(prior.mean.shape)

    if identity_mix:
        if n_channels != n_latent:
            raise ValueError("identity mix needs n_channels == components*factors")
        mixing = np.eye(n_latent)
        bias = np.zeros(n_channels)
    else:
        mix_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "synth-mix")))
        mixing = mix_rng.standard_normal((n_channels, n_latent))
        while np.linalg.matrix_rank(mixing) < n_latent:  # essentially never loops
            mixing = mix_rng.standard_normal((n_channels, n_latent))
        bias = 0.1 * mix_rng.standard_normal(n_channels)

    truth = SyntheticTruth(factors, mixing, bias, noise_std, prior)
    clean = truth.clean_observations()
    noise_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "synth-noise")))
    observed = clean + noise_std * noise_rng.standard_normal(clean.shape)
    names = tuple(f"x{i + 1}" for i in range(n_channels))
    return truth, SeriesMatrix(observed, names)


# ---------------------------------------------------------------------------
# synthetic stock panel
# ---------------------------------------------------------------------------

@dataclass
class StockPanel:
    """Per-asset daily features, next-day return labels, tradability flags.

    features[a, :, t] holds (close, open, high, low, volume, vwap) for
    asset a on day t; labels[a, t] = (close[t+1] - close[t]) / close[t].
    """

    dates: np.ndarray          # (T,) datetime64
    assets: tuple
    features: np.ndarray       # (A, 6, T)
    labels: np.ndarray         # (A, T)
    suspended: np.ndarray      # (A, T) bool
    limit: np.ndarray          # (A, T) bool

    def __post_init__(self):
        a, d, t = self.features.shape
        if d != 6:
            raise ValueError(f"panel needs 6 features per asset, got {d}")
        for name in ("labels", "suspended", "limit"):
            arr = getattr(self, name)
            if arr.shape != (a, t):
                raise ValueError(f"{name} shape {arr.shape} != ({a}, {t})")

    @property
    def n_assets(self) -> int:
        return self.features.shape[0]

    @property
    def n_days(self) -> int:
        return self.features.shape[2]

    def closes(self) -> np.ndarray:
        return self.features[:, 0, :]


def generate_synthetic_stock_panel(seed: int, n_assets: int = 20,
                                   n_days: int = 160, noise_std: float = 0.01,
                                   suspension_fraction: float = 0.02,
                                   limit_threshold: float = 0.095) -> StockPanel:
    """Price paths with weekly (period 5) and monthly (period 20) seasonality.

    Log prices follow drift + two sinusoids + a scaled random walk; with
    noise_std 0 the path is the pure seasonal formula. Labels come from the
    generated closes themselves. Suspensions are seeded Bernoulli draws;
    the limit flag marks days whose move meets `limit_threshold`.
    """
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "panel")))
    t = np.arange(n_days + 1, dtype=np.float64)

    base = rng.uniform(10.0, 100.0, size=n_assets)
    drift = rng.normal(0.0, 2e-4, size=n_assets)
    amp5 = rng.uniform(0.01, 0.05, size=n_assets)
    amp20 = rng.uniform(0.02, 0.08, size=n_assets)
    ph5 = rng.uniform(0.0, 2 * np.pi, size=n_assets)
    ph20 = rng.uniform(0.0, 2 * np.pi, size=n_assets)

    log_p = (np.log(base)[:, None]
             + drift[:, None] * t
             + amp5[:, None] * np.sin(2 * np.pi * t / 5.0 + ph5[:, None])
             + amp20[:, None] * np.sin(2 * np.pi * t / 20.0 + ph20[:, None]))
    walk = noise_std * np.cumsum(rng.standard_normal((n_assets, n_days + 1)), axis=1)
    closes_ext = np.exp(log_p + walk)            # (A, n_days+1)

    closes = closes_ext[:, :-1]
    labels = (closes_ext[:, 1:] - closes) / closes

    opens = np.concatenate([closes[:, :1], closes_ext[:, :n_days - 1]], axis=1)
    spread = np.abs(rng.normal(0.0, noise_std, size=closes.shape))
    highs = np.maximum(opens, closes) * (1.0 + spread)
    lows = np.minimum(opens, closes) * (1.0 - spread)
    volume = (1.0 + 0.3 * np.sin(2 * np.pi * np.arange(n_days) / 5.0)
              )[None, :] * rng.uniform(0.5, 2.0, size=(n_assets, 1))
    vwap = (highs + lows + closes) / 3.0
    features = np.stack([closes, opens, highs, lows,
                         np.broadcast_to(volume, closes.shape), vwap], axis=1)

    suspended = rng.random((n_assets, n_days)) < suspension_fraction
    day_move = np.abs(closes / opens - 1.0)
    limit = day_move >= limit_threshold

    dates = (np.datetime64("2020-01-01") + np.arange(n_days)).astype("datetime64[D]")
    assets = tuple(f"A{i:03d}" for i in range(n_assets))
    return StockPanel(dates, assets, features, labels, suspended, limit)


def ratio_features(panel: StockPanel) -> StockPanel:
    """Level-free view of a price panel: returns and intraday ratios.

    Channels become (close/prev_close - 1, open/close - 1, high/close - 1,
    low/close - 1, vwap/close - 1, volume over its trailing 5-day mean - 1);
    the first day's return is 0 by convention and the volume mean uses the
    days actually available. Labels, dates, and tradability flags are
    shared with the input panel.
    """
    closes, opens, highs, lows, volume, vwap = (panel.features[:, i]
                                                for i in range(6))
    prev = np.concatenate([closes[:, :1], closes[:, :-1]], axis=1)
    csum = np.cumsum(volume, axis=1)
    shifted = np.concatenate([np.zeros((panel.n_assets, 5)), csum[:, :-5]],
                             axis=1)[:, :panel.n_days]
    count = np.minimum(np.arange(panel.n_days) + 1, 5).astype(np.float64)
    vol_mean = (csum - shifted) / count
    feats = np.stack([closes / prev - 1.0,
                      opens / closes - 1.0,
                      highs / closes - 1.0,
                      lows / closes - 1.0,
                      vwap / closes - 1.0,
                      volume / np.maximum(vol_mean, 1e-12) - 1.0], axis=1)
    return StockPanel(panel.dates, panel.assets, feats, panel.labels,
                      panel.suspended, panel.limit)


def save_stock_panel(path, panel: StockPanel) -> None:
    rows = []
    date_str = np.datetime_as_string(panel.dates, unit="D")
    for a, asset in enumerate(panel.assets):
        for t in range(panel.n_days):
            rows.append((date_str[t], asset, *panel.features[a, :, t],
                         panel.labels[a, t], int(panel.suspended[a, t]),
                         int(panel.limit[a, t])))
    frame = pd.DataFrame(rows, columns=list(PANEL_COLUMNS))
    frame.to_csv(path, index=False, float_format="%.10g")


def load_stock_panel(path) -> StockPanel:
    """Read a `date,asset,f1..f6,label,suspended,limit` CSV."""
    frame = pd.read_csv(path)
    missing = [c for c in PANEL_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path}: panel is missing columns {missing}")
    numeric = frame[[c for c in PANEL_COLUMNS if c not in ("date", "asset")]]
    values = numeric.to_numpy(dtype=np.float64)
    if not np.isfinite(values).all():
        row = int(np.argwhere(~np.isfinite(values).all(axis=1))[0][0])
        raise ValueError(f"{path}: non-finite value at data row {row}")

    dates = np.sort(pd.to_datetime(frame["date"]).unique()).astype("datetime64[D]")
    assets = tuple(sorted(frame["asset"].unique()))
    date_pos = {d: i for i, d in enumerate(dates)}
    asset_pos = {a: i for i, a in enumerate(assets)}

    features = np.full((len(assets), 6, len(dates)), np.nan)
    labels = np.full((len(assets), len(dates)), np.nan)
    suspended = np.zeros((len(assets), len(dates)), dtype=bool)
    limit = np.zeros((len(assets), len(dates)), dtype=bool)
    stamps = pd.to_datetime(frame["date"]).to_numpy().astype("datetime64[D]")
    for i in range(len(frame)):
        a = asset_pos[frame["asset"].iloc[i]]
        t = date_pos[stamps[i]]
        features[a, :, t] = values[i, 0:6]
        labels[a, t] = values[i, 6]
        suspended[a, t] = bool(values[i, 7])
        limit[a, t] = bool(values[i, 8])
    if np.isnan(features).any():
        raise ValueError(f"{path}: panel has missing (date, asset) combinations")
    return StockPanel(dates, assets, features, labels, suspended, limit)
