"""End-to-end pipelines: long-horizon benchmarks, stock-panel runs, and
identifiability experiments.

Long-horizon runs follow the standard univariate protocol: the series is
z-scored per channel with training-split statistics, every channel becomes
its own sample, and errors are reported in the standardized space. Stock
runs window the feature panel per (asset, day) and score the test days
cross-sectionally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ComponentConfig, TaskSpec, TrainConfig
from .data import (SeriesMatrix, StockPanel, context_window_starts,
                   generate_synthetic_identifiable, split_lengths)
from .evaluation import IdentifiabilityReport, MetricReport, adf_test, \
    identifiability_score, mse_mae, stock_metric_report
from .model import PriorParams
from .objective import BetaSchedule, ObjectiveWeights
from .seeding import derive_seed
from .training import FitResult, TrainData, encode_factors, fit, predict


# ---------------------------------------------------------------------------
# long-horizon pipeline
# ---------------------------------------------------------------------------

@dataclass
class Standardizer:
    """Per-channel affine map fitted on the training segment."""

    mean: np.ndarray    # (D, 1)
    std: np.ndarray     # (D, 1)

    @classmethod
    def fit(cls, values: np.ndarray, n_train: int) -> "Standardizer":
        train = values[:, :n_train]
        std = train.std(axis=1, keepdims=True)
        std[std == 0] = 1.0
        return cls(mean=train.mean(axis=1, keepdims=True), std=std)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std


def univariate_windows(values_std: np.ndarray, seg_start: int, seg_end: int,
                       input_len: int, horizon: int) -> TrainData:
    """Channel-independent windows with targets inside [seg_start, seg_end)."""
    starts = context_window_starts(seg_start, seg_end, input_len, horizon)
    xs, ys = [], []
    for d in range(values_std.shape[0]):
        chan = values_std[d]
        xs.append(np.stack([chan[s:s + input_len] for s in starts])[:, None, :])
        ys.append(np.stack([chan[s + input_len:s + input_len + horizon]
                            for s in starts])[:, None, :])
    n_chan = values_std.shape[0]
    return TrainData(x=np.concatenate(xs, axis=0),
                     y=np.concatenate(ys, axis=0),
                     starts=np.tile(starts, n_chan))


def persistence_mse(x: np.ndarray, y: np.ndarray) -> float:
    """Last observed value carried forward over the horizon."""
    pred = np.repeat(x[:, :, -1:], y.shape[2], axis=2)
    return float(np.mean((pred - y) ** 2))


@dataclass
class BenchmarkResult:
    test_mse: float
    test_mae: float
    persistence_mse: float
    fit_result: FitResult
    standardizer: Standardizer
    component: ComponentConfig
    task: TaskSpec
    t_scale: float

    def beats_persistence(self) -> bool:
        return self.test_mse < self.persistence_mse


def resolve_input_window(train_cfg: TrainConfig, task: TaskSpec) -> int:
    if train_cfg.input_window > 0:
        return train_cfg.input_window
    return min(5 * task.horizon, 2000)


def run_long_horizon(series: SeriesMatrix, component: ComponentConfig,
                     task: TaskSpec, train_cfg: TrainConfig, seed: int,
                     ratios=(6, 2, 2), weights: ObjectiveWeights | None = None,
                     schedule: BetaSchedule | None = None) -> BenchmarkResult:
    """Train on the first split, early-stop on the second, score the third."""
    if weights is None:
        weights = ObjectiveWeights.for_task("long_horizon")
    if schedule is None:
        schedule = BetaSchedule()
    input_len = resolve_input_window(train_cfg, task)
    t_total = series.length
    n_train, n_valid, _ = split_lengths(t_total, ratios)
    std = Standardizer.fit(series.values, n_train)
    values = std.apply(series.values)

    train = univariate_windows(values, 0, n_train, input_len, task.horizon)
    valid = univariate_windows(values, n_train, n_train + n_valid,
                               input_len, task.horizon)
    test = univariate_windows(values, n_train + n_valid, t_total,
                              input_len, task.horizon)

    result = fit(train, valid, 1, component, task, weights, schedule,
                 train_cfg, seed, t_scale=float(t_total))
    preds = predict(result.params, component, task, test.x, test.starts,
                    float(t_total), batch_size=train_cfg.batch_size)
    test_mse, test_mae = mse_mae(preds, test.y)
    return BenchmarkResult(test_mse=test_mse, test_mae=test_mae,
                           persistence_mse=persistence_mse(test.x, test.y),
                           fit_result=result, standardizer=std,
                           component=component, task=task,
                           t_scale=float(t_total))


# ---------------------------------------------------------------------------
# stock pipeline
# ---------------------------------------------------------------------------

@dataclass
class StockRunResult:
    fit_result: FitResult
    metrics: MetricReport
    predictions: np.ndarray     # (n_assets, n_days), NaN outside test days
    test_days: np.ndarray
    component: ComponentConfig
    task: TaskSpec
    t_scale: float
    input_window: int


def stock_windows(panel: StockPanel, days: np.ndarray,
                  input_len: int) -> TrainData:
    """One sample per (asset, day in `days`); window ends at the day itself."""
    xs, ys, starts = [], [], []
    for t in days:
        lo = t - input_len + 1
        if lo < 0:
            raise ValueError(f"day {t} lacks {input_len} days of history")
        xs.append(panel.features[:, :, lo:t + 1])
        ys.append(panel.labels[:, t])
        starts.append(np.full(panel.n_assets, lo))
    return TrainData(x=np.concatenate(xs, axis=0),
                     y=np.concatenate(ys, axis=0),
                     starts=np.concatenate(starts))


def usable_days(panel: StockPanel, input_len: int, lo: int, hi: int) -> np.ndarray:
    """Days in [lo, hi) with a full feature window behind them."""
    first = max(lo, input_len - 1)
    return np.arange(first, hi)


def run_stock(panel: StockPanel, component: ComponentConfig,
              train_cfg: TrainConfig, seed: int, input_window: int = 60,
              ratios=(6, 2, 2), weights: ObjectiveWeights | None = None,
              schedule: BetaSchedule | None = None) -> StockRunResult:
    """Train the return model and score the test days cross-sectionally.

    A sample is one asset's `input_window`-day feature block ending on day
    t, labeled with the t -> t+1 return. The last panel day has no usable
    label downstream, so it is excluded from every split.
    """
    if weights is None:
        weights = ObjectiveWeights.for_task("stock_trend")
    if schedule is None:
        schedule = BetaSchedule()
    task = TaskSpec(kind="stock_trend", horizon=1, out_dim=1)
    t_days = panel.n_days
    n_train, n_valid, _ = split_lengths(t_days, ratios)

    train_days = usable_days(panel, input_window, 0, n_train)
    valid_days = usable_days(panel, input_window, n_train, n_train + n_valid)
    test_days = usable_days(panel, input_window, n_train + n_valid, t_days - 1)
    if len(train_days) == 0 or len(valid_days) == 0 or len(test_days) == 0:
        raise ValueError("panel too short for the requested input window")

    train = stock_windows(panel, train_days, input_window)
    valid = stock_windows(panel, valid_days, input_window)
    test = stock_windows(panel, test_days, input_window)

    result = fit(train, valid, 6, component, task, weights, schedule,
                 train_cfg, seed, t_scale=float(t_days))
    scores = predict(result.params, component, task, test.x, test.starts,
                     float(t_days), batch_size=train_cfg.batch_size)
    # samples are day-major blocks of n_assets
    per_day = scores.reshape(len(test_days), panel.n_assets)
    realized = np.stack([panel.labels[:, t] for t in test_days])
    metrics = stock_metric_report(per_day, realized)

    full = np.full((panel.n_assets, panel.n_days), np.nan)
    for row, t in enumerate(test_days):
        full[:, t] = per_day[row]
    return StockRunResult(fit_result=result, metrics=metrics, predictions=full,
                          test_days=test_days, component=component, task=task,
                          t_scale=float(t_days), input_window=input_window)


def factor_paths_for_assets(panel: StockPanel, result: StockRunResult,
                            assets=None, noise_seed: int | None = None,
                            trim_warmup: bool = False) -> list:
    """Factor series over each asset's full history.

    Returns a flat list of (L, T_i) arrays, one per (asset, component):
    posterior means by default, posterior samples with `noise_seed`. With
    `trim_warmup` the first 2*rate columns of each component are dropped;
    those fall inside the causal padding reach of its dilated kernel.
    """
    idx = range(panel.n_assets) if assets is None else assets
    x = panel.features[list(idx)]
    starts = np.zeros(len(x), dtype=np.int64)
    per_comp = encode_factors(result.fit_result.params, result.component, x,
                              starts, result.t_scale, noise_seed=noise_seed)
    paths = []
    for a in range(len(x)):
        for rate, comp in zip(result.component.rates, per_comp):
            trim = 2 * rate if trim_warmup else 0
            paths.append(comp[a][:, trim:])
    return paths


def factor_rejection_rate(paths, level: str = "5%") -> tuple[float, int]:
    """Share of factor series rejecting the unit root at `level`."""
    total = 0
    rejected = 0
    for block in paths:
        for series in np.asarray(block):
            report = adf_test(series)
            total += 1
            rejected += int(report.reject[level])
    if total == 0:
        raise ValueError("no factor series to test")
    return rejected / total, total


# ---------------------------------------------------------------------------
# identifiability experiment
# ---------------------------------------------------------------------------

@dataclass
class IdentifiabilityRun:
    report: IdentifiabilityReport
    control: IdentifiabilityReport
    fit_result: FitResult
    truth_prior: PriorParams


def run_identifiability(seed: int, t_len: int = 2000, n_components: int = 2,
                        n_factors: int = 2, n_channels: int = 8,
                        noise_std: float = 0.02, input_window: int = 48,
                        train_cfg: TrainConfig | None = None,
                        component: ComponentConfig | None = None
                        ) -> IdentifiabilityRun:
    """Generate, train, and score factor recovery on one seed.

    The model is fitted with the generator's own conditional prior so the
    divergence term pulls posteriors toward the distribution the factors
    were actually drawn from. Recovery, not forecast accuracy, is what is
    scored here, so the reconstruction and divergence terms run at full
    weight and the divergence is never annealed down.
    """
    if component is None:
        component = ComponentConfig(rates=(1, 2), factors=n_factors,
                                    eps_window=4, conv_channels=8,
                                    hidden=16, head_hidden=16)
    if train_cfg is None:
        train_cfg = TrainConfig(epochs=30, batch_size=64, learning_rate=2e-3,
                                patience=8, input_window=input_window)
    truth, series = generate_synthetic_identifiable(
        seed, n_components=n_components, n_factors=n_factors,
        n_channels=n_channels, t_len=t_len, noise_std=noise_std)
    task = TaskSpec(kind="long_horizon", horizon=1, out_dim=n_channels)
    weights = ObjectiveWeights()

    n_train, n_valid, _ = split_lengths(t_len, (6, 2, 2))
    std = Standardizer.fit(series.values, n_train)
    values = std.apply(series.values)
    train = multichannel_windows(values, 0, n_train, input_window, 1)
    valid = multichannel_windows(values, n_train, n_train + n_valid,
                                 input_window, 1)
    result = fit(train, valid, n_channels, component, task, weights,
                 BetaSchedule(boundaries=(), values=(1.0,)),
                 train_cfg, seed, t_scale=float(t_len), prior=truth.prior)

    # recover factor paths over the whole series in one convolutional pass
    recovered = encode_factors(result.params, component, values[None, :, :],
                               np.zeros(1, dtype=np.int64), float(t_len))
    pooled = np.concatenate([comp[0] for comp in recovered], axis=0)  # (K*L, T)
    true_flat = truth.factors.reshape(-1, t_len)
    report = identifiability_score(pooled, true_flat)

    ctrl_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "control")))
    control = identifiability_score(ctrl_rng.standard_normal(pooled.shape),
                                    true_flat)
    return IdentifiabilityRun(report=report, control=control,
                              fit_result=result, truth_prior=truth.prior)


def multichannel_windows(values_std: np.ndarray, seg_start: int, seg_end: int,
                         input_len: int, horizon: int) -> TrainData:
    """Windows keeping all channels together in each sample."""
    starts = context_window_starts(seg_start, seg_end, input_len, horizon)
    x = np.stack([values_std[:, s:s + input_len] for s in starts])
    y = np.stack([values_std[:, s + input_len:s + input_len + horizon]
                  for s in starts])
    return TrainData(x=x, y=y, starts=starts)


# ---------------------------------------------------------------------------
# synthetic benchmark series (surrogate for the public datasets)
# ---------------------------------------------------------------------------

def generate_sinusoid_mixture(seed: int, n_channels: int = 2, t_len: int = 900,
                              periods=(4, 8, 52), noise_std: float = 0.1,
                              trend: float = 0.0) -> SeriesMatrix:
    """Seasonal mixture with per-channel random amplitudes and phases."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "sinmix")))
    t = np.arange(t_len, dtype=np.float64)
    values = np.zeros((n_channels, t_len))
    for d in range(n_channels):
        for period in periods:
            amp = rng.uniform(0.5, 1.5)
            phase = rng.uniform(0, 2 * np.pi)
            values[d] += amp * np.sin(2 * np.pi * t / period + phase)
        values[d] += trend * t + noise_std * rng.standard_normal(t_len)
    names = tuple(f"x{i + 1}" for i in range(n_channels))
    return SeriesMatrix(values, names)
