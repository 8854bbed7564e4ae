"""Forecast metrics, stationarity testing, and factor-recovery scoring.

Cross-sectional stock metrics treat axis 0 as days and axis 1 as assets.
The unit-root test regresses differenced values on a constant, the lagged
level, and lagged differences; its statistic is compared against fixed
large-sample critical values. Identifiability is scored by regressing each
true factor on the pooled recovered statistics (h, h^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

ADF_CRITICAL = {"1%": -3.46, "5%": -2.87, "10%": -2.57}


# ---------------------------------------------------------------------------
# forecast and cross-sectional metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    mse: float = np.nan
    mae: float = np.nan
    ic: float = np.nan
    rank_ic: float = np.nan
    precision: dict = field(default_factory=dict)   # N -> percentage
    skipped_days: int = 0

    def rows(self):
        out = [("mse", self.mse), ("mae", self.mae),
               ("ic", self.ic), ("rank_ic", self.rank_ic)]
        for n in sorted(self.precision):
            out.append((f"precision_at_{n}", self.precision[n]))
        out.append(("skipped_days", self.skipped_days))
        return out


def mse_mae(prediction, target) -> tuple[float, float]:
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    diff = prediction - target
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def ic_rank_ic(predicted: np.ndarray, realized: np.ndarray):
    """Mean daily cross-sectional Pearson and Spearman correlation.

    predicted/realized: (n_days, n_assets). Days where either side has
    zero cross-sectional variance are skipped; the skip count is returned.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    realized = np.asarray(realized, dtype=np.float64)
    if predicted.shape != realized.shape or predicted.ndim != 2:
        raise ValueError(f"need matching (days, assets) arrays, got "
                         f"{predicted.shape} and {realized.shape}")
    if predicted.shape[1] < 2:
        raise ValueError("cross-sectional metrics need at least 2 assets")
    ics, rics = [], []
    skipped = 0
    for day in range(predicted.shape[0]):
        p, r = predicted[day], realized[day]
        if np.std(p) == 0 or np.std(r) == 0:
            skipped += 1
            continue
        ics.append(sps.pearsonr(p, r)[0])
        rics.append(sps.spearmanr(p, r)[0])
    if not ics:
        raise ValueError("every day was skipped (zero cross-sectional variance)")
    return float(np.mean(ics)), float(np.mean(rics)), skipped


def precision_at_n(predicted: np.ndarray, realized: np.ndarray, n: int):
    """Mean percentage of top-n predicted assets with positive realized return."""
    predicted = np.asarray(predicted, dtype=np.float64)
    realized = np.asarray(realized, dtype=np.float64)
    if predicted.shape != realized.shape or predicted.ndim != 2:
        raise ValueError(f"need matching (days, assets) arrays, got "
                         f"{predicted.shape} and {realized.shape}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    fractions = []
    skipped = 0
    for day in range(predicted.shape[0]):
        if predicted.shape[1] < n:
            skipped += 1
            continue
        top = np.argsort(-predicted[day], kind="stable")[:n]
        fractions.append(np.mean(realized[day][top] > 0))
    if not fractions:
        raise ValueError(f"every day had fewer than {n} assets")
    return 100.0 * float(np.mean(fractions)), skipped


def stock_metric_report(predicted, realized, top_ns=(3, 5, 10, 30)) -> MetricReport:
    m, a = mse_mae(predicted, realized)
    ic, ric, skipped = ic_rank_ic(predicted, realized)
    prec = {}
    for n in top_ns:
        if np.asarray(predicted).shape[1] >= n:
            prec[n], _ = precision_at_n(predicted, realized, n)
    return MetricReport(mse=m, mae=a, ic=ic, rank_ic=ric, precision=prec,
                        skipped_days=skipped)


# ---------------------------------------------------------------------------
# augmented unit-root test
# ---------------------------------------------------------------------------

@dataclass
class AdfReport:
    statistic: float
    lag: int
    n_obs: int
    reject: dict          # level -> bool

    def __post_init__(self):
        # stricter rejection must imply looser rejection
        if self.reject.get("1%") and not self.reject.get("5%"):
            raise AssertionError("rejection at 1% without rejection at 5%")
        if self.reject.get("5%") and not self.reject.get("10%"):
            raise AssertionError("rejection at 5% without rejection at 10%")


def _ols(y: np.ndarray, x: np.ndarray):
    """Coefficients, their standard errors, and t-statistics."""
    n, k = x.shape
    coef, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < k:
        raise ValueError("degenerate regression (rank-deficient design)")
    resid = y - x @ coef
    dof = n - k
    if dof <= 0:
        raise ValueError(f"not enough observations: {n} rows, {k} regressors")
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(x.T @ x)
    se = np.sqrt(np.diag(cov))
    return coef, se, coef / se


def default_adf_lag(t_len: int) -> int:
    return int(12.0 * (t_len / 100.0) ** 0.25)


def adf_test(series, max_lag: int | None = None,
             auto_lag: bool = True) -> AdfReport:
    """Unit-root test with constant, no trend.

    Regresses the first difference on a constant, the lagged level, and up
    to `max_lag` lagged differences; with `auto_lag` the lags are dropped
    from the back while the last one is insignificant (|t| < 1.645),
    otherwise exactly `max_lag` lags are used. The statistic is the
    lagged-level coefficient over its standard error.
    """
    y = np.asarray(series, dtype=np.float64).ravel()
    if max_lag is None:
        max_lag = default_adf_lag(len(y))
    if len(y) < 20 + max_lag:
        raise ValueError(f"series too short: {len(y)} < {20 + max_lag}")
    if np.std(y) == 0:
        raise ValueError("constant series has no unit-root statistic")
    dy = np.diff(y)

    lag = max_lag
    while True:
        # rows t use dy[t], level y[t], and dy[t-1..t-lag]
        rows = len(dy) - lag
        target = dy[lag:]
        design = [np.ones(rows), y[lag:-1]]
        for j in range(1, lag + 1):
            design.append(dy[lag - j:len(dy) - j])
        x = np.column_stack(design)
        coef, se, tvals = _ols(target, x)
        if not auto_lag or lag == 0 or abs(tvals[-1]) >= 1.645:
            break
        lag -= 1

    statistic = float(tvals[1])
    reject = {level: statistic < crit for level, crit in ADF_CRITICAL.items()}
    return AdfReport(statistic=statistic, lag=lag, n_obs=rows, reject=reject)


# ---------------------------------------------------------------------------
# predictability gap
# ---------------------------------------------------------------------------

@dataclass
class PredictabilityCheck:
    """Per-component gap between predicted and encoded next-step factors.

    The dual route scores both against the observed series through the
    decoder; whenever both decoder errors fall within (tau1, tau2) the
    factor-space gap must respect (tau1 + tau2) / sigma_min(decoder).
    """

    tau1: float
    tau2: float
    gap_median: list
    gap_p90: list
    gap_max: list
    decoder_sigma_min: list
    bound: list
    n_instances: list
    n_within_tolerance: list
    n_bound_violations: list

    def total_violations(self) -> int:
        return int(sum(self.n_bound_violations))


def predictability_gap(factors: list, predictions: list, anchors: list,
                       decoders: list, x_norm: np.ndarray,
                       tau1: float, tau2: float) -> PredictabilityCheck:
    """Gap statistics on already-computed forward quantities.

    factors: per component (B, L, T) encoded factor paths; predictions:
    per component (B, A, L) one-step-ahead estimates aligned to `anchors`.
    Only anchors with an observed successor contribute.
    """
    check = PredictabilityCheck(tau1=tau1, tau2=tau2, gap_median=[], gap_p90=[],
                                gap_max=[], decoder_sigma_min=[], bound=[],
                                n_instances=[], n_within_tolerance=[],
                                n_bound_violations=[])
    t_len = x_norm.shape[2]
    for i, (h, h_hat, idx) in enumerate(zip(factors, predictions, anchors)):
        keep = np.flatnonzero(idx + 1 <= t_len - 1)
        succ = idx[keep] + 1
        w = decoders[i]["w"].value if hasattr(decoders[i]["w"], "value") else decoders[i]["w"]
        b = decoders[i]["b"].value if hasattr(decoders[i]["b"], "value") else decoders[i]["b"]
        sigma_min = float(np.linalg.svd(w, compute_uv=False)[-1])
        bound = (tau1 + tau2) / max(sigma_min, 1e-300)

        h_true = np.moveaxis(h[:, :, succ], 2, 1)          # (B, A', L)
        h_pred = h_hat[:, keep, :]
        gap = np.linalg.norm(h_pred - h_true, axis=2)      # (B, A')

        x_succ = np.moveaxis(x_norm[:, :, succ], 2, 1)     # (B, A', D)
        e_pred = np.linalg.norm(h_pred @ w.T + b - x_succ, axis=2)
        e_true = np.linalg.norm(h_true @ w.T + b - x_succ, axis=2)
        within = (e_pred <= tau1) & (e_true <= tau2)
        violations = int(np.sum(within & (gap > bound + 1e-9)))

        check.gap_median.append(float(np.median(gap)))
        check.gap_p90.append(float(np.quantile(gap, 0.9)))
        check.gap_max.append(float(np.max(gap)))
        check.decoder_sigma_min.append(sigma_min)
        check.bound.append(bound)
        check.n_instances.append(int(gap.size))
        check.n_within_tolerance.append(int(np.sum(within)))
        check.n_bound_violations.append(violations)
    return check


# ---------------------------------------------------------------------------
# identifiability scoring
# ---------------------------------------------------------------------------

@dataclass
class IdentifiabilityReport:
    scores: np.ndarray        # R^2 per true factor, flat
    mean_score: float
    coefficients: np.ndarray  # fitted map, (n_true, 2*M + 1) with intercept last
    rank_deficient: bool


def identifiability_score(recovered: np.ndarray, true_factors: np.ndarray
                          ) -> IdentifiabilityReport:
    """R^2 of each true factor under the pooled recovered statistics.

    recovered: (M, T) stacked factor paths from the model; true_factors:
    (N, T) ground truth on the same time axis. Each true factor is
    regressed on [recovered, recovered^2, 1]; the score is that fit's R^2,
    which is invariant to invertible affine relabelings of the truth.
    """
    recovered = np.asarray(recovered, dtype=np.float64)
    true_factors = np.asarray(true_factors, dtype=np.float64)
    if recovered.ndim != 2 or true_factors.ndim != 2:
        raise ValueError("factor arrays must be 2-d (factors, time)")
    if recovered.shape[1] != true_factors.shape[1]:
        raise ValueError(f"time axes differ: {recovered.shape[1]} vs "
                         f"{true_factors.shape[1]}")
    t_len = recovered.shape[1]
    design = np.column_stack([recovered.T, (recovered ** 2).T, np.ones(t_len)])
    coef, _, rank, _ = np.linalg.lstsq(design, true_factors.T, rcond=None)
    fitted = design @ coef
    resid = true_factors.T - fitted
    ss_res = np.sum(resid ** 2, axis=0)
    centered = true_factors.T - true_factors.T.mean(axis=0)
    ss_tot = np.sum(centered ** 2, axis=0)
    if np.any(ss_tot == 0):
        raise ValueError("a true factor is constant; R^2 undefined")
    scores = np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0)
    return IdentifiabilityReport(scores=scores, mean_score=float(np.mean(scores)),
                                 coefficients=coef.T,
                                 rank_deficient=rank < design.shape[1])


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def write_metric_csv(path, report: MetricReport) -> None:
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for name, value in report.rows():
            fh.write(f"{name},{value:.10g}\n")


def write_metric_text(path, report: MetricReport, title: str = "evaluation") -> None:
    lines = [f"{title}", "-" * len(title)]
    for name, value in report.rows():
        lines.append(f"{name:>16}: {value:.6g}" if isinstance(value, float)
                     else f"{name:>16}: {value}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_adf_csv(path, reports: dict) -> None:
    """One row per named series: statistic, lag, rejection flags."""
    with open(path, "w") as fh:
        fh.write("series,statistic,lag,n_obs,reject_1pct,reject_5pct,reject_10pct\n")
        for name, rep in reports.items():
            fh.write(f"{name},{rep.statistic:.10g},{rep.lag},{rep.n_obs},"
                     f"{int(rep.reject['1%'])},{int(rep.reject['5%'])},"
                     f"{int(rep.reject['10%'])}\n")


def write_factor_series_csv(path, factors: list) -> None:
    """Per-component factor paths as columns c<i>_f<j>, time as rows."""
    columns = []
    names = []
    for i, block in enumerate(factors):
        block = np.asarray(block)
        for j in range(block.shape[0]):
            names.append(f"c{i}_f{j}")
            columns.append(block[j])
    arr = np.column_stack(columns)
    with open(path, "w") as fh:
        fh.write("t," + ",".join(names) + "\n")
        for t in range(arr.shape[0]):
            fh.write(str(t) + "," + ",".join(f"{v:.10g}" for v in arr[t]) + "\n")
