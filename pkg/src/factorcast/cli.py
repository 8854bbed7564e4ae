"""Command-line entry point.

Subcommands: train, forecast, eval, backtest, adf, synth, identifiability.
Configuration is file-first (flat key=value) with flag overrides; every
run is reproducible from its config file and seed. Failures exit nonzero
with a single-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .backtest import (BacktestConfig, max_drawdown, run_backtest,
                       write_cr_csv, write_trades_csv)
from .config import (ConfigError, TrainConfig, apply_ablations,
                     build_configs, load_config_file)
from .data import (SeriesMatrix, generate_synthetic_identifiable,
                   generate_synthetic_stock_panel, load_series,
                   load_stock_panel, save_series, save_stock_panel)
from .evaluation import (MetricReport, adf_test, mse_mae, write_adf_csv,
                         write_metric_csv, write_metric_text)
from .experiments import (Standardizer, generate_sinusoid_mixture,
                          resolve_input_window, run_identifiability,
                          run_long_horizon, run_stock)
from .model import init_model_params
from .objective import BetaSchedule, ObjectiveWeights
from .optim import load_checkpoint, save_checkpoint
from .training import predict, save_history

CHECKPOINT_NAME = "checkpoint.npz"
HISTORY_NAME = "history.csv"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factorcast",
        description="Latent-factor forecasting: training, evaluation, "
                    "stationarity analysis, and portfolio replay.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required=False):
        p.add_argument("--out", default="runs/latest", help="output directory")
        p.add_argument("--seed", type=int, required=seed_required,
                       default=None if seed_required else 0,
                       help="root random seed")

    p_train = sub.add_parser("train", help="fit a model and write checkpoint + history")
    p_train.add_argument("--config", required=True, help="key=value model config file")
    p_train.add_argument("--data", required=True, help="series or panel CSV")
    p_train.add_argument("--horizon", type=int, default=None,
                         help="override the configured forecast horizon")
    p_train.add_argument("--rates", default=None,
                         help="override sampling rates, e.g. 1,2,4")
    p_train.add_argument("--no-decomp", action="store_true",
                         help="single-component ablation (one sampling rate)")
    p_train.add_argument("--no-disent", action="store_true",
                         help="disable the divergence term (beta = 0)")
    p_train.add_argument("--no-reconst", action="store_true",
                         help="zero the reconstruction loss weight")
    p_train.add_argument("--no-ind", action="store_true",
                         help="predictors see all components' factors")
    common(p_train, seed_required=True)

    p_fc = sub.add_parser("forecast", help="predict with a trained checkpoint")
    p_fc.add_argument("--config", required=True)
    p_fc.add_argument("--data", required=True)
    p_fc.add_argument("--checkpoint", default=None,
                      help="defaults to <out>/checkpoint.npz")
    p_fc.add_argument("--horizon", type=int, default=None)
    common(p_fc)

    p_eval = sub.add_parser("eval", help="score a prediction file against targets")
    p_eval.add_argument("--pred", required=True, help="prediction CSV (numeric)")
    p_eval.add_argument("--target", required=True, help="target CSV (numeric)")
    common(p_eval)

    p_bt = sub.add_parser("backtest", help="TopK-Drop replay over a stock panel")
    p_bt.add_argument("--data", required=True, help="panel CSV")
    p_bt.add_argument("--pred", required=True,
                      help="score CSV with date,asset,score rows")
    p_bt.add_argument("--topk", type=int, default=10, help="portfolio size")
    common(p_bt)

    p_adf = sub.add_parser("adf", help="unit-root tests per series column")
    p_adf.add_argument("--data", required=True, help="series CSV")
    common(p_adf)

    p_synth = sub.add_parser("synth", help="write synthetic datasets")
    p_synth.add_argument("--kind", required=True,
                         choices=("identifiable", "panel", "sinusoid"))
    common(p_synth, seed_required=True)

    p_id = sub.add_parser("identifiability",
                          help="generate, train, and score factor recovery")
    p_id.add_argument("--epochs", type=int, default=30)
    common(p_id, seed_required=True)
    return parser


def _ensure_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run_config(args):
    values = load_config_file(args.config)
    if getattr(args, "horizon", None) is not None:
        values["horizon"] = args.horizon
    if getattr(args, "rates", None) is not None:
        values["rates"] = tuple(int(r) for r in str(args.rates).split(","))
    component, task, train_cfg, extras = build_configs(values)
    component = apply_ablations(
        component,
        no_decomposition=getattr(args, "no_decomp", False),
        no_independence=getattr(args, "no_ind", False))
    weights = ObjectiveWeights.for_task(
        task.kind,
        **({"reconstruction": 0.0} if getattr(args, "no_reconst", False) else {}))
    if getattr(args, "no_disent", False):
        schedule = BetaSchedule(values=(0.0, 0.0, 0.0))
    else:
        schedule = BetaSchedule()
    return component, task, train_cfg, extras, weights, schedule


def _cmd_train(args) -> int:
    out = _ensure_out(args.out)
    component, task, train_cfg, extras, weights, schedule = _load_run_config(args)
    seed = args.seed if args.seed is not None else extras.get("seed", 0)

    if task.kind == "stock_trend":
        panel = load_stock_panel(args.data)
        window_kw = ({"input_window": train_cfg.input_window}
                     if train_cfg.input_window > 0 else {})
        run = run_stock(panel, component, train_cfg, seed, weights=weights,
                        schedule=schedule, **window_kw)
        result = run.fit_result
        summary = [f"task: stock_trend  assets: {panel.n_assets}  days: {panel.n_days}",
                   f"test IC: {run.metrics.ic:.4f}  rank IC: {run.metrics.rank_ic:.4f}"]
        write_metric_csv(out / "metrics.csv", run.metrics)
    else:
        series = load_series(args.data)
        bench = run_long_horizon(series, component, task, train_cfg, seed,
                                 weights=weights, schedule=schedule)
        result = bench.fit_result
        summary = [f"task: long_horizon  horizon: {task.horizon}",
                   f"test MSE: {bench.test_mse:.6f}  MAE: {bench.test_mae:.6f}",
                   f"persistence MSE: {bench.persistence_mse:.6f}"]
        report = MetricReport(mse=bench.test_mse, mae=bench.test_mae)
        write_metric_csv(out / "metrics.csv", report)

    save_checkpoint(out / CHECKPOINT_NAME, result.params.named())
    save_history(out / HISTORY_NAME, result.history)
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    print(f"wrote {out / CHECKPOINT_NAME} and {out / HISTORY_NAME}")
    return 0


def _cmd_forecast(args) -> int:
    out = _ensure_out(args.out)
    component, task, train_cfg, extras, _, _ = _load_run_config(args)
    if task.kind != "long_horizon":
        raise ConfigError("forecast supports long_horizon configs only")
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    arrays = load_checkpoint(ckpt)

    series = load_series(args.data)
    input_len = resolve_input_window(train_cfg, task)
    std = Standardizer.fit(series.values, series.length)
    values = std.apply(series.values)
    params = init_model_params(1, component, task, seed=0)
    params.load_arrays(arrays)

    starts = np.array([series.length - input_len])
    xs = np.concatenate([values[d:d + 1, None, -input_len:]
                         for d in range(series.n_channels)], axis=0)
    preds = predict(params, component, task, xs, np.repeat(starts, len(xs)),
                    float(series.length))
    preds = preds[:, 0, :] * std.std + std.mean   # back to original units
    header = "step," + ",".join(series.channels)
    lines = [header]
    for h in range(task.horizon):
        lines.append(str(h + 1) + "," + ",".join(f"{preds[d, h]:.10g}"
                                                 for d in range(len(xs))))
    (out / "predictions.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'predictions.csv'}")
    return 0


def _read_numeric_csv(path) -> np.ndarray:
    frame = pd.read_csv(path)
    numeric = frame.select_dtypes(include=[np.number])
    if numeric.empty:
        raise ConfigError(f"{path}: no numeric columns")
    return numeric.to_numpy(dtype=np.float64)


def _cmd_eval(args) -> int:
    out = _ensure_out(args.out)
    pred = _read_numeric_csv(args.pred)
    target = _read_numeric_csv(args.target)
    mse, mae = mse_mae(pred, target)
    report = MetricReport(mse=mse, mae=mae)
    write_metric_csv(out / "metrics.csv", report)
    write_metric_text(out / "metrics.txt", report)
    print(f"MSE: {mse:.6g}  MAE: {mae:.6g}")
    return 0


def _cmd_backtest(args) -> int:
    out = _ensure_out(args.out)
    panel = load_stock_panel(args.data)
    frame = pd.read_csv(args.pred)
    for col in ("date", "asset", "score"):
        if col not in frame.columns:
            raise ConfigError(f"{args.pred}: missing column {col!r}")
    scores = np.full((panel.n_assets, panel.n_days), np.nan)
    date_pos = {d: i for i, d in enumerate(panel.dates)}
    asset_pos = {a: i for i, a in enumerate(panel.assets)}
    stamps = pd.to_datetime(frame["date"]).to_numpy().astype("datetime64[D]")
    for i in range(len(frame)):
        asset = frame["asset"].iloc[i]
        if asset not in asset_pos or stamps[i] not in date_pos:
            raise ConfigError(f"{args.pred}: row {i} does not match the panel")
        scores[asset_pos[asset], date_pos[stamps[i]]] = frame["score"].iloc[i]

    cfg = BacktestConfig(top_k=args.topk)
    ledger = run_backtest(panel, scores, cfg)
    write_cr_csv(out / "cr.csv", ledger, dates=panel.dates)
    write_trades_csv(out / "trades.csv", ledger)
    final_cr = ledger.cr_series[-1]
    dd = max_drawdown(ledger.capital_series)
    line = (f"final CR: {final_cr:.4f}%  max drawdown: {dd:.4f}%  "
            f"trades: {len(ledger.trades)}  costs: {ledger.total_costs():.2f}")
    (out / "summary.txt").write_text(line + "\n")
    print(line)
    return 0


def _cmd_adf(args) -> int:
    out = _ensure_out(args.out)
    series = load_series(args.data)
    reports = {}
    for i, name in enumerate(series.channels):
        reports[name] = adf_test(series.values[i])
    write_adf_csv(out / "adf.csv", reports)
    lines = []
    for name, rep in reports.items():
        flags = "/".join(level for level in ("1%", "5%", "10%") if rep.reject[level])
        lines.append(f"{name}: statistic {rep.statistic:.4f} lag {rep.lag} "
                     f"reject[{flags or 'none'}]")
    (out / "adf.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _cmd_synth(args) -> int:
    out = _ensure_out(args.out)
    if args.kind == "identifiable":
        truth, series = generate_synthetic_identifiable(args.seed)
        save_series(out / "series.csv", series)
        k, l, t = truth.factors.shape
        factor_series = SeriesMatrix(truth.factors.reshape(k * l, t),
                                     tuple(f"c{i}_f{j}" for i in range(k)
                                           for j in range(l)))
        save_series(out / "factors.csv", factor_series)
        print(f"wrote {out / 'series.csv'} and {out / 'factors.csv'}")
    elif args.kind == "panel":
        panel = generate_synthetic_stock_panel(args.seed)
        save_stock_panel(out / "panel.csv", panel)
        print(f"wrote {out / 'panel.csv'}")
    else:
        series = generate_sinusoid_mixture(args.seed)
        save_series(out / "series.csv", series)
        print(f"wrote {out / 'series.csv'}")
    return 0


def _cmd_identifiability(args) -> int:
    out = _ensure_out(args.out)
    run = run_identifiability(args.seed,
                              train_cfg=TrainConfig(
                                  epochs=args.epochs, batch_size=64,
                                  learning_rate=2e-3, patience=8,
                                  input_window=48))
    lines = [f"mean identifiability score: {run.report.mean_score:.4f}",
             f"per-factor: {[f'{s:.4f}' for s in run.report.scores]}",
             f"random-control mean: {run.control.mean_score:.4f}"]
    (out / "identifiability.txt").write_text("\n".join(lines) + "\n")
    with open(out / "identifiability.csv", "w") as fh:
        fh.write("factor,score,control\n")
        for i, (s, c) in enumerate(zip(run.report.scores, run.control.scores)):
            fh.write(f"{i},{s:.10g},{c:.10g}\n")
    print("\n".join(lines))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "forecast": _cmd_forecast,
    "eval": _cmd_eval,
    "backtest": _cmd_backtest,
    "adf": _cmd_adf,
    "synth": _cmd_synth,
    "identifiability": _cmd_identifiability,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
