"""Latent-factor time-series forecasting with multi-scale variational
encoders, per-component recurrent predictors, and task heads for
long-horizon forecasting and next-day stock returns."""

from .autodiff import Node, NonFiniteError, ShapeError, backward, zero_grads
from .config import (ComponentConfig, ConfigError, TaskSpec, TrainConfig,
                     apply_ablations, build_configs, load_config_file)
from .data import (DatasetSpec, SeriesMatrix, StockPanel, SyntheticTruth,
                   chronological_split, generate_synthetic_identifiable,
                   generate_synthetic_stock_panel, load_series,
                   load_stock_panel, make_windows, pad_for_dilation)
from .model import (AttentionWeights, FactorPosterior, ModelParams, PriorParams,
                    attention_weights, combine_reconstruction, encode,
                    init_model_params, predict_next, prior_params,
                    reconstruct_component, retained_indices, sample_latent)
from .objective import (BatchStats, BetaSchedule, LossParts, ObjectiveWeights,
                        batch_denormalize, batch_normalize, batch_stats,
                        kl_gaussian, total_objective)
from .training import FitResult, TrainData, fit, predict
from .evaluation import (AdfReport, IdentifiabilityReport, MetricReport,
                         PredictabilityCheck, adf_test, ic_rank_ic,
                         identifiability_score, mse_mae, precision_at_n,
                         predictability_gap)
from .backtest import BacktestConfig, BacktestLedger, run_backtest, topk_drop_step

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
