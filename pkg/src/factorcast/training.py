"""Training loop and the shared forward pass.

`forward_model` runs the full network on one normalized batch and returns
every intermediate a loss or a prediction needs; `compute_losses` turns
that into the four objective terms; `fit` iterates seeded mini-batches
with Adam, tracks per-epoch history, and returns the parameters that
scored best on validation.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, NonFiniteError
from .config import ComponentConfig, TaskSpec, TrainConfig
from .model import (AttentionWeights, FactorPosterior, ModelParams, PriorParams,
                    attention_weights, build_aux_batch, combine_reconstruction,
                    encode, init_model_params, interleave_pairs, predict_at_anchors,
                    prior_params, reconstruct_component, retained_indices,
                    sample_posterior, task_predict_long_horizon, task_predict_stock)
from .objective import (BetaSchedule, LossParts, ObjectiveWeights,
                        batch_denormalize, batch_normalize, batch_stats,
                        kl_gaussian, mse, total_objective)
from .optim import OptimizerState, adam_step
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class TrainData:
    """Windows plus the absolute start index of each (for the prior lookup)."""

    x: np.ndarray            # (N, D, T_in)
    y: np.ndarray            # (N, D, H) long-horizon; (N,) stock
    starts: np.ndarray       # (N,) absolute time index of each window's column 0

    def __post_init__(self):
        if len(self.x) != len(self.y) or len(self.x) != len(self.starts):
            raise ValueError(f"window count mismatch: x {len(self.x)}, "
                             f"y {len(self.y)}, starts {len(self.starts)}")

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx: np.ndarray) -> "TrainData":
        return TrainData(self.x[idx], self.y[idx], self.starts[idx])


@dataclass
class ForwardOutput:
    posterior: FactorPosterior
    attention: AttentionWeights
    reconstruction: Node          # (B, D, T) combined
    component_recs: list          # per component (B, D, T)
    anchor_predictions: list      # per component (B, A_i, L)
    anchors: list                 # per component ascending retained indices
    task_output: Node             # (B, D, H) long-horizon; (B,) stock


def forward_model(params: ModelParams, cfg: ComponentConfig, task: TaskSpec,
                  x_norm: np.ndarray, starts: np.ndarray, t_scale: float,
                  noise_seed: int | None = None) -> ForwardOutput:
    """Encode, sample, reconstruct, predict, and run the task head.

    `x_norm` is the already-normalized (B, D, T) batch. With `noise_seed`
    None the posterior mean is used instead of a sample (evaluation mode).
    """
    batch, _, t_len = x_norm.shape
    aux = build_aux_batch(x_norm, starts, t_scale)
    post = encode(Node(aux, op="const"), cfg, params)
    if noise_seed is not None:
        post = sample_posterior(post, noise_seed)
    factors = post.factors()

    recs = [reconstruct_component(h, params.decoders[i])
            for i, h in enumerate(factors)]
    att = attention_weights(Node(x_norm, op="const"), recs)
    combined = combine_reconstruction(recs, att)

    if cfg.independence:
        pred_inputs = factors
    else:
        shared = ad.concat(factors, axis=1)       # (B, L*K, T)
        pred_inputs = [shared] * cfg.n_components

    anchors, predictions = [], []
    for i, rate in enumerate(cfg.rates):
        idx = retained_indices(t_len, rate)
        anchors.append(idx)
        predictions.append(predict_at_anchors(pred_inputs[i], idx, rate,
                                              cfg.eps_window, params.predictors[i]))

    if task.kind == "long_horizon":
        last = [pred[:, pred.shape[1] - 1, :] for pred in predictions]
        task_out = task_predict_long_horizon(last, att, params.heads, task)
    else:
        pair_seqs = [interleave_pairs(factors[i], predictions[i], anchors[i])
                     for i in range(cfg.n_components)]
        task_out = task_predict_stock(pair_seqs, att, params.heads)
    return ForwardOutput(post, att, combined, recs, predictions, anchors, task_out)


def compute_losses(out: ForwardOutput, params: ModelParams, cfg: ComponentConfig,
                   x_norm: np.ndarray, y_norm: np.ndarray, starts: np.ndarray,
                   prior: PriorParams, kl_per_term: bool = True) -> LossParts:
    """The four raw objective terms for one batch.

    Reconstruction and prediction are per-entry means. Predictability
    decodes each component's one-step-ahead factors and scores them
    against the observed series at the successor column, summed across
    components. The divergence term sums over factors and retained steps,
    averaged over the batch; with `kl_per_term` it is further divided by
    the number of contributing terms.
    """
    batch, _, t_len = x_norm.shape
    rec_loss = mse(out.reconstruction, x_norm)

    predy_total = None
    kl_total = None
    kl_terms = 0
    for i in range(cfg.n_components):
        idx = out.anchors[i]
        preds = out.anchor_predictions[i]             # (B, A, L)
        with_succ = idx + 1 <= t_len - 1
        if with_succ.any():
            keep = np.flatnonzero(with_succ)
            succ = idx[keep] + 1
            kept = ad.take(preds, keep, axis=1)       # (B, A', L)
            h_t = ad.transpose(kept, (0, 2, 1))       # (B, L, A')
            dec = params.decoders[i]
            x_hat = ad.matmul(dec["w"], h_t) + ad.reshape(dec["b"], (dec["b"].shape[0], 1))
            target = x_norm[:, :, succ]
            term = mse(x_hat, target)
            predy_total = term if predy_total is None else predy_total + term

        mu_ret = ad.take(out.posterior.mus[i], idx, axis=2)      # (B, L, A)
        sig_ret = ad.take(out.posterior.sigmas[i], idx, axis=2)
        abs_idx = np.asarray(starts, dtype=np.int64)[:, None] + idx[None, :]  # (B, A)
        mp = np.moveaxis(prior.mean[i][:, abs_idx], 1, 0)        # (B, L, A)
        sp = np.moveaxis(prior.std[i][:, abs_idx], 1, 0)
        kl_i = kl_gaussian(mu_ret, sig_ret, mp, sp)
        kl_total = kl_i if kl_total is None else kl_total + kl_i
        kl_terms += mu_ret.value.size

    if predy_total is None:
        predy_total = Node(0.0, op="const")
    kl_total = kl_total / float(batch)
    if kl_per_term:
        kl_total = kl_total * (batch / float(kl_terms))

    pred_loss = mse(out.task_output, y_norm)
    return LossParts(prediction=pred_loss, reconstruction=rec_loss,
                     predictability=predy_total, kl=kl_total)


def batch_objective(params: ModelParams, cfg: ComponentConfig, task: TaskSpec,
                    x: np.ndarray, y: np.ndarray, starts: np.ndarray,
                    prior: PriorParams, weights: ObjectiveWeights, beta: float,
                    t_scale: float, noise_seed: int | None,
                    kl_per_term: bool = True):
    """Normalize one batch, run the model, and build the total objective."""
    stats = batch_stats(x)
    x_norm = batch_normalize(x, stats)
    y_norm = batch_normalize(y, stats) if task.kind == "long_horizon" else y
    out = forward_model(params, cfg, task, x_norm, starts, t_scale, noise_seed)
    parts = compute_losses(out, params, cfg, x_norm, y_norm, starts, prior,
                           kl_per_term)
    return total_objective(parts, weights, beta), parts, out, stats


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    params: ModelParams
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = np.inf
    diverged: bool = False

    def history_rows(self):
        return self.history


HISTORY_FIELDS = ("epoch", "beta",
                  "train_prediction", "train_reconstruction",
                  "train_predictability", "train_kl", "train_total",
                  "val_prediction", "val_reconstruction",
                  "val_predictability", "val_kl", "val_total")


def save_history(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in HISTORY_FIELDS})


def _epoch_eval(params, cfg, task, split: TrainData, prior, weights, beta,
                t_scale, batch_size, kl_per_term) -> dict[str, float]:
    """Loss parts over a split without sampling noise, weighted by batch size."""
    sums: dict[str, float] = {}
    total = 0.0
    seen = 0
    for lo in range(0, len(split), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(split)))
        loss, parts, _, _ = batch_objective(
            params, cfg, task, split.x[idx], split.y[idx], split.starts[idx],
            prior, weights, beta, t_scale, noise_seed=None,
            kl_per_term=kl_per_term)
        n = len(idx)
        for name, value in parts.scalars().items():
            sums[name] = sums.get(name, 0.0) + value * n
        total += float(loss.value) * n
        seen += n
    result = {name: value / seen for name, value in sums.items()}
    result["total"] = total / seen
    return result


def fit(train: TrainData, valid: TrainData, input_dim: int, cfg: ComponentConfig,
        task: TaskSpec, weights: ObjectiveWeights, schedule: BetaSchedule,
        train_cfg: TrainConfig, seed: int, t_scale: float | None = None,
        prior: PriorParams | None = None) -> FitResult:
    """Mini-batch training with early stopping on validation loss.

    Deterministic per seed: parameter init, shuffling, and sampling noise
    all derive from it. On divergence (non-finite forward) the loop aborts
    and the best parameters seen so far are returned.
    """
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("fit: train and valid must both be non-empty")
    t_len = train.x.shape[2]
    horizon = task.horizon if task.kind == "long_horizon" else 1
    max_time = int(max(train.starts.max(), valid.starts.max())) + t_len + horizon
    if t_scale is None:
        t_scale = float(max_time)
    if prior is None:
        prior = prior_params(np.arange(max_time), cfg.n_components, cfg.factors,
                             derive_seed(seed, "prior"))

    params = init_model_params(input_dim, cfg, task, derive_seed(seed, "init"))
    named = params.named()
    opt = OptimizerState(learning_rate=train_cfg.learning_rate)
    shuffle_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "shuffle")))

    result = FitResult(params=params)
    best_values: dict[str, np.ndarray] | None = None
    bad_epochs = 0

    for epoch in range(train_cfg.epochs):
        beta = schedule.beta_at(epoch)
        order = shuffle_rng.permutation(len(train))
        sums: dict[str, float] = {}
        train_total = 0.0
        try:
            for b, lo in enumerate(range(0, len(order), train_cfg.batch_size)):
                idx = order[lo:lo + train_cfg.batch_size]
                noise_seed = derive_seed(seed, "noise", epoch, b)
                loss, parts, _, _ = batch_objective(
                    params, cfg, task, train.x[idx], train.y[idx],
                    train.starts[idx], prior, weights, beta, t_scale,
                    noise_seed, train_cfg.kl_per_term)
                ad.zero_grads(named.values())
                ad.backward(loss)
                adam_step(named, opt)
                n = len(idx)
                for name, value in parts.scalars().items():
                    sums[name] = sums.get(name, 0.0) + value * n
                train_total += float(loss.value) * n
            val = _epoch_eval(params, cfg, task, valid, prior, weights, beta,
                              t_scale, train_cfg.batch_size, train_cfg.kl_per_term)
        except NonFiniteError as exc:
            log.warning("training diverged at epoch %d: %s", epoch, exc)
            result.diverged = True
            break

        row = {"epoch": epoch, "beta": beta}
        for name, value in sums.items():
            row[f"train_{name}"] = value / len(train)
        row["train_total"] = train_total / len(train)
        for name, value in val.items():
            row[f"val_{name}"] = value
        result.history.append(row)

        if val["total"] < result.best_val_loss:
            result.best_val_loss = val["total"]
            result.best_epoch = epoch
            best_values = {k: v.value.copy() for k, v in named.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.patience:
                break

    if best_values is not None:
        params.load_arrays(best_values)
    return result


def predict(params: ModelParams, cfg: ComponentConfig, task: TaskSpec,
            x: np.ndarray, starts: np.ndarray, t_scale: float,
            batch_size: int = 64) -> np.ndarray:
    """Task predictions in original units, batched, posterior-mean forward."""
    outputs = []
    for lo in range(0, len(x), batch_size):
        xb = x[lo:lo + batch_size]
        sb = starts[lo:lo + batch_size]
        stats = batch_stats(xb)
        out = forward_model(params, cfg, task, batch_normalize(xb, stats),
                            sb, t_scale, noise_seed=None)
        pred = out.task_output.value
        if task.kind == "long_horizon":
            pred = batch_denormalize(pred, stats)
        outputs.append(pred)
    return np.concatenate(outputs, axis=0)


def encode_factors(params: ModelParams, cfg: ComponentConfig, x: np.ndarray,
                   starts: np.ndarray, t_scale: float, batch_size: int = 64,
                   noise_seed: int | None = None) -> list[np.ndarray]:
    """Factor paths per component, (N, L, T) each, no grads.

    Posterior means by default; with `noise_seed` the paths are posterior
    samples, deterministic per seed and independent across batches.
    """
    per_comp = [[] for _ in cfg.rates]
    for b, lo in enumerate(range(0, len(x), batch_size)):
        xb = x[lo:lo + batch_size]
        stats = batch_stats(xb)
        aux = build_aux_batch(batch_normalize(xb, stats), starts[lo:lo + batch_size],
                              t_scale)
        post = encode(Node(aux, op="const"), cfg, params)
        if noise_seed is not None:
            post = sample_posterior(post, derive_seed(noise_seed, "paths", b))
        for i, h in enumerate(post.factors()):
            per_comp[i].append(h.value)
    return [np.concatenate(chunks, axis=0) for chunks in per_comp]
