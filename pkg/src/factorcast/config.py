"""Model/task configuration and the flat key=value config file format.

The config file is plain text, one `key = value` per line, `#` comments.
Lists are comma separated. Example::

    task = long_horizon
    horizon = 24
    rates = 1,2,4
    factors = 2
    kernel = 3
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


# Table of conventional sampling rates per input frequency (multiples of
# basic time units: hour/day/week/month within the series' own cadence).
DEFAULT_RATES = {
    "15min": (1, 4, 96),
    "1day": (1, 7, 30),
    "1h": (1, 168),
    "10min": (1, 144),
    "1week": (1, 2, 4),
}


@dataclass(frozen=True)
class ComponentConfig:
    """Structural hyperparameters shared by encoder, predictors and heads."""

    rates: tuple[int, ...] = (1, 2, 5)   # sampling rate / conv dilation per component
    factors: int = 2                     # latent factors per component (L)
    kernel: int = 3                      # dilated conv kernel size
    eps_window: int = 8                  # predictor input window (retained steps)
    conv_channels: int = 16              # hidden channels in the conv stack
    hidden: int = 128                    # recurrent cell hidden size
    head_hidden: int = 128               # task-head MLP hidden width
    embed_dim: int = 0                   # optional per-channel embedding (0 = off)
    independence: bool = True            # predictors see only their own component

    def __post_init__(self):
        if len(self.rates) < 1:
            raise ConfigError("need at least one sampling rate")
        if any(r < 1 for r in self.rates):
            raise ConfigError(f"sampling rates must be positive: {self.rates}")
        if len(set(self.rates)) != len(self.rates):
            raise ConfigError(f"sampling rates must be distinct: {self.rates}")
        if self.factors < 1:
            raise ConfigError("factors per component must be >= 1")
        if self.kernel < 1:
            raise ConfigError("kernel size must be >= 1")
        if self.eps_window < 1:
            raise ConfigError("predictor window must be >= 1")

    @property
    def n_components(self) -> int:
        return len(self.rates)

    def min_length(self) -> int:
        """Shortest input length the encoder accepts."""
        return max(self.rates) * (self.kernel - 1) + 1


@dataclass(frozen=True)
class TaskSpec:
    """What the model predicts: an H-step future block or a next-day return."""

    kind: str = "long_horizon"           # "long_horizon" | "stock_trend"
    horizon: int = 24                    # H; ignored for stock_trend
    out_dim: int = 1                     # D of the prediction target

    def __post_init__(self):
        if self.kind not in ("long_horizon", "stock_trend"):
            raise ConfigError(f"unknown task kind: {self.kind!r}")
        if self.kind == "long_horizon" and self.horizon < 1:
            raise ConfigError("horizon must be >= 1 for long_horizon")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization-loop settings."""

    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 2e-4
    patience: int = 10                   # early stop on validation loss
    input_window: int = 0                # 0 = derive (5*H for long_horizon)
    kl_per_term: bool = True             # scale the KL sum by its term count

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")


def _parse_value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return tuple(_parse_value(part) for part in raw.split(","))
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


_COMPONENT_KEYS = {"rates", "factors", "kernel", "eps_window", "conv_channels",
                   "hidden", "head_hidden", "embed_dim", "independence"}
_TASK_KEYS = {"task", "horizon", "out_dim"}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "patience",
               "input_window", "kl_per_term"}
_OBJECTIVE_KEYS = {"prediction_weight", "kl_weight", "other_weight", "nonpred_scale"}
_KNOWN_KEYS = (_COMPONENT_KEYS | _TASK_KEYS | _TRAIN_KEYS | _OBJECTIVE_KEYS
               | {"input_dim", "seed"})


def _as_rate_tuple(value) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,)
    return tuple(int(v) for v in value)


def build_configs(values: dict):
    """Split a flat config dict into (ComponentConfig, TaskSpec, TrainConfig, extras).

    Unknown keys are rejected so typos fail loudly.
    """
    unknown = set(values) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    comp_kwargs = {k: values[k] for k in _COMPONENT_KEYS if k in values}
    if "rates" in comp_kwargs:
        comp_kwargs["rates"] = _as_rate_tuple(comp_kwargs["rates"])
    component = ComponentConfig(**comp_kwargs)

    task_kwargs = {}
    if "task" in values:
        task_kwargs["kind"] = values["task"]
    for key in ("horizon", "out_dim"):
        if key in values:
            task_kwargs[key] = values[key]
    task = TaskSpec(**task_kwargs)

    train_kwargs = {k: values[k] for k in _TRAIN_KEYS if k in values}
    if "learning_rate" in train_kwargs:
        train_kwargs["learning_rate"] = float(train_kwargs["learning_rate"])
    train = TrainConfig(**train_kwargs)

    extras = {k: values[k] for k in values
              if k in _OBJECTIVE_KEYS or k in ("input_dim", "seed")}
    return component, task, train, extras


def apply_ablations(component: ComponentConfig, *, no_decomposition: bool = False,
                    no_independence: bool = False) -> ComponentConfig:
    """Structural ablation toggles (loss-term toggles live on the objective)."""
    out = component
    if no_decomposition:
        out = replace(out, rates=(1,))
    if no_independence:
        out = replace(out, independence=False)
    return out
