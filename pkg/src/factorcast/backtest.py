"""Deterministic TopK-Drop portfolio replay with transaction costs.

Each day the assets are ranked by predicted return; holdings outside the
new top k are sold (suspended or limit-locked names are retained), new
entrants are bought at a fixed position size, and the portfolio is marked
at that day's close. Capital is tracked twice: once as cash plus market
value, once as yesterday's capital plus holding gains minus costs. The
two must agree after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import StockPanel

BP = 1e-4


@dataclass(frozen=True)
class BacktestConfig:
    top_k: int = 10
    initial_capital: float = 1e8
    position_size: float = 2e6
    buy_cost_bp: float = 5.0
    sell_cost_bp: float = 15.0
    fractional_shares: bool = True

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.buy_cost_bp < 0 or self.sell_cost_bp < 0:
            raise ValueError("costs must be non-negative")
        if self.top_k * self.position_size > self.initial_capital:
            raise ValueError(f"{self.top_k} positions of {self.position_size:g} "
                             f"exceed initial capital {self.initial_capital:g}")


@dataclass
class Trade:
    day: int
    asset: str
    side: str          # "buy" | "sell"
    shares: float
    price: float
    cost: float        # transaction cost paid


@dataclass
class BacktestLedger:
    cash: float
    holdings: dict = field(default_factory=dict)    # asset -> shares
    trades: list = field(default_factory=list)
    capital_series: list = field(default_factory=list)
    cr_series: list = field(default_factory=list)
    skipped_buys: list = field(default_factory=list)

    def market_value(self, prices: dict) -> float:
        return sum(shares * prices[a] for a, shares in self.holdings.items())

    def total_costs(self) -> float:
        return sum(t.cost for t in self.trades)


def topk_drop_step(day: int, assets, prices: np.ndarray, scores: np.ndarray,
                   suspended: np.ndarray, limit: np.ndarray,
                   ledger: BacktestLedger, cfg: BacktestConfig) -> None:
    """One rebalance at day-close prices, mutating the ledger in place.

    Sells holdings that dropped out of the top k unless suspended or at
    their price limit; buys new top-k entrants that are tradable, skipping
    (and recording) any buy the cash cannot cover.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    target = {assets[i] for i in order[:cfg.top_k]}
    pos = {a: i for i, a in enumerate(assets)}

    for asset in sorted(set(ledger.holdings) - target):
        i = pos[asset]
        if suspended[i] or limit[i]:
            continue  # retained: cannot trade today
        shares = ledger.holdings.pop(asset)
        proceeds = shares * prices[i]
        cost = proceeds * cfg.sell_cost_bp * BP
        ledger.cash += proceeds - cost
        ledger.trades.append(Trade(day, asset, "sell", shares, prices[i], cost))

    for i in order[:cfg.top_k]:
        asset = assets[i]
        if asset in ledger.holdings or suspended[i] or limit[i]:
            continue
        outlay = cfg.position_size * (1.0 + cfg.buy_cost_bp * BP)
        if outlay > ledger.cash:
            ledger.skipped_buys.append((day, asset))
            continue
        shares = cfg.position_size / prices[i]
        if not cfg.fractional_shares:
            shares = np.floor(shares / 100.0) * 100.0
            if shares <= 0:
                ledger.skipped_buys.append((day, asset))
                continue
            outlay = shares * prices[i] * (1.0 + cfg.buy_cost_bp * BP)
            if outlay > ledger.cash:
                ledger.skipped_buys.append((day, asset))
                continue
        cost = shares * prices[i] * cfg.buy_cost_bp * BP
        ledger.cash -= shares * prices[i] + cost
        ledger.holdings[asset] = shares
        ledger.trades.append(Trade(day, asset, "buy", shares, prices[i], cost))


def run_backtest(panel: StockPanel, predictions: np.ndarray,
                 cfg: BacktestConfig) -> BacktestLedger:
    """Replay the whole panel and return the completed ledger.

    predictions: (n_assets, n_days) scores aligned to the panel; NaN marks
    days an asset has no usable score (it is ranked last). The accounting
    identity is asserted after every day.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape != (panel.n_assets, panel.n_days):
        raise ValueError(f"predictions shape {predictions.shape} does not match "
                         f"panel ({panel.n_assets}, {panel.n_days})")
    closes = panel.closes()
    ledger = BacktestLedger(cash=cfg.initial_capital)
    prev_prices: dict = {}
    capital_prev = cfg.initial_capital

    for day in range(panel.n_days):
        prices = closes[:, day]
        scores = predictions[:, day]
        scores = np.where(np.isfinite(scores), scores, -np.inf)

        # independent capital route: yesterday's capital plus market moves
        # on positions held into today, minus today's trading costs
        gains = sum(shares * (prices[panel.assets.index(a)] - prev_prices[a])
                    for a, shares in ledger.holdings.items()) if prev_prices else 0.0
        costs_before = ledger.total_costs()

        topk_drop_step(day, panel.assets, prices, scores,
                       panel.suspended[:, day], panel.limit[:, day], ledger, cfg)

        price_map = {a: prices[i] for i, a in enumerate(panel.assets)}
        capital = ledger.cash + ledger.market_value(price_map)
        expected = capital_prev + gains - (ledger.total_costs() - costs_before)
        if not np.isclose(capital, expected, rtol=1e-9, atol=1e-2):
            raise AssertionError(f"accounting identity broken on day {day}: "
                                 f"marked {capital:.6f} vs accumulated {expected:.6f}")

        ledger.capital_series.append(capital)
        ledger.cr_series.append((capital / cfg.initial_capital - 1.0) * 100.0)
        capital_prev = capital
        prev_prices = price_map
    return ledger


def max_drawdown(capital_series) -> float:
    """Largest peak-to-trough capital drop, in percent of the peak."""
    worst = 0.0
    peak = -np.inf
    for value in capital_series:
        peak = max(peak, value)
        if peak > 0:
            worst = max(worst, (peak - value) / peak * 100.0)
    return worst


def write_cr_csv(path, ledger: BacktestLedger, dates=None) -> None:
    with open(path, "w") as fh:
        fh.write("day,date,capital,cr_pct\n")
        for day, (capital, cr) in enumerate(zip(ledger.capital_series,
                                                ledger.cr_series)):
            stamp = np.datetime_as_string(dates[day], unit="D") if dates is not None else ""
            fh.write(f"{day},{stamp},{capital:.10g},{cr:.10g}\n")


def write_trades_csv(path, ledger: BacktestLedger) -> None:
    with open(path, "w") as fh:
        fh.write("day,asset,side,shares,price,cost\n")
        for t in ledger.trades:
            fh.write(f"{t.day},{t.asset},{t.side},{t.shares:.10g},"
                     f"{t.price:.10g},{t.cost:.10g}\n")
