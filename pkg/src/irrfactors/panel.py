"""Market panel data model: aligned (stock x period) features, prices, returns.

The panel is the universal input of the pipeline. It is fully dense: every
stock has a row for every period, prices are strictly positive, and returns
are percent changes of the closing price with period 0 masked as NaN.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

FEATURE_NAMES = ("open", "close", "high", "low", "vwap", "volume")
CSV_COLUMNS = ("date", "stock_id") + FEATURE_NAMES


class HoleInPanel(ValueError):
    """A (stock, date) cell is missing from the input."""


class BadPrice(ValueError):
    """A non-positive closing price."""


class DuplicateRow(ValueError):
    """A (stock, date) pair appears more than once."""


class TooShort(ValueError):
    """Fewer periods than the operation requires."""


class SyncClass(IntEnum):
    """Market synchronism label; values index the one-hot encoding."""

    UP = 0
    DOWN = 1
    NEUTRAL = 2


@dataclass(frozen=True)
class SynchronismConfig:
    """Thresholds defining per-stock moves and market-wide synchrony.

    delta_threshold is the percent move beyond which a stock counts as an
    up/down mover (strict inequality). hm_ratio scales the market threshold:
    H_m = ceil(hm_ratio * I).
    """

    delta_threshold: float = 0.5
    hm_ratio: float = 0.7

    def __post_init__(self):
        if self.delta_threshold <= 0:
            raise ValueError("delta_threshold must be positive")
        if not 0.0 < self.hm_ratio < 1.0:
            raise ValueError("hm_ratio must lie in (0, 1)")

    def market_threshold(self, n_stocks: int) -> int:
        return int(math.ceil(self.hm_ratio * n_stocks))


@dataclass
class MarketPanel:
    """Aligned market data: features (I, T, D_e), prices (I, T), returns (I, T).

    returns[:, 0] is NaN (no predecessor); returns[:, t] for t >= 1 equals the
    percent change of prices.
    """

    stock_ids: list[str]
    periods: list[str]
    features: np.ndarray
    prices: np.ndarray
    returns: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_NAMES

    @property
    def n_stocks(self) -> int:
        return len(self.stock_ids)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    @property
    def n_features(self) -> int:
        return self.features.shape[2]

    def validate(self) -> None:
        I, T = self.n_stocks, self.n_periods
        if self.features.shape[:2] != (I, T) or self.prices.shape != (I, T) \
                or self.returns.shape != (I, T):
            raise ValueError("panel tensors have inconsistent shapes")
        if not np.isfinite(self.features).all() or not np.isfinite(self.prices).all():
            raise ValueError("panel contains non-finite features or prices")
        if np.any(self.prices <= 0):
            raise BadPrice("panel prices must be strictly positive")
        if T >= 2:
            expected = compute_returns(self.prices)
            if not np.allclose(self.returns[:, 1:], expected[:, 1:], rtol=1e-12, atol=1e-12):
                raise ValueError("returns do not match prices")
        if not np.isnan(self.returns[:, 0]).all():
            raise ValueError("returns at period 0 must be masked")

    @classmethod
    def from_prices(cls, stock_ids, periods, features, prices,
                    feature_names: tuple[str, ...] | None = None) -> "MarketPanel":
        features = np.asarray(features, dtype=np.float64)
        prices = np.asarray(prices, dtype=np.float64)
        if feature_names is None:
            d = features.shape[2]
            feature_names = tuple(FEATURE_NAMES[j] if j < len(FEATURE_NAMES) else f"x{j}"
                                  for j in range(d))
        panel = cls(
            stock_ids=list(stock_ids),
            periods=list(periods),
            features=features,
            prices=prices,
            returns=compute_returns(prices),
            feature_names=feature_names,
        )
        panel.validate()
        return panel

    def resolve_period(self, boundary) -> int:
        """Map a period label or integer index to an integer index."""
        if isinstance(boundary, (int, np.integer)):
            idx = int(boundary)
            if not 0 < idx <= self.n_periods:
                raise ValueError(f"period index {idx} outside panel of length {self.n_periods}")
            return idx
        try:
            return self.periods.index(str(boundary))
        except ValueError:
            raise ValueError(f"period {boundary!r} not found in panel") from None


def compute_returns(prices: np.ndarray) -> np.ndarray:
    """Percent returns (p_t - p_{t-1}) / p_{t-1} * 100 with period 0 masked."""
    prices = np.asarray(prices, dtype=np.float64)
    if prices.ndim != 2 or prices.shape[1] < 2:
        raise TooShort("need at least 2 periods to compute returns")
    if np.any(prices <= 0):
        raise BadPrice("prices must be strictly positive")
    out = np.empty_like(prices)
    out[:, 0] = np.nan
    out[:, 1:] = (prices[:, 1:] - prices[:, :-1]) / prices[:, :-1] * 100.0
    return out


def compute_deltas(returns: np.ndarray, cfg: SynchronismConfig) -> np.ndarray:
    """Per-stock move indicators in {-1, 0, 1}; strict threshold, NaN -> 0."""
    r = np.asarray(returns, dtype=np.float64)
    deltas = np.zeros(r.shape, dtype=np.int64)
    with np.errstate(invalid="ignore"):
        deltas[r > cfg.delta_threshold] = 1
        deltas[r < -cfg.delta_threshold] = -1
    return deltas


def compute_synchronism_labels(deltas: np.ndarray, cfg: SynchronismConfig) -> list[SyncClass]:
    """Per-period 3-way labels; |sum of deltas| must strictly exceed H_m."""
    deltas = np.asarray(deltas)
    h_m = cfg.market_threshold(deltas.shape[0])
    sums = deltas.sum(axis=0)
    labels = []
    for s in sums:
        if s > h_m:
            labels.append(SyncClass.UP)
        elif s < -h_m:
            labels.append(SyncClass.DOWN)
        else:
            labels.append(SyncClass.NEUTRAL)
    return labels


def labels_to_onehot(labels) -> np.ndarray:
    out = np.zeros((len(labels), 3), dtype=np.float64)
    out[np.arange(len(labels)), [int(l) for l in labels]] = 1.0
    return out


def load_panel(path, schema: dict | None = None) -> MarketPanel:
    """Load a dense panel from CSV.

    The file must carry a header with the columns date, stock_id, open, high,
    low, close, vwap, volume (renameable through `schema`, a mapping from the
    canonical names to the file's column names). Every (stock, date) pair must
    appear exactly once. Lines starting with '#' are ignored.
    """
    colmap = {name: name for name in CSV_COLUMNS}
    if schema:
        colmap.update(schema)

    rows = {}
    stocks, dates = [], []
    seen_stocks, seen_dates = set(), set()
    with open(path, newline="", encoding="utf-8") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.DictReader(lines)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        missing = [colmap[c] for c in CSV_COLUMNS if colmap[c] not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for rec in reader:
            sid = rec[colmap["stock_id"]]
            date = rec[colmap["date"]]
            key = (sid, date)
            if key in rows:
                raise DuplicateRow(f"duplicate row for stock {sid} on {date}")
            rows[key] = tuple(float(rec[colmap[name]]) for name in FEATURE_NAMES)
            if sid not in seen_stocks:
                seen_stocks.add(sid)
                stocks.append(sid)
            if date not in seen_dates:
                seen_dates.add(date)
                dates.append(date)

    stocks = sorted(stocks)
    dates = sorted(dates)
    if len(dates) < 2:
        raise TooShort("panel needs at least 2 periods")

    I, T = len(stocks), len(dates)
    features = np.empty((I, T, len(FEATURE_NAMES)), dtype=np.float64)
    for i, sid in enumerate(stocks):
        for t, date in enumerate(dates):
            cell = rows.get((sid, date))
            if cell is None:
                raise HoleInPanel(f"missing row for stock {sid} on {date}")
            features[i, t, :] = cell

    close_idx = FEATURE_NAMES.index("close")
    prices = features[:, :, close_idx].copy()
    if np.any(prices <= 0):
        bad = np.argwhere(prices <= 0)[0]
        raise BadPrice(f"non-positive close for stock {stocks[bad[0]]} on {dates[bad[1]]}")
    return MarketPanel.from_prices(stocks, dates, features, prices)


def write_panel_csv(panel: MarketPanel, path, header_comment: str | None = None) -> None:
    """Write the panel in the canonical CSV schema (one row per stock-date)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for i, sid in enumerate(panel.stock_ids):
            for t, date in enumerate(panel.periods):
                writer.writerow([date, sid] + [repr(float(v)) for v in panel.features[i, t]])


@dataclass
class FeatureScaler:
    """Per-(stock, feature) z-normalization, fit on the training periods only."""

    mu: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    @classmethod
    def fit(cls, features: np.ndarray, train_end: int) -> "FeatureScaler":
        if train_end < 2:
            raise TooShort("need at least 2 training periods to fit the scaler")
        train = features[:, :train_end, :]
        mu = train.mean(axis=1, keepdims=True)
        sigma = train.std(axis=1, keepdims=True)
        sigma = np.where(sigma < 1e-12, 1.0, sigma)
        return cls(mu=mu, sigma=sigma)

    @classmethod
    def identity(cls, n_stocks: int, n_features: int) -> "FeatureScaler":
        return cls(mu=np.zeros((n_stocks, 1, n_features)),
                   sigma=np.ones((n_stocks, 1, n_features)))

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mu) / self.sigma
