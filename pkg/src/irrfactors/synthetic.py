"""Synthetic markets with planted structure, used as test oracles.

Two kinds of structure can be planted:

* cointegration: a target stock's price is overwritten with a linear
  combination of source prices plus an AR(1) residual, so the "right"
  combination weights and residual autocorrelation are known exactly;
* sentiment events: on event days every stock moves by a common signed
  magnitude, and the day before carries a weak per-stock precursor drift
  whose cross-sectional average reveals the coming direction.

Features are derived from prices: open gaps off the previous close, high/low
bracket the day, volume is lognormal, and vwap lags the close by a fixed
fraction of the day's move (so the signed move is readable from vwap-close).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .panel import FEATURE_NAMES, MarketPanel, compute_returns
from .rng import stream


class BadSpec(ValueError):
    """Synthetic specification violates its invariants."""


@dataclass(frozen=True)
class CointegrationPlant:
    """Overwrite `target`'s price with sum(betas * sources) + AR(1) noise.

    event_kick couples the residual to market sentiment: on an event day with
    sign s, the residual receives an extra s * event_kick * tanh(u/sd) (price
    units), i.e. sentiment pushes mispriced stocks proportionally to their
    current mispricing. Zero disables the coupling.
    """

    target: int
    sources: tuple[int, ...]
    betas: tuple[float, ...]
    noise_rho: float = 0.5
    noise_scale: float = 1.5
    event_kick: float = 0.0


@dataclass(frozen=True)
class SentimentPlant:
    """Synchronized event days with a noisy precursor one day earlier.

    The precursor leaves two traces in the features of the day before an
    event: a small price drift in the event direction and a signed tilt of
    trading volume (both per-stock noisy, so the direction is only readable
    by pooling across stocks). All strengths are in percent units;
    precursor_strength = 0 disables the directional terms entirely, while
    the per-stock noise channels stay on, so their mere presence carries no
    event information.
    """

    event_prob: float = 0.0
    event_magnitude: float = 3.0
    precursor_strength: float = 0.0
    precursor_noise: float = 0.6
    volume_coupling: float = 0.4  # log-volume shift per percent of precursor


@dataclass
class SyntheticSpec:
    """Generator specification; deterministic given `seed`."""

    n_stocks: int = 16
    n_periods: int = 400
    n_features: int = 6
    plants: list[CointegrationPlant] = field(default_factory=list)
    sentiment: SentimentPlant = field(default_factory=SentimentPlant)
    base_volatility: float = 1.0      # percent daily, mid of the per-stock range
    volatility_spread: float = 0.5    # per-stock vol ~ U(base*(1-s), base*(1+s))
    event_sensitivity_spread: float = 0.5  # per-stock event beta ~ U(1-s, 1+s)
    price_low: float = 60.0
    price_high: float = 140.0
    vwap_lag: float = 0.4             # fraction of the day's move missing from vwap
    start_date: str = "2020-01-01"
    seed: int = 0

    def validate(self) -> None:
        if self.n_stocks < 2 or self.n_periods < 3:
            raise BadSpec("need at least 2 stocks and 3 periods")
        if self.n_features < 1:
            raise BadSpec("need at least one feature")
        for plant in self.plants:
            if abs(plant.noise_rho) >= 1.0:
                raise BadSpec(f"|noise_rho| must be < 1, got {plant.noise_rho}")
            if len(plant.sources) != len(plant.betas) or not plant.sources:
                raise BadSpec("plant sources and betas must be equal-length and nonempty")
            if not 0 <= plant.target < self.n_stocks:
                raise BadSpec(f"plant target {plant.target} out of range")
            if plant.target in plant.sources:
                raise BadSpec("plant target cannot be one of its sources")
            for s in plant.sources:
                if not 0 <= s < self.n_stocks:
                    raise BadSpec(f"plant source {s} out of range")
        targets = [p.target for p in self.plants]
        if len(set(targets)) != len(targets):
            raise BadSpec("duplicate plant targets")
        sent = self.sentiment
        if not 0.0 <= sent.event_prob <= 1.0:
            raise BadSpec("event_prob must lie in [0, 1]")
        if sent.event_magnitude < 0 or sent.precursor_strength < 0 or sent.precursor_noise < 0:
            raise BadSpec("sentiment magnitudes must be non-negative")
        if not 0 < self.price_low <= self.price_high:
            raise BadSpec("price range must be positive and ordered")


def _business_days(start: str, n: int) -> list[str]:
    d = date.fromisoformat(start)
    out = []
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d.isoformat())
        d += timedelta(days=1)
    return out


def generate_synthetic(spec: SyntheticSpec) -> MarketPanel:
    """Generate a dense panel; bit-identical for identical specs."""
    spec.validate()
    I, T = spec.n_stocks, spec.n_periods
    sent = spec.sentiment

    vol_rng = stream(spec.seed, "synthetic", "vols")
    vols = spec.base_volatility * vol_rng.uniform(
        1.0 - spec.volatility_spread, 1.0 + spec.volatility_spread, size=I)
    sens = vol_rng.uniform(1.0 - spec.event_sensitivity_spread,
                           1.0 + spec.event_sensitivity_spread, size=I)

    # Event schedule: sign in {-1, 0, +1} per period; events never fall on the
    # first two periods so the precursor day always exists inside the panel.
    ev_rng = stream(spec.seed, "synthetic", "events")
    signs = np.zeros(T, dtype=np.int64)
    if sent.event_prob > 0:
        draws = ev_rng.uniform(size=T)
        direction = np.where(ev_rng.uniform(size=T) < 0.5, 1, -1)
        signs[2:] = np.where(draws[2:] < sent.event_prob, direction[2:], 0)

    # Percent returns per stock/period; column 0 unused.
    ret_rng = stream(spec.seed, "synthetic", "returns")
    rets = ret_rng.standard_normal((I, T)) * vols[:, None]
    rets[:, 1:] += signs[None, 1:] * sent.event_magnitude * sens[:, None]

    # Precursor: noise channels on every day; directional terms only on days
    # immediately preceding an event and only when strength > 0. The price
    # drift goes into returns here; the volume tilt is applied in
    # _features_from_prices from the same pre_volume array.
    pre_rng = stream(spec.seed, "synthetic", "precursor")
    pre_price = pre_rng.standard_normal((I, T)) * sent.precursor_noise
    pre_volume = pre_rng.standard_normal((I, T)) * sent.precursor_noise
    if sent.precursor_strength > 0:
        upcoming = np.zeros(T)
        upcoming[:-1] = signs[1:]
        pre_price += upcoming[None, :] * sent.precursor_strength
        pre_volume += upcoming[None, :] * sent.precursor_strength
    rets[:, 1:] += pre_price[:, 1:]

    p0_rng = stream(spec.seed, "synthetic", "prices")
    p0 = p0_rng.uniform(spec.price_low, spec.price_high, size=I)
    prices = np.empty((I, T))
    prices[:, 0] = p0
    for t in range(1, T):
        prices[:, t] = prices[:, t - 1] * (1.0 + rets[:, t] / 100.0)

    # Overwrite planted targets: price = sum(beta * source_price) + AR(1) noise.
    for k, plant in enumerate(spec.plants):
        ar_rng = stream(spec.seed, "synthetic", "plant", k)
        eps = ar_rng.standard_normal(T) * plant.noise_scale
        u_sd = plant.noise_scale / np.sqrt(1.0 - plant.noise_rho ** 2)
        u = np.empty(T)
        u[0] = eps[0] / np.sqrt(1.0 - plant.noise_rho ** 2)
        for t in range(1, T):
            u[t] = plant.noise_rho * u[t - 1] + eps[t]
            if plant.event_kick and signs[t]:
                u[t] += signs[t] * plant.event_kick * np.tanh(u[t - 1] / u_sd)
        combo = np.zeros(T)
        for s, b in zip(plant.sources, plant.betas):
            combo += b * prices[s]
        prices[plant.target] = combo + u

    if np.any(prices <= 0):
        raise BadSpec("generated prices hit zero; reduce volatility or noise scale")

    features = _features_from_prices(spec, prices, sent.volume_coupling * pre_volume)
    panel = MarketPanel.from_prices(
        [f"S{i:03d}" for i in range(I)],
        _business_days(spec.start_date, T),
        features,
        prices,
    )
    return panel


def _features_from_prices(spec: SyntheticSpec, prices: np.ndarray,
                          log_volume_shift: np.ndarray) -> np.ndarray:
    I, T = prices.shape
    rng = stream(spec.seed, "synthetic", "features")
    close = prices
    prev = np.empty_like(close)
    prev[:, 0] = close[:, 0]
    prev[:, 1:] = close[:, :-1]
    day_ret = (close - prev) / prev  # fractional

    open_ = prev * (1.0 + rng.standard_normal((I, T)) * 0.002)
    hi_pad = np.abs(rng.standard_normal((I, T))) * 0.003
    lo_pad = np.abs(rng.standard_normal((I, T))) * 0.003
    high = np.maximum(open_, close) * (1.0 + hi_pad)
    low = np.minimum(open_, close) * (1.0 - lo_pad)
    # vwap sits partway through the day's move, plus microstructure noise
    vwap = close * (1.0 - spec.vwap_lag * day_ret
                    + rng.standard_normal((I, T)) * 0.0005)
    volume = 1e6 * np.exp(rng.standard_normal((I, T)) * 0.3 + log_volume_shift)

    canonical = {"open": open_, "close": close, "high": high, "low": low,
                 "vwap": vwap, "volume": volume}
    channels = []
    for j in range(spec.n_features):
        if j < len(FEATURE_NAMES):
            channels.append(canonical[FEATURE_NAMES[j]])
        else:
            channels.append(rng.standard_normal((I, T)))
    return np.stack(channels, axis=-1)
