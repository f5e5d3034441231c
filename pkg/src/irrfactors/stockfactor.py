"""Stock-level irrationality factors via learned soft cointegration.

Each stock gets a virtual rational price: an attention-weighted combination
of the other stocks' scaled prices. The residual between virtual and actual
price is the stock-level factor; a regression loss pulls the virtual price
onto the actual one and an AR(1) stationarity penalty (with |rho| < 1 by
tanh reparameterization) keeps the residual mean-reverting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .panel import MarketPanel

ATT_MASK = -1e30  # additive logit mask that zeroes the diagonal after softmax


class TooFewStocks(ValueError):
    """The operation needs at least 2 stocks."""


class TooShortSeries(ValueError):
    """The operation needs more periods than were provided."""


@dataclass
class CointegrationParams:
    """Learnable combination weights: betas, attention logits, AR coefficients.

    rho is stored unconstrained as rho_raw; tanh keeps |rho| < 1 for every
    finite value, so the stationarity constraint holds by construction.
    """

    beta: Tensor       # (I, I), diagonal unused
    w_att: Tensor      # (I, I) attention logits, diagonal unused
    rho_raw: Tensor    # (I,)

    @classmethod
    def init(cls, n_stocks: int) -> "CointegrationParams":
        if n_stocks < 2:
            raise TooFewStocks("cointegration attention needs at least 2 stocks")
        return cls(
            beta=ad.parameter(np.ones((n_stocks, n_stocks))),
            w_att=ad.parameter(np.zeros((n_stocks, n_stocks))),
            rho_raw=ad.parameter(np.zeros(n_stocks)),
        )

    def trainable(self) -> list[Tensor]:
        return [self.beta, self.w_att, self.rho_raw]

    @property
    def rho(self) -> np.ndarray:
        return np.tanh(self.rho_raw.data)

    def attention(self) -> np.ndarray:
        return _attention_op(self).data


@dataclass
class StockFactorSeries:
    """Residual factor u and the virtual price it came from; u = p_tilde - p."""

    u: np.ndarray        # (I, T)
    p_tilde: np.ndarray  # (I, T)


def _attention_op(params: CointegrationParams) -> Tensor:
    n = params.w_att.shape[0]
    mask = ad.constant(np.where(np.eye(n, dtype=bool), ATT_MASK, 0.0))
    return ad.softmax_row(params.w_att + mask)


def _virtual_price_op(prices: Tensor, params: CointegrationParams) -> Tensor:
    att = _attention_op(params)
    return (att * params.beta) @ prices


def virtual_price(panel: MarketPanel, params: CointegrationParams,
                  normalize_prices: bool = False) -> np.ndarray:
    """Virtual rational price for every stock and period, (I, T)."""
    if panel.n_stocks < 2:
        raise TooFewStocks("virtual price needs at least 2 stocks")
    prices = _prepare_prices(panel.prices, normalize_prices)
    return _virtual_price_op(ad.constant(prices), params).data


def residual(panel: MarketPanel, params: CointegrationParams,
             normalize_prices: bool = False) -> StockFactorSeries:
    """Factor series u = p_tilde - p on the panel's (possibly scaled) prices."""
    prices = _prepare_prices(panel.prices, normalize_prices)
    p_tilde = _virtual_price_op(ad.constant(prices), params).data
    return StockFactorSeries(u=p_tilde - prices, p_tilde=p_tilde)


def _prepare_prices(prices: np.ndarray, normalize: bool) -> np.ndarray:
    if not normalize:
        return prices
    return prices / prices[:, :1]


def loss_beta(panel: MarketPanel, params: CointegrationParams,
              train_end: int | None = None, normalize_prices: bool = False) -> Tensor:
    """Mean squared regression error between actual and virtual prices."""
    prices = _train_prices(panel, train_end, normalize_prices)
    p = ad.constant(prices)
    p_tilde = _virtual_price_op(p, params)
    diff = p - p_tilde
    return (diff * diff).mean()


def loss_rho(panel: MarketPanel, params: CointegrationParams,
             train_end: int | None = None, normalize_prices: bool = False) -> Tensor:
    """AR(1) stationarity penalty on the residual series."""
    prices = _train_prices(panel, train_end, normalize_prices)
    if prices.shape[1] < 2:
        raise TooShortSeries("stationarity penalty needs at least 2 periods")
    p = ad.constant(prices)
    u = _virtual_price_op(p, params) - p
    return _rho_penalty(u, params)


def _rho_penalty(u: Tensor, params: CointegrationParams) -> Tensor:
    rho = ad.tanh(params.rho_raw).reshape(-1, 1)
    cur = u[(slice(None), slice(1, None))]
    prev = u[(slice(None), slice(0, -1))]
    diff = cur - rho * prev
    return (diff * diff).mean()


def loss_rho_from_u(u: np.ndarray, rho: np.ndarray) -> float:
    """The stationarity penalty evaluated on a fixed residual series."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[None, :]
    if u.shape[1] < 2:
        raise TooShortSeries("need at least 2 periods")
    rho = np.asarray(rho, dtype=np.float64).reshape(-1, 1)
    diff = u[:, 1:] - rho * u[:, :-1]
    return float((diff * diff).mean())


def loss_S(panel: MarketPanel, params: CointegrationParams, lambda1: float,
           train_end: int | None = None, normalize_prices: bool = False) -> Tensor:
    """Joint objective: regression loss plus lambda1 times the AR(1) penalty."""
    prices = _train_prices(panel, train_end, normalize_prices)
    p = ad.constant(prices)
    p_tilde = _virtual_price_op(p, params)
    diff = p - p_tilde
    reg = (diff * diff).mean()
    if prices.shape[1] < 2:
        raise TooShortSeries("joint objective needs at least 2 periods")
    return reg + lambda1 * _rho_penalty(p_tilde - p, params)


def _train_prices(panel: MarketPanel, train_end: int | None, normalize: bool) -> np.ndarray:
    if panel.n_stocks < 2:
        raise TooFewStocks("need at least 2 stocks")
    end = panel.n_periods if train_end is None else int(train_end)
    return _prepare_prices(panel.prices, normalize)[:, :end]


@dataclass
class StockFactorHyper:
    lambda1: float = 0.5
    lr: float = 0.02
    steps: int = 2000
    seed: int = 0
    normalize_prices: bool = False


def train_stock_factors(panel: MarketPanel, hyper: StockFactorHyper,
                        train_end: int | None = None
                        ) -> tuple[CointegrationParams, StockFactorSeries]:
    """Fit the combination parameters on the training periods only.

    Full-batch Adam from the fixed initialization (beta = 1, logits = 0,
    rho_raw = 0); deterministic. Returns the fitted parameters and the factor
    series for the whole panel computed with them frozen.
    """
    params = CointegrationParams.init(panel.n_stocks)
    opt = ad.adam_init(params.trainable())
    for _ in range(hyper.steps):
        ad.zero_grads(params.trainable())
        with Tape() as tape:
            loss = loss_S(panel, params, hyper.lambda1,
                          train_end=train_end, normalize_prices=hyper.normalize_prices)
            if not np.isfinite(loss.data):
                raise ad.NumericalFailure("stock factor loss diverged")
            tape.backward(loss)
        ad.adam_step(params.trainable(), opt, lr=hyper.lr)
    series = residual(panel, params, normalize_prices=hyper.normalize_prices)
    return params, series


def stationarity_diagnostic(series: np.ndarray) -> float:
    """Least-squares AR(1) coefficient (no intercept) of a series.

    rho_hat = sum(u_t * u_{t-1}) / sum(u_{t-1}^2); values near or above 1
    indicate a unit root, values well below 1 a mean-reverting series.
    All-zero input is degenerate and reports 0.
    """
    u = np.asarray(series, dtype=np.float64).reshape(-1)
    if u.size < 10:
        raise TooShortSeries("AR(1) diagnostic needs at least 10 observations")
    denom = float(np.dot(u[:-1], u[:-1]))
    if denom == 0.0:
        return 0.0
    return float(np.dot(u[1:], u[:-1]) / denom)
