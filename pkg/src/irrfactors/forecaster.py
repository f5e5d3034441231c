"""Next-period return forecaster on factor-augmented feature windows.

Per stock, an L-step window of feature vectors concatenated with the
stock-level factor runs through a small transformer encoder; a relation
attention layer mixes the per-stock encodings across the market; an MLP head
maps encoding, relation context, and the previous period's market factor to
a scalar return forecast. Training minimizes MSE plus a rank-correlation
regularizer so the cross-sectional ordering of forecasts matters, not just
their magnitudes.

Everything a prediction for period t consumes has period index <= t - 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .evaluation import average_ranks, pearson
from .marketfactor import MarketFactorSeries
from .rng import stream
from .stockfactor import StockFactorSeries


class AlignmentError(ValueError):
    """Factor series and panel disagree on shape."""


@dataclass
class ForecasterHyper:
    window: int = 20
    width: int = 64
    blocks: int = 2
    heads: int = 4
    lr: float = 1e-3
    max_epochs: int = 60
    patience: int = 10
    val_fraction: float = 0.15
    lambda3: float = 0.1
    use_stock_factor: bool = True    # off = NS ablation
    use_market_factor: bool = True   # off = NM ablation
    use_relation: bool = True        # off = ND ablation
    seed: int = 0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("encoder width must be divisible by the head count")


@dataclass
class ForecasterParams:
    """Learnable state: input projection, encoder blocks, relation layer, head."""

    w_in: Tensor
    b_in: Tensor
    blocks: list[dict]
    p_c: Tensor | None    # (width, 2D_e) projection into the relation space
    w_y: Tensor | None    # (2D_e, 2D_e) relation bilinear map
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor
    pos_enc: np.ndarray = field(repr=False, default=None)

    @classmethod
    def init(cls, n_features: int, hyper: ForecasterHyper,
             rng: np.random.Generator) -> "ForecasterParams":
        w = hyper.width
        d_in = n_features + (1 if hyper.use_stock_factor else 0)
        two_d = 2 * n_features
        blocks = []
        for _ in range(hyper.blocks):
            blocks.append({
                "w_q": ad.parameter(_glorot(rng, w, w)),
                "w_k": ad.parameter(_glorot(rng, w, w)),
                "w_v": ad.parameter(_glorot(rng, w, w)),
                "w_o": ad.parameter(_glorot(rng, w, w)),
                "ln1_g": ad.parameter(np.ones(w)),
                "ln1_b": ad.parameter(np.zeros(w)),
                "ff_w1": ad.parameter(_glorot(rng, w, 2 * w)),
                "ff_b1": ad.parameter(np.zeros(2 * w)),
                "ff_w2": ad.parameter(_glorot(rng, 2 * w, w)),
                "ff_b2": ad.parameter(np.zeros(w)),
                "ln2_g": ad.parameter(np.ones(w)),
                "ln2_b": ad.parameter(np.zeros(w)),
            })
        head_in = w + (w if hyper.use_relation else 0) + two_d
        return cls(
            w_in=ad.parameter(_glorot(rng, d_in, w)),
            b_in=ad.parameter(np.zeros(w)),
            blocks=blocks,
            p_c=ad.parameter(_glorot(rng, w, two_d)) if hyper.use_relation else None,
            w_y=ad.parameter(_glorot(rng, two_d, two_d)) if hyper.use_relation else None,
            head_w1=ad.parameter(_glorot(rng, head_in, w)),
            head_b1=ad.parameter(np.zeros(w)),
            head_w2=ad.parameter(_glorot(rng, w, 1)),
            head_b2=ad.parameter(np.zeros(1)),
            pos_enc=_sinusoidal(hyper.window, w),
        )

    def trainable(self) -> list[Tensor]:
        out = [self.w_in, self.b_in]
        for blk in self.blocks:
            out.extend(blk.values())
        if self.p_c is not None:
            out.extend([self.p_c, self.w_y])
        out.extend([self.head_w1, self.head_b1, self.head_w2, self.head_b2])
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.trainable()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, data in zip(self.trainable(), snap):
            p.data = data.copy()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _sinusoidal(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    dim = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / width)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


@dataclass
class Prediction:
    """Forecasts for the test periods, panel-shaped (I, n_periods)."""

    periods: list[int]
    y_hat: np.ndarray
    y_true: np.ndarray


# -- model pieces ----------------------------------------------------------


def build_inputs(features: np.ndarray, u: np.ndarray, t: int, window: int,
                 use_stock_factor: bool = True) -> np.ndarray:
    """Per-stock input window for predicting period t, (I, L, D_in).

    Position l holds features and factor of period t - window + l, the last
    position holds period t - 1.
    """
    I, T, _ = features.shape
    if u.shape != (I, T):
        raise AlignmentError(f"factor series {u.shape} does not match panel ({I}, {T})")
    if not window <= t <= T:
        raise ValueError(f"window of {window} does not fit before period {t}")
    feat_win = features[:, t - window:t, :]
    if not use_stock_factor:
        return feat_win.copy()
    return np.concatenate([feat_win, u[:, t - window:t, None]], axis=-1)


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / sd * gain + bias


def _encoder_block(x: Tensor, blk: dict, heads: int) -> Tensor:
    n, length, width = x.shape
    dh = width // heads
    scale = 1.0 / np.sqrt(dh)

    def split(t: Tensor) -> Tensor:
        return ad.swapaxes(t.reshape(n, length, heads, dh), 1, 2)

    q = split(x @ blk["w_q"])
    k = split(x @ blk["w_k"])
    v = split(x @ blk["w_v"])
    scores = (q @ ad.swapaxes(k, -1, -2)) * scale
    mixed = ad.softmax_row(scores) @ v
    mixed = ad.swapaxes(mixed, 1, 2).reshape(n, length, width)
    x = _layer_norm(x + mixed @ blk["w_o"], blk["ln1_g"], blk["ln1_b"])
    ff = ad.relu(x @ blk["ff_w1"] + blk["ff_b1"]) @ blk["ff_w2"] + blk["ff_b2"]
    return _layer_norm(x + ff, blk["ln2_g"], blk["ln2_b"])


def _temporal_encode_op(params: ForecasterParams, g: np.ndarray, heads: int) -> Tensor:
    """Encode (I, L, D_in) windows into per-stock vectors (I, width)."""
    length = g.shape[1]
    x = ad.constant(g) @ params.w_in + params.b_in
    x = x + ad.constant(params.pos_enc[:length])
    for blk in params.blocks:
        x = _encoder_block(x, blk, heads)
    return x[(slice(None), length - 1)]


def temporal_encode(params: ForecasterParams, g: np.ndarray, heads: int = 4) -> np.ndarray:
    """Frozen-parameter encoding of one batch of windows."""
    return _temporal_encode_op(params, np.asarray(g, dtype=np.float64), heads).data


def _relation_op(params: ForecasterParams, c: Tensor, r_prev: np.ndarray) -> Tensor:
    """Relation-attention context: softmax over pairwise scores, mixing c."""
    v = c @ params.p_c + ad.constant(r_prev)
    z = v @ ad.transpose(params.w_y)
    scores = z @ ad.transpose(z)
    att = ad.softmax_row(scores)
    return att @ c


def relation_attention(params: ForecasterParams, c: np.ndarray,
                       r_prev: np.ndarray) -> np.ndarray:
    """Frozen-parameter relation context for per-stock encodings (I, width)."""
    return _relation_op(params, ad.constant(c), np.asarray(r_prev)).data


def _head_op(params: ForecasterParams, parts: list[Tensor]) -> Tensor:
    x = ad.concat(parts, axis=-1)
    hidden = ad.relu(x @ params.head_w1 + params.head_b1)
    out = hidden @ params.head_w2 + params.head_b2
    return out.reshape(-1)


def _predict_op(params: ForecasterParams, hyper: ForecasterHyper,
                g: np.ndarray, r_prev: np.ndarray, m_prev: np.ndarray) -> Tensor:
    c = _temporal_encode_op(params, g, hyper.heads)
    n = g.shape[0]
    if hyper.use_market_factor:
        m_tile = np.tile(np.asarray(m_prev, dtype=np.float64), (n, 1))
    else:
        m_tile = np.zeros((n, len(m_prev)))
    parts = [c]
    if hyper.use_relation:
        parts.append(_relation_op(params, c, r_prev))
    parts.append(ad.constant(m_tile))
    return _head_op(params, parts)


def predict(params: ForecasterParams, hyper: ForecasterHyper, g: np.ndarray,
            r_prev: np.ndarray, m_prev: np.ndarray) -> np.ndarray:
    """Frozen-parameter forecast for one period, (I,)."""
    return _predict_op(params, hyper, g, r_prev, m_prev).data


# -- objective -------------------------------------------------------------


def ic_t(y_hat, z) -> float:
    """Pearson correlation (population moments) between forecasts and ranks.

    Returns 0 for a constant forecast vector (the correlation is undefined
    there, and 0 is the neutral value for the regularizer).
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if y_hat.size < 2:
        raise ValueError("correlation needs at least 2 stocks")
    return pearson(y_hat, z)


def _ic_op(y_hat: Tensor, z: np.ndarray) -> Tensor:
    z = np.asarray(z, dtype=np.float64)
    zc = ad.constant(z - z.mean())
    z_sd = float(z.std())
    if z_sd == 0.0:
        return ad.constant(0.0)
    centered = y_hat - y_hat.mean()
    cov = (centered * zc).mean()
    return cov / (y_hat.std() * z_sd)


def loss_total(y_hat: Tensor, y: np.ndarray, z: np.ndarray, lambda3: float) -> Tensor:
    """Per-period objective: mean squared error minus lambda3 times the IC."""
    diff = y_hat - ad.constant(np.asarray(y, dtype=np.float64))
    mse = (diff * diff).mean()
    if lambda3 == 0.0:
        return mse
    return mse + (-lambda3) * _ic_op(y_hat, z)


# -- training ---------------------------------------------------------------


def train_forecaster(features: np.ndarray, returns: np.ndarray,
                     stock_factors: StockFactorSeries,
                     market_factors: MarketFactorSeries,
                     hyper: ForecasterHyper, train_end: int
                     ) -> tuple[ForecasterParams, Prediction]:
    """Train on periods before train_end, predict every period from it on.

    The factor inputs are frozen; one optimization step consumes one period
    (all stocks). A tail slice of the training range serves as validation:
    training stops when the validation rank correlation has not improved for
    `patience` epochs, and the best-validation parameters are restored.
    Deterministic given the hyper seed.
    """
    I, T = returns.shape
    u = stock_factors.u
    if u.shape != (I, T) or market_factors.m.shape[0] != T:
        raise AlignmentError("factor series do not match the panel")
    eligible = np.arange(max(hyper.window, market_factors.window), train_end)
    if eligible.size < 10:
        raise ValueError("not enough training periods for the forecaster window")
    n_val = max(2, int(round(hyper.val_fraction * eligible.size)))
    train_periods = eligible[:-n_val]
    val_periods = eligible[-n_val:]

    params = ForecasterParams.init(features.shape[2], hyper,
                                   stream(hyper.seed, "forecaster", "init"))
    opt = ad.adam_init(params.trainable())

    def step(t: int) -> None:
        g = build_inputs(features, u, t, hyper.window, hyper.use_stock_factor)
        y = returns[:, t]
        z = average_ranks(y)
        ad.zero_grads(params.trainable())
        with Tape() as tape:
            y_hat = _predict_op(params, hyper, g, market_factors.r[:, t - 1],
                                market_factors.m[t - 1])
            loss = loss_total(y_hat, y, z, hyper.lambda3)
            if not np.isfinite(loss.data):
                raise ad.NumericalFailure("forecaster loss diverged")
            tape.backward(loss)
        ad.adam_step(params.trainable(), opt, lr=hyper.lr)

    def val_rank_ic() -> float:
        vals = []
        for t in val_periods:
            y_hat = predict(params, hyper,
                            build_inputs(features, u, t, hyper.window,
                                         hyper.use_stock_factor),
                            market_factors.r[:, t - 1], market_factors.m[t - 1])
            vals.append(pearson(average_ranks(y_hat), average_ranks(returns[:, t])))
        return float(np.mean(vals))

    best_metric = -np.inf
    best_snap = params.snapshot()
    bad_epochs = 0
    for epoch in range(hyper.max_epochs):
        order = stream(hyper.seed, "forecaster", "order", epoch).permutation(train_periods)
        for t in order:
            step(int(t))
        metric = val_rank_ic()
        if metric > best_metric + 1e-9:
            best_metric = metric
            best_snap = params.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= hyper.patience:
                break
    params.restore(best_snap)

    test_periods = list(range(train_end, T))
    y_hat = predict_periods(params, hyper, features, u, market_factors, test_periods)
    y_true = returns[:, test_periods]
    return params, Prediction(periods=test_periods, y_hat=y_hat, y_true=y_true)


def predict_periods(params: ForecasterParams, hyper: ForecasterHyper,
                    features: np.ndarray, u: np.ndarray,
                    market_factors: MarketFactorSeries, periods) -> np.ndarray:
    """Frozen forecasts for the given periods, (I, len(periods))."""
    cols = []
    for t in periods:
        g = build_inputs(features, u, int(t), hyper.window, hyper.use_stock_factor)
        cols.append(predict(params, hyper, g, market_factors.r[:, t - 1],
                            market_factors.m[t - 1]))
    return np.stack(cols, axis=1)
