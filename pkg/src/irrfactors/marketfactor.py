"""Market-level irrationality factors via self-supervised representation learning.

Per period, each stock gets a dynamic representation: its current feature
vector concatenated with a self-attention summary of a short history window.
An ID-involved non-negative weight combines the stock representations into a
market representation m_t. Two tasks shape m_t: contrastive agreement between
two random sub-market halves of the same period (InfoNCE), and prediction of
the next period's market synchronism label from m_{t-1}.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .panel import MarketPanel, SynchronismConfig, compute_deltas, compute_synchronism_labels
from .rng import stream

logger = logging.getLogger(__name__)


class TooFewStocks(ValueError):
    """Splitting needs at least 2 stocks."""


class TooEarly(ValueError):
    """The history window does not fit before the requested period."""


class EmptySubset(ValueError):
    """A market representation needs a nonempty stock subset."""


class NoNegatives(ValueError):
    """Contrastive loss needs at least 2 periods in the batch."""


@dataclass
class MarketEncoderParams:
    """All learnable state of the market encoder and its two task heads."""

    w_s: Tensor      # (D_e, D_e) shared projection for window attention
    b_s: Tensor      # (D_e,)
    w_id: Tensor     # (2D_e, I) per-stock ID embeddings (columns)
    w_eta: Tensor    # (2D_e,) weight head
    w_crit: Tensor   # (4D_e,) contrastive criterion weight
    b_crit: Tensor   # () criterion bias
    cls_w1: Tensor   # (2D_e, H)
    cls_b1: Tensor   # (H,)
    cls_w2: Tensor   # (H, 3)
    cls_b2: Tensor   # (3,)

    @classmethod
    def init(cls, n_stocks: int, n_features: int, hidden: int,
             rng: np.random.Generator) -> "MarketEncoderParams":
        d = n_features
        two_d = 2 * d
        id_scale = 1.0 / np.sqrt(two_d)
        w_eta = rng.uniform(-1.0, 1.0, size=two_d) / np.sqrt(two_d)
        # Shift the ID embeddings along w_eta so the weight preactivations
        # start positive: ReLU would otherwise begin in its dead zone for
        # entire periods and the weight head would never receive gradient.
        w_id = rng.uniform(-id_scale, id_scale, size=(two_d, n_stocks))
        w_id += (1.5 * w_eta / np.dot(w_eta, w_eta))[:, None]
        return cls(
            w_s=ad.parameter(np.eye(d) + rng.normal(scale=0.02, size=(d, d))),
            b_s=ad.parameter(np.zeros(d)),
            w_id=ad.parameter(w_id),
            w_eta=ad.parameter(w_eta),
            w_crit=ad.parameter(rng.uniform(-1.0, 1.0, size=4 * d) / np.sqrt(4 * d)),
            b_crit=ad.parameter(0.0),
            cls_w1=ad.parameter(_glorot(rng, two_d, hidden)),
            cls_b1=ad.parameter(np.zeros(hidden)),
            cls_w2=ad.parameter(_glorot(rng, hidden, 3)),
            cls_b2=ad.parameter(np.zeros(3)),
        )

    def trainable(self) -> list[Tensor]:
        return [self.w_s, self.b_s, self.w_id, self.w_eta, self.w_crit, self.b_crit,
                self.cls_w1, self.cls_b1, self.cls_w2, self.cls_b2]

    @property
    def n_features(self) -> int:
        return self.w_s.shape[0]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class MarketFactorSeries:
    """Frozen outputs: market vectors m (T, 2D_e) and stock vectors r (I, T, 2D_e).

    Rows before window - 1 are NaN (the history window does not fit there).
    """

    m: np.ndarray
    r: np.ndarray
    window: int


# -- representation extraction -------------------------------------------


def _window_tensor(features: np.ndarray, periods: np.ndarray, window: int) -> np.ndarray:
    """(P, I, L, D) stack of history windows ending at each requested period."""
    if np.any(periods < window - 1):
        raise TooEarly(f"window of {window} does not fit before period {periods.min()}")
    return np.stack([features[:, t - window + 1:t + 1, :] for t in periods])


def _stock_reprs_op(features: np.ndarray, params: MarketEncoderParams,
                    periods: np.ndarray, window: int) -> Tensor:
    """Dynamic stock representations for a batch of periods, (P, I, 2D_e)."""
    d = params.n_features
    win = ad.constant(_window_tensor(features, periods, window))        # (P, I, L, D)
    proj = win @ ad.transpose(params.w_s) + params.b_s                  # (P, I, L, D)
    query = proj[(slice(None), slice(None), slice(window - 1, window))] # (P, I, 1, D)
    scores = (query @ ad.swapaxes(proj, -1, -2)) * (1.0 / np.sqrt(d))   # (P, I, 1, L)
    att = ad.softmax_row(scores)
    mix = att @ win                                                     # (P, I, 1, D)
    p, i = win.shape[0], win.shape[1]
    current = ad.constant(np.ascontiguousarray(win.data[:, :, window - 1, :]))
    return ad.concat([current, mix.reshape(p, i, d)], axis=-1)


def dynamic_stock_repr(panel: MarketPanel, params: MarketEncoderParams,
                       stock: int, t: int, window: int,
                       features: np.ndarray | None = None) -> np.ndarray:
    """Representation of one stock at one period: e_t || attention mix, (2D_e,)."""
    feats = panel.features if features is None else features
    reprs = _stock_reprs_op(feats, params, np.array([t]), window)
    return reprs.data[0, stock]


def stock_weight(params: MarketEncoderParams, stock: int, r: np.ndarray) -> float:
    """Non-negative combination weight for one stock representation."""
    pre = params.w_eta.data @ (params.w_id.data[:, stock] + np.asarray(r))
    return float(max(pre, 0.0))


def _market_repr_op(reprs: Tensor, params: MarketEncoderParams,
                    subset: np.ndarray) -> Tensor:
    """Weighted market representation over a stock subset, (P, 2D_e).

    Rows whose weights are all zero fall back to a uniform average (the
    normalizer would otherwise be 0/0); the event is logged.
    """
    sub = reprs[(slice(None), subset)]                                   # (P, n, 2D)
    ids = ad.transpose(params.w_id)[(subset,)]                           # (n, 2D)
    two_d = params.n_features * 2
    pre = (sub + ids) @ params.w_eta.reshape(two_d, 1)                   # (P, n, 1)
    eta = ad.relu(pre)
    totals = eta.data.sum(axis=1)
    if np.any(totals == 0.0):
        logger.debug("all stock weights zero for %d period(s); using uniform fallback",
                     int((totals == 0.0).sum()))
        fallback = np.where(totals[:, None, :] == 0.0, 1.0, 0.0)
        fallback = np.broadcast_to(fallback, eta.shape).copy()
        eta = eta + ad.constant(fallback)
    weighted = ad.swapaxes(eta, -1, -2) @ sub                            # (P, 1, 2D)
    denom = eta.sum(axis=1, keepdims=True)                               # (P, 1, 1)
    p = reprs.shape[0]
    return (weighted / denom).reshape(p, two_d)


def market_repr(panel: MarketPanel, params: MarketEncoderParams,
                subset, t: int, window: int,
                features: np.ndarray | None = None) -> np.ndarray:
    """Market representation over a stock subset at one period, (2D_e,)."""
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise EmptySubset("market representation needs a nonempty subset")
    feats = panel.features if features is None else features
    reprs = _stock_reprs_op(feats, params, np.array([t]), window)
    return _market_repr_op(reprs, params, subset).data[0]


def submarket_split(stock_ids, seed: int, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint exhaustive halves, resampled deterministically per epoch."""
    n = len(stock_ids)
    if n < 2:
        raise TooFewStocks("cannot split fewer than 2 stocks")
    perm = stream(seed, "submarket", epoch).permutation(n)
    half = (n + 1) // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


# -- self-supervised objectives -------------------------------------------


def criterion(params: MarketEncoderParams, m1: np.ndarray, m2: np.ndarray,
              t: int, t_other: int) -> float:
    """Pair criterion: exp of the joint score damped by the time gap."""
    joint = np.concatenate([np.asarray(m1), np.asarray(m2)])
    logit = float(params.w_crit.data @ joint + params.b_crit.data)
    return float(np.exp(logit / (abs(t - t_other) + 1.0)))


def _pair_logits_op(params: MarketEncoderParams, m1: Tensor, m2: Tensor,
                    periods: np.ndarray) -> Tensor:
    """Damped criterion logits for all anchor/candidate pairs, (P, P)."""
    two_d = params.n_features * 2
    w1 = params.w_crit[(slice(0, two_d),)].reshape(two_d, 1)
    w2 = params.w_crit[(slice(two_d, 2 * two_d),)].reshape(two_d, 1)
    p = len(periods)
    u = (m1 @ w1).reshape(p, 1)
    v = (m2 @ w2).reshape(1, p)
    gaps = np.abs(periods[:, None] - periods[None, :]).astype(np.float64)
    damp = ad.constant(1.0 / (gaps + 1.0))
    return (u + v + params.b_crit) * damp


def infonce_loss(params: MarketEncoderParams, panel: MarketPanel,
                 periods, window: int, seed: int, epoch: int,
                 features: np.ndarray | None = None) -> Tensor:
    """Sub-market contrastive loss over a batch of periods.

    Positives pair the two halves of the same period; negatives pair the
    anchor's first half with other periods' second halves within the batch.
    """
    periods = np.asarray(periods, dtype=np.int64)
    if periods.size < 2:
        raise NoNegatives("contrastive loss needs a batch of at least 2 periods")
    feats = panel.features if features is None else features
    sub1, sub2 = submarket_split(panel.stock_ids, seed, epoch)
    reprs = _stock_reprs_op(feats, params, periods, window)
    m1 = _market_repr_op(reprs, params, sub1)
    m2 = _market_repr_op(reprs, params, sub2)
    return _infonce_from_reprs(params, m1, m2, periods)


def _infonce_from_reprs(params: MarketEncoderParams, m1: Tensor, m2: Tensor,
                        periods: np.ndarray) -> Tensor:
    logits = _pair_logits_op(params, m1, m2, periods)
    idx = np.arange(len(periods))
    positive = logits[(idx, idx)]
    return (ad.logsumexp_row(logits) - positive).mean()


def _classifier_logits_op(params: MarketEncoderParams, m: Tensor) -> Tensor:
    hidden = ad.relu(m @ params.cls_w1 + params.cls_b1)
    return hidden @ params.cls_w2 + params.cls_b2


def synchronism_predict(params: MarketEncoderParams, m_prev: np.ndarray) -> np.ndarray:
    """3-way class distribution for the next period's synchronism label."""
    m = ad.constant(np.asarray(m_prev, dtype=np.float64).reshape(1, -1))
    logits = _classifier_logits_op(params, m)
    return ad.softmax_row(logits).data[0]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row logits."""
    idx = np.arange(logits.shape[0])
    picked = logits[(idx, np.asarray(labels, dtype=np.int64))]
    return (ad.logsumexp_row(logits) - picked).mean()


def _prediction_loss_op(params: MarketEncoderParams, feats: np.ndarray,
                        periods: np.ndarray, window: int, n_stocks: int,
                        labels: list) -> Tensor:
    full = np.arange(n_stocks)
    prev = _stock_reprs_op(feats, params, periods - 1, window)
    m_prev = _market_repr_op(prev, params, full)
    logits = _classifier_logits_op(params, m_prev)
    target = np.array([int(labels[t]) for t in periods], dtype=np.int64)
    return cross_entropy(logits, target)


def loss_P(params: MarketEncoderParams, panel: MarketPanel, periods,
           window: int, sync: SynchronismConfig,
           features: np.ndarray | None = None, labels: list | None = None) -> Tensor:
    """Synchronism-prediction loss: cross-entropy of the label of period t
    predicted from the full-market representation of period t - 1."""
    periods = np.asarray(periods, dtype=np.int64)
    feats = panel.features if features is None else features
    if labels is None:
        labels = compute_synchronism_labels(compute_deltas(panel.returns, sync), sync)
    return _prediction_loss_op(params, feats, periods, window, panel.n_stocks, labels)


def loss_M(params: MarketEncoderParams, panel: MarketPanel, periods,
           lambda2: float, window: int, sync: SynchronismConfig,
           seed: int, epoch: int, features: np.ndarray | None = None,
           labels: list | None = None) -> Tensor:
    """Joint market objective: contrastive loss plus lambda2 * prediction loss.

    The prediction term for period t reads the market representation of
    period t - 1 only, so it never sees the period it labels.
    """
    periods = np.asarray(periods, dtype=np.int64)
    feats = panel.features if features is None else features
    if labels is None:
        labels = compute_synchronism_labels(compute_deltas(panel.returns, sync), sync)
    sub1, sub2 = submarket_split(panel.stock_ids, seed, epoch)

    reprs = _stock_reprs_op(feats, params, periods, window)
    m1 = _market_repr_op(reprs, params, sub1)
    m2 = _market_repr_op(reprs, params, sub2)
    contrastive = _infonce_from_reprs(params, m1, m2, periods)
    prediction = _prediction_loss_op(params, feats, periods, window,
                                     panel.n_stocks, labels)
    return contrastive + lambda2 * prediction


# -- training --------------------------------------------------------------


@dataclass
class MarketFactorHyper:
    lambda2: float = 1.0
    window: int = 20
    lr: float = 0.01
    epochs: int = 40
    batch: int = 32
    hidden: int = 0               # 0 means 2 * D_e
    cls_weight_decay: float = 0.1  # decoupled decay on the classifier head
    seed: int = 0
    sync: SynchronismConfig = SynchronismConfig()


def train_market_factors(panel: MarketPanel, hyper: MarketFactorHyper,
                         train_end: int, features: np.ndarray | None = None
                         ) -> tuple[MarketEncoderParams, MarketFactorSeries]:
    """Minibatch-train the market encoder on the training periods.

    Splits the market into fresh halves every epoch, then freezes the
    parameters and emits m_t / r_t for every period of the panel (train and
    test alike). Deterministic given the hyper seed.
    """
    feats = panel.features if features is None else features
    d = feats.shape[2]
    hidden = hyper.hidden if hyper.hidden > 0 else 2 * d
    params = MarketEncoderParams.init(panel.n_stocks, d, hidden,
                                      stream(hyper.seed, "market", "init"))
    labels = compute_synchronism_labels(compute_deltas(panel.returns, hyper.sync), hyper.sync)

    eligible = np.arange(hyper.window, train_end)
    if eligible.size < 2:
        raise ValueError("not enough training periods for the market window")
    opt = ad.adam_init(params.trainable())
    # Decaying the prediction head keeps it from memorizing the drifting
    # level coordinates of m on markets where the label is unpredictable;
    # it then settles near the class-prior solution instead.
    head = [params.cls_w1, params.cls_w2]
    for epoch in range(hyper.epochs):
        order = stream(hyper.seed, "market", "order", epoch).permutation(eligible)
        for start in range(0, len(order), hyper.batch):
            batch = order[start:start + hyper.batch]
            if batch.size < 2:
                continue
            ad.zero_grads(params.trainable())
            with Tape() as tape:
                loss = loss_M(params, panel, batch, hyper.lambda2, hyper.window,
                              hyper.sync, hyper.seed, epoch, features=feats,
                              labels=labels)
                if not np.isfinite(loss.data):
                    raise ad.NumericalFailure("market factor loss diverged")
                tape.backward(loss)
            ad.adam_step(params.trainable(), opt, lr=hyper.lr)
            for p in head:
                p.data -= hyper.lr * hyper.cls_weight_decay * p.data

    series = market_series(panel, params, hyper.window, features=feats)
    return params, series


def market_series(panel: MarketPanel, params: MarketEncoderParams, window: int,
                  features: np.ndarray | None = None) -> MarketFactorSeries:
    """Frozen m_t and r_t for every period where the window fits."""
    feats = panel.features if features is None else features
    I, T, d = feats.shape
    m = np.full((T, 2 * d), np.nan)
    r = np.full((I, T, 2 * d), np.nan)
    periods = np.arange(window - 1, T)
    full = np.arange(I)
    chunk = 64
    for start in range(0, len(periods), chunk):
        ts = periods[start:start + chunk]
        reprs = _stock_reprs_op(feats, params, ts, window)
        ms = _market_repr_op(reprs, params, full)
        r[:, ts, :] = reprs.data.transpose(1, 0, 2)
        m[ts, :] = ms.data
    return MarketFactorSeries(m=m, r=r, window=window)


def contrastive_separation(params: MarketEncoderParams, panel: MarketPanel,
                           periods, window: int, seed: int,
                           features: np.ndarray | None = None) -> tuple[float, float]:
    """Mean positive-pair and negative-pair criterion values on given periods."""
    periods = np.asarray(periods, dtype=np.int64)
    feats = panel.features if features is None else features
    sub1, sub2 = submarket_split(panel.stock_ids, seed, "eval")
    reprs = _stock_reprs_op(feats, params, periods, window)
    m1 = _market_repr_op(reprs, params, sub1).data
    m2 = _market_repr_op(reprs, params, sub2).data
    pos, neg = [], []
    for a, ta in enumerate(periods):
        for b, tb in enumerate(periods):
            value = criterion(params, m1[a], m2[b], int(ta), int(tb))
            (pos if a == b else neg).append(value)
    return float(np.mean(pos)), float(np.mean(neg))


def classifier_accuracy(params: MarketEncoderParams, panel: MarketPanel,
                        periods, window: int,
                        features: np.ndarray | None = None,
                        labels: list | None = None,
                        sync: SynchronismConfig | None = None) -> float:
    """Held-out accuracy of the synchronism classifier on the given periods."""
    periods = np.asarray(periods, dtype=np.int64)
    feats = panel.features if features is None else features
    if labels is None:
        sync = sync or SynchronismConfig()
        labels = compute_synchronism_labels(compute_deltas(panel.returns, sync), sync)
    full = np.arange(panel.n_stocks)
    reprs = _stock_reprs_op(feats, params, periods - 1, window)
    m_prev = _market_repr_op(reprs, params, full)
    logits = _classifier_logits_op(params, m_prev).data
    predicted = logits.argmax(axis=1)
    target = np.array([int(labels[t]) for t in periods])
    return float((predicted == target).mean())
