import numpy as np
import pytest

from irrfactors.panel import MarketPanel, compute_returns
from irrfactors.synthetic import (CointegrationPlant, SentimentPlant, SyntheticSpec,
                                  generate_synthetic)


def random_panel(seed, n_stocks=4, n_periods=12, n_features=3) -> MarketPanel:
    """Small arbitrary panel for shape/gradient tests (no planted structure)."""
    rng = np.random.default_rng(seed)
    prices = 50.0 + 10.0 * rng.random((n_stocks, n_periods)).cumsum(axis=1) / n_periods
    features = rng.normal(size=(n_stocks, n_periods, n_features))
    return MarketPanel.from_prices(
        [f"S{i}" for i in range(n_stocks)],
        [f"2020-01-{d + 1:02d}" for d in range(n_periods)],
        features, prices)


def ablation_market_spec(seed) -> SyntheticSpec:
    """The planted market used for end-to-end learning checks.

    Six cointegrated targets with a sentiment-coupled residual, frequent
    synchronized events with a volume-borne precursor, and widely dispersed
    idiosyncratic volatilities.
    """
    plants = [CointegrationPlant(target=k, sources=(6 + k,), betas=(0.45,),
                                 noise_rho=0.45, noise_scale=1.2, event_kick=1.3)
              for k in range(6)]
    return SyntheticSpec(
        n_stocks=16, n_periods=460, base_volatility=1.5,
        volatility_spread=0.85, event_sensitivity_spread=0.0,
        plants=plants,
        sentiment=SentimentPlant(event_prob=0.65, event_magnitude=3.0,
                                 precursor_strength=0.8, precursor_noise=1.5),
        seed=seed)


def sentiment_market_spec(seed, precursor_strength=0.8) -> SyntheticSpec:
    """Events with a readable precursor and no cointegration plants."""
    return SyntheticSpec(
        n_stocks=16, n_periods=400, event_sensitivity_spread=0.3,
        sentiment=SentimentPlant(event_prob=0.6, event_magnitude=3.0,
                                 precursor_strength=precursor_strength,
                                 precursor_noise=0.6),
        seed=seed)


def linear_probe_accuracy(x_train, y_train, x_test, y_test) -> float:
    """Least-squares probe onto one-hot targets; an independent readout."""
    onehot = np.zeros((len(y_train), 3))
    onehot[np.arange(len(y_train)), y_train] = 1.0
    design = np.hstack([x_train, np.ones((len(x_train), 1))])
    weights, *_ = np.linalg.lstsq(design, onehot, rcond=None)
    scores = np.hstack([x_test, np.ones((len(x_test), 1))]) @ weights
    return float((scores.argmax(axis=1) == y_test).mean())


@pytest.fixture
def small_panel():
    return random_panel(0)


@pytest.fixture(scope="session")
def planted_panel():
    """One cointegration plant, no sentiment; matches the recovery setup."""
    spec = SyntheticSpec(
        n_stocks=8, n_periods=500,
        plants=[CointegrationPlant(target=0, sources=(1,), betas=(0.7,),
                                   noise_rho=0.6, noise_scale=2.0)],
        sentiment=SentimentPlant(event_prob=0.0),
        seed=0)
    return generate_synthetic(spec)
