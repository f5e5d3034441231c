"""Irrationality-factor learning and stock-return forecasting on market panels.

Stock-level factors come from a learned soft-cointegration residual, market-
level factors from a self-supervised market encoder; a temporal + relational
forecaster consumes both and is evaluated through a cost-aware long-short
hedging backtest.
"""

from .panel import (MarketPanel, SynchronismConfig, SyncClass, compute_deltas,
                    compute_returns, compute_synchronism_labels, load_panel)
from .synthetic import CointegrationPlant, SentimentPlant, SyntheticSpec, generate_synthetic
from .config import RunConfig
from .pipeline import TrainedArtifacts, predict_with_artifacts, run_pipeline

__all__ = [
    "MarketPanel", "SynchronismConfig", "SyncClass",
    "compute_deltas", "compute_returns", "compute_synchronism_labels", "load_panel",
    "CointegrationPlant", "SentimentPlant", "SyntheticSpec", "generate_synthetic",
    "RunConfig", "TrainedArtifacts", "predict_with_artifacts", "run_pipeline",
]
