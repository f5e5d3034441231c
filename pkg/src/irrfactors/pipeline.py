"""End-to-end orchestration: data, both factor stages, forecaster, backtest.

The stages run strictly in order, each one training on the periods before
the split boundary and then freezing its parameters:

1. stock factors   (cointegration attention on prices)
2. market factors  (contrastive + synchronism encoder on features)
3. forecaster      (temporal + relation model on factor-augmented windows)
4. backtest        (long-short hedge on the test-period forecasts)

Each stage checkpoints its parameters in the run directory; rerunning with
artifacts present reloads them instead of retraining, so deleting only the
downstream files reproduces them from the upstream checkpoints. All outputs
are stamped with the config hash and seed, and a rerun with identical config
and seed is byte-identical.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import forecaster as fc
from . import marketfactor as mf
from . import stockfactor as sf
from .config import RunConfig
from .evaluation import BacktestReport, run_backtest
from .panel import FeatureScaler, MarketPanel, load_panel
from .synthetic import generate_synthetic

STAGES = ("data", "stock-factors", "market-factors", "forecaster", "backtest")

REPORT_METRIC_ORDER = ("rmse", "mae", "ic", "icir", "rank_ic", "rank_icir",
                       "ar", "av", "sr", "mdd", "cr")


class PipelineStageError(RuntimeError):
    """A stage failed; carries the stage name for the CLI exit message."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class MissingArtifact(FileNotFoundError):
    """A required run-directory file is absent."""


@dataclass
class TrainedArtifacts:
    """Everything the frozen pipeline needs to map a panel to predictions."""

    panel: MarketPanel
    train_end: int
    scaler: FeatureScaler
    coint_params: sf.CointegrationParams
    market_params: mf.MarketEncoderParams
    fc_params: fc.ForecasterParams
    fc_hyper: fc.ForecasterHyper
    prediction: fc.Prediction
    report: BacktestReport
    normalize_prices: bool


def _stage(name: str):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PipelineStageError:
                raise
            except Exception as e:
                raise PipelineStageError(name, e) from e
        return inner
    return wrap


@_stage("data")
def _load_data(cfg: RunConfig) -> tuple[MarketPanel, int, FeatureScaler]:
    if cfg["data.source"] == "csv":
        panel = load_panel(cfg["data.csv_path"])
    else:
        panel = generate_synthetic(cfg.synthetic_spec())
    boundary = cfg["split.train_end"]
    train_end = panel.resolve_period(int(boundary) if boundary.lstrip("-").isdigit()
                                     else boundary)
    window = cfg["model.window"]
    if not window + 10 <= train_end < panel.n_periods:
        raise ValueError(
            f"train_end {train_end} leaves no room for training or testing "
            f"(panel has {panel.n_periods} periods, window {window})")
    if cfg["data.normalize_features"]:
        scaler = FeatureScaler.fit(panel.features, train_end)
    else:
        scaler = FeatureScaler.identity(panel.n_stocks, panel.n_features)
    return panel, train_end, scaler


def _save_params(path: str, arrays: dict, stamp: str) -> None:
    np.savez(path, __stamp__=np.array(stamp), **arrays)


def _load_params(path: str, stamp: str) -> dict:
    with np.load(path) as data:
        found = str(data["__stamp__"]) if "__stamp__" in data.files else "<unstamped>"
        if found != stamp:
            raise ValueError(
                f"checkpoint {path} belongs to a different run ({found}); "
                f"clear the run directory to retrain")
        return {k: data[k] for k in data.files if k != "__stamp__"}


@_stage("stock-factors")
def _stage_stock_factors(cfg: RunConfig, panel: MarketPanel, train_end: int,
                         run_dir: str, stamp: str
                         ) -> tuple[sf.CointegrationParams, sf.StockFactorSeries]:
    ckpt = os.path.join(run_dir, "params_stock.npz")
    hyper = sf.StockFactorHyper(
        lambda1=cfg["factors.lambda1"], lr=cfg["factors.lr"],
        steps=cfg["factors.steps"], seed=cfg["seed"],
        normalize_prices=cfg["factors.normalize_prices"])
    if os.path.exists(ckpt):
        arrays = _load_params(ckpt, stamp)
        params = sf.CointegrationParams.init(panel.n_stocks)
        params.beta.data = arrays["beta"]
        params.w_att.data = arrays["w_att"]
        params.rho_raw.data = arrays["rho_raw"]
        series = sf.residual(panel, params, normalize_prices=hyper.normalize_prices)
    else:
        params, _ = sf.train_stock_factors(panel, hyper, train_end=train_end)
        series = sf.residual(panel, params, normalize_prices=hyper.normalize_prices)
        _save_params(ckpt, {"beta": params.beta.data, "w_att": params.w_att.data,
                            "rho_raw": params.rho_raw.data}, stamp)
    return params, series


@_stage("market-factors")
def _stage_market_factors(cfg: RunConfig, panel: MarketPanel, train_end: int,
                          feats: np.ndarray, run_dir: str, stamp: str
                          ) -> tuple[mf.MarketEncoderParams, mf.MarketFactorSeries]:
    ckpt = os.path.join(run_dir, "params_market.npz")
    hyper = mf.MarketFactorHyper(
        lambda2=cfg["market.lambda2"], window=cfg["model.window"],
        lr=cfg["market.lr"], epochs=cfg["market.epochs"],
        batch=cfg["market.batch"], hidden=cfg["market.hidden"],
        cls_weight_decay=cfg["market.cls_weight_decay"],
        seed=cfg["seed"], sync=cfg.synchronism())
    if os.path.exists(ckpt):
        arrays = _load_params(ckpt, stamp)
        hidden = arrays["cls_w1"].shape[1]
        params = mf.MarketEncoderParams.init(
            panel.n_stocks, panel.n_features, hidden,
            np.random.default_rng(0))
        for name, tensor in _market_tensors(params).items():
            tensor.data = arrays[name]
        series = mf.market_series(panel, params, hyper.window, features=feats)
    else:
        params, series = mf.train_market_factors(panel, hyper, train_end, features=feats)
        _save_params(ckpt, {name: t.data for name, t in _market_tensors(params).items()},
                     stamp)
    return params, series


def _market_tensors(params: mf.MarketEncoderParams) -> dict:
    return {"w_s": params.w_s, "b_s": params.b_s, "w_id": params.w_id,
            "w_eta": params.w_eta, "w_crit": params.w_crit, "b_crit": params.b_crit,
            "cls_w1": params.cls_w1, "cls_b1": params.cls_b1,
            "cls_w2": params.cls_w2, "cls_b2": params.cls_b2}


@_stage("forecaster")
def _stage_forecaster(cfg: RunConfig, panel: MarketPanel, train_end: int,
                      feats: np.ndarray, factors: sf.StockFactorSeries,
                      mseries: mf.MarketFactorSeries, run_dir: str, stamp: str
                      ) -> tuple[fc.ForecasterParams, fc.ForecasterHyper, fc.Prediction]:
    ckpt = os.path.join(run_dir, "params_forecaster.npz")
    ablation = cfg["ablation"]
    hyper = fc.ForecasterHyper(
        window=cfg["model.window"], width=cfg["forecast.width"],
        blocks=cfg["forecast.blocks"], heads=cfg["forecast.heads"],
        lr=cfg["forecast.lr"], max_epochs=cfg["forecast.max_epochs"],
        patience=cfg["forecast.patience"], val_fraction=cfg["forecast.val_fraction"],
        lambda3=0.0 if ablation == "NR" else cfg["forecast.lambda3"],
        use_stock_factor=ablation != "NS",
        use_market_factor=ablation != "NM",
        use_relation=ablation != "ND",
        seed=cfg["seed"])
    if os.path.exists(ckpt):
        arrays = _load_params(ckpt, stamp)
        params = fc.ForecasterParams.init(panel.n_features, hyper,
                                          np.random.default_rng(0))
        for name, tensor in zip(_forecaster_names(params), params.trainable()):
            tensor.data = arrays[name]
        test_periods = list(range(train_end, panel.n_periods))
        y_hat = fc.predict_periods(params, hyper, feats, factors.u, mseries, test_periods)
        prediction = fc.Prediction(periods=test_periods, y_hat=y_hat,
                                   y_true=panel.returns[:, test_periods])
    else:
        params, prediction = fc.train_forecaster(feats, panel.returns, factors,
                                                 mseries, hyper, train_end)
        _save_params(ckpt, dict(zip(_forecaster_names(params),
                                    (t.data for t in params.trainable()))), stamp)
    return params, hyper, prediction


def _forecaster_names(params: fc.ForecasterParams) -> list[str]:
    names = ["w_in", "b_in"]
    for i, blk in enumerate(params.blocks):
        names.extend(f"blk{i}.{key}" for key in blk)
    if params.p_c is not None:
        names.extend(["p_c", "w_y"])
    names.extend(["head_w1", "head_b1", "head_w2", "head_b2"])
    return names


@_stage("backtest")
def _stage_backtest(cfg: RunConfig, prediction: fc.Prediction) -> BacktestReport:
    return run_backtest(prediction.y_hat, prediction.y_true, cfg.portfolio())


def run_pipeline(cfg: RunConfig, run_dir: str | None = None) -> TrainedArtifacts:
    """Execute all stages and write the run artifacts.

    Writes factors.csv, market_repr.csv, predictions.csv, series.csv and
    report.txt into the run directory, plus per-stage parameter checkpoints.
    """
    run_dir = cfg["out_dir"] if run_dir is None else run_dir
    os.makedirs(run_dir, exist_ok=True)
    stamp = f"config_hash={cfg.config_hash()} seed={cfg['seed']}"

    panel, train_end, scaler = _load_data(cfg)
    feats = scaler.transform(panel.features)

    coint_params, factors = _stage_stock_factors(cfg, panel, train_end, run_dir, stamp)
    _write_factors_csv(os.path.join(run_dir, "factors.csv"), panel, factors, stamp)

    market_params, mseries = _stage_market_factors(cfg, panel, train_end, feats, run_dir, stamp)
    _write_market_csv(os.path.join(run_dir, "market_repr.csv"), panel, mseries, stamp)
    _write_labels_csv(os.path.join(run_dir, "labels.csv"), panel, cfg, stamp)

    fc_params, fc_hyper, prediction = _stage_forecaster(
        cfg, panel, train_end, feats, factors, mseries, run_dir, stamp)
    _write_predictions_csv(os.path.join(run_dir, "predictions.csv"), panel, prediction, stamp)

    report = _stage_backtest(cfg, prediction)
    _write_series_csv(os.path.join(run_dir, "series.csv"), panel, prediction, report, stamp)
    _write_report(os.path.join(run_dir, "report.txt"), cfg, panel, train_end,
                  prediction, report, stamp)

    return TrainedArtifacts(
        panel=panel, train_end=train_end, scaler=scaler,
        coint_params=coint_params, market_params=market_params,
        fc_params=fc_params, fc_hyper=fc_hyper,
        prediction=prediction, report=report,
        normalize_prices=cfg["factors.normalize_prices"])


def predict_with_artifacts(artifacts: TrainedArtifacts, panel: MarketPanel,
                           periods) -> np.ndarray:
    """Frozen-pipeline forecasts for `periods` of a (possibly modified) panel.

    Re-derives the factor series from the given panel with the trained
    parameters, so the output for period t depends only on panel data at
    periods <= t - 1.
    """
    feats = artifacts.scaler.transform(panel.features)
    factors = sf.residual(panel, artifacts.coint_params,
                          normalize_prices=artifacts.normalize_prices)
    mseries = mf.market_series(panel, artifacts.market_params,
                               artifacts.fc_hyper.window, features=feats)
    return fc.predict_periods(artifacts.fc_params, artifacts.fc_hyper, feats,
                              factors.u, mseries, periods)


# -- artifact files -----------------------------------------------------------


def _write_factors_csv(path, panel, factors: sf.StockFactorSeries, stamp: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        writer = csv.writer(fh)
        writer.writerow(["stock_id", "date", "u", "p_tilde"])
        for i, sid in enumerate(panel.stock_ids):
            for t, date in enumerate(panel.periods):
                writer.writerow([sid, date, repr(float(factors.u[i, t])),
                                 repr(float(factors.p_tilde[i, t]))])


def _write_market_csv(path, panel, mseries: mf.MarketFactorSeries, stamp: str) -> None:
    width = mseries.m.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        writer = csv.writer(fh)
        writer.writerow(["date"] + [f"m_{j + 1}" for j in range(width)])
        for t, date in enumerate(panel.periods):
            if np.isnan(mseries.m[t]).any():
                continue
            writer.writerow([date] + [repr(float(v)) for v in mseries.m[t]])


def _write_labels_csv(path, panel, cfg: RunConfig, stamp: str) -> None:
    """Synchronism labels per period, for auditing the prediction task."""
    from .panel import compute_deltas, compute_synchronism_labels
    sync = cfg.synchronism()
    deltas = compute_deltas(panel.returns, sync)
    labels = compute_synchronism_labels(deltas, sync)
    sums = deltas.sum(axis=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        writer = csv.writer(fh)
        writer.writerow(["date", "sum_delta", "label"])
        for t, date in enumerate(panel.periods):
            writer.writerow([date, int(sums[t]), labels[t].name])


def _write_predictions_csv(path, panel, prediction: fc.Prediction, stamp: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        writer = csv.writer(fh)
        writer.writerow(["date", "stock_id", "y_hat", "y_true"])
        for k, t in enumerate(prediction.periods):
            for i, sid in enumerate(panel.stock_ids):
                writer.writerow([panel.periods[t], sid,
                                 repr(float(prediction.y_hat[i, k])),
                                 repr(float(prediction.y_true[i, k]))])


def _write_series_csv(path, panel, prediction: fc.Prediction,
                      report: BacktestReport, stamp: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        writer = csv.writer(fh)
        writer.writerow(["date", "y_str", "net_return", "cumulative_wealth"])
        for k, t in enumerate(prediction.periods):
            writer.writerow([panel.periods[t], repr(float(report.gross[k])),
                             repr(float(report.net[k])), repr(float(report.wealth[k]))])


def _write_report(path, cfg: RunConfig, panel, train_end: int,
                  prediction: fc.Prediction, report: BacktestReport, stamp: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        fh.write(f"n_stocks: {panel.n_stocks}\n")
        fh.write(f"n_periods: {panel.n_periods}\n")
        fh.write(f"train_end: {train_end}\n")
        fh.write(f"n_test_periods: {len(prediction.periods)}\n")
        fh.write(f"ablation: {cfg['ablation']}\n")
        for key in REPORT_METRIC_ORDER:
            fh.write(f"{key}: {report.metrics[key]!r}\n")
        fh.write(f"final_wealth: {report.metrics['final_wealth']!r}\n")
        fh.write(f"flags: {','.join(report.flags) if report.flags else 'none'}\n")


def read_report(run_dir: str) -> dict:
    """Parse report.txt back into a dict of strings/floats."""
    path = os.path.join(run_dir, "report.txt")
    if not os.path.exists(path):
        raise MissingArtifact(f"missing artifact: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or ":" not in line:
                continue
            key, value = line.split(":", 1)
            value = value.strip()
            try:
                out[key.strip()] = float(value)
            except ValueError:
                out[key.strip()] = value
    return out


def format_report(run_dir: str) -> str:
    """Human-readable metric block for a completed run directory."""
    for name in ("predictions.csv", "series.csv", "report.txt"):
        if not os.path.exists(os.path.join(run_dir, name)):
            raise MissingArtifact(f"missing artifact: {os.path.join(run_dir, name)}")
    values = read_report(run_dir)
    labels = {
        "rmse": ("RMSE", "{:.4f}"), "mae": ("MAE", "{:.4f}"),
        "ic": ("IC", "{:.3f}"), "icir": ("ICIR", "{:.3f}"),
        "rank_ic": ("RankIC", "{:.3f}"), "rank_icir": ("RankICIR", "{:.3f}"),
        "ar": ("AR", "{:.3f}"), "av": ("AV", "{:.3f}"), "sr": ("SR", "{:.3f}"),
        "mdd": ("MDD", "{:.3f}"), "cr": ("CR", "{:.3f}"),
    }
    lines = [f"run: {run_dir}"]
    for key in REPORT_METRIC_ORDER:
        name, fmt = labels[key]
        lines.append(f"{name:<10}{fmt.format(values[key])}")
    return "\n".join(lines)
