import numpy as np
import pytest

from irrfactors.panel import (BadPrice, DuplicateRow, FeatureScaler, HoleInPanel,
                              SynchronismConfig, SyncClass, TooShort,
                              compute_deltas, compute_returns,
                              compute_synchronism_labels, labels_to_onehot,
                              load_panel, write_panel_csv)
from conftest import random_panel

HEADER = "date,stock_id,open,close,high,low,vwap,volume\n"


def _row(date, sid, close):
    return f"{date},{sid},{close},{close},{close},{close},{close},1000\n"


def _write(tmp_path, rows):
    path = tmp_path / "panel.csv"
    path.write_text(HEADER + "".join(rows))
    return path


def test_load_panel_minimal(tmp_path):
    rows = [_row(d, s, 100 + i) for i, (s, d) in enumerate(
        (s, d) for s in ("A", "B") for d in ("2020-01-01", "2020-01-02", "2020-01-03"))]
    panel = load_panel(_write(tmp_path, rows))
    assert panel.n_stocks == 2 and panel.n_periods == 3
    assert panel.stock_ids == ["A", "B"]
    assert np.isnan(panel.returns[:, 0]).all()


def test_load_panel_missing_cell(tmp_path):
    rows = [_row("2020-01-01", "A", 100), _row("2020-01-02", "A", 101),
            _row("2020-01-01", "B", 50)]
    with pytest.raises(HoleInPanel):
        load_panel(_write(tmp_path, rows))


def test_load_panel_zero_close(tmp_path):
    rows = [_row("2020-01-01", "A", 100), _row("2020-01-02", "A", 0),
            _row("2020-01-01", "B", 50), _row("2020-01-02", "B", 51)]
    with pytest.raises(BadPrice):
        load_panel(_write(tmp_path, rows))


def test_load_panel_duplicate_row(tmp_path):
    rows = [_row("2020-01-01", "A", 100), _row("2020-01-01", "A", 101)]
    with pytest.raises(DuplicateRow):
        load_panel(_write(tmp_path, rows))


def test_panel_csv_round_trip(tmp_path):
    from irrfactors.synthetic import SyntheticSpec, generate_synthetic
    panel = generate_synthetic(SyntheticSpec(n_stocks=3, n_periods=5, seed=7))
    path = tmp_path / "round.csv"
    write_panel_csv(panel, path, header_comment="hash=x seed=1")
    loaded = load_panel(path)
    np.testing.assert_allclose(loaded.prices, panel.prices, rtol=1e-15)
    np.testing.assert_allclose(loaded.features, panel.features, rtol=1e-15)


def test_compute_returns_hand_values():
    prices = np.array([[100.0, 105.0], [50.0, 50.0], [200.0, 150.0]])
    returns = compute_returns(prices)
    np.testing.assert_allclose(returns[:, 1], [5.0, 0.0, -25.0])
    assert np.isnan(returns[:, 0]).all()


def test_compute_returns_too_short():
    with pytest.raises(TooShort):
        compute_returns(np.array([[100.0]]))


def test_returns_round_trip():
    rng = np.random.default_rng(2)
    prices = 100.0 * np.exp(rng.normal(scale=0.02, size=(5, 60)).cumsum(axis=1))
    returns = compute_returns(prices)
    rebuilt = np.empty_like(prices)
    rebuilt[:, 0] = prices[:, 0]
    for t in range(1, prices.shape[1]):
        rebuilt[:, t] = rebuilt[:, t - 1] * (1.0 + returns[:, t] / 100.0)
    np.testing.assert_allclose(rebuilt, prices, rtol=1e-10)


def test_deltas_threshold_is_strict():
    cfg = SynchronismConfig(delta_threshold=0.5)
    returns = np.array([[2.0, -0.3, 0.5, -0.5, 0.51]])
    np.testing.assert_array_equal(compute_deltas(returns, cfg)[0], [1, 0, 0, 0, 1])


def test_synchronism_label_cases():
    cfg = SynchronismConfig(hm_ratio=0.7)
    deltas = np.zeros((10, 3), dtype=np.int64)
    deltas[:8, 0] = 1                      # sum 8 > H_m = 7 -> UP
    deltas[:7, 1] = -1                     # sum -7, boundary -> NEUTRAL
    labels = compute_synchronism_labels(deltas, cfg)
    assert labels == [SyncClass.UP, SyncClass.NEUTRAL, SyncClass.NEUTRAL]


def test_labels_partition_and_onehot():
    rng = np.random.default_rng(0)
    cfg = SynchronismConfig()
    deltas = rng.integers(-1, 2, size=(9, 40))
    labels = compute_synchronism_labels(deltas, cfg)
    onehot = labels_to_onehot(labels)
    np.testing.assert_array_equal(onehot.sum(axis=1), np.ones(40))
    assert set(int(v) for v in onehot.ravel()) <= {0, 1}


def test_scaler_fits_training_slice_only():
    panel = random_panel(1, n_periods=20)
    scaler = FeatureScaler.fit(panel.features, train_end=12)
    scaled = scaler.transform(panel.features)
    train = scaled[:, :12, :]
    np.testing.assert_allclose(train.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(train.std(axis=1), 1.0, atol=1e-12)
    # later periods use the same constants, so they are generally not centered
    assert abs(scaled[:, 12:, :].mean()) > 0
