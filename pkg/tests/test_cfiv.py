import numpy as np
import pytest

from neuraldemand.cfiv import F_CAP, build_hausman_instruments, first_stage, write_diagnostics_csv
from neuraldemand.data import PanelDataset
from neuraldemand.dgp import CES, EndogenousCES, SimConfig, generate_dataset


def _stores(prices, revenue, weeks, stores):
    prices = np.asarray(prices, float)
    revenue = np.asarray(revenue, float)
    income = revenue.sum(1)
    return PanelDataset(prices, income, revenue / income[:, None], stores, weeks)


def test_two_stores_equal_revenue():
    d = _stores([[1.0, 2.0], [3.0, 4.0]], [[5, 5], [5, 5]], [0, 0], [0, 1])
    Z, ok = build_hausman_instruments(d)
    assert ok.all()
    np.testing.assert_allclose(Z[0], np.log([3.0, 4.0]))
    np.testing.assert_allclose(Z[1], np.log([1.0, 2.0]))


def test_identical_prices_give_own_price():
    d = _stores([[2.0, 3.0]] * 3, [[1, 2], [3, 4], [5, 6]], [7, 7, 7], [0, 1, 2])
    Z, _ = build_hausman_instruments(d)
    np.testing.assert_allclose(Z, np.log([[2.0, 3.0]] * 3), rtol=1e-14)


def test_three_store_hand_computed():
    P = np.array([[1.0, 2.0], [2.0, 1.5], [4.0, 3.0]])
    R = np.array([[10.0, 20.0], [30.0, 10.0], [60.0, 70.0]])
    d = _stores(P, R, [1, 1, 1], [0, 1, 2])
    Z, _ = build_hausman_instruments(d)
    lp = np.log(P)
    for i in range(3):
        o = [j for j in range(3) if j != i]
        want = (R[o] * lp[o]).sum(0) / R[o].sum(0)
        np.testing.assert_allclose(Z[i], want, atol=1e-12)


def test_single_store_week_flagged():
    d = _stores([[1.0, 2.0], [3.0, 4.0], [2.0, 2.0]], [[5, 5], [5, 5], [1, 1]], [0, 0, 1], [0, 1, 0])
    Z, ok = build_hausman_instruments(d)
    assert ok.tolist() == [True, True, False]
    assert np.isnan(Z[2]).all()


def test_exact_first_stage():
    Z = np.random.default_rng(0).uniform(1, 5, (100, 3))
    r = first_stage(np.log(Z), np.log(Z))
    assert np.max(np.abs(r.residuals)) < 1e-12
    np.testing.assert_allclose(r.r2, 1.0)
    assert np.all(r.F == F_CAP)


def test_residual_orthogonality_and_mean():
    d = generate_dataset(EndogenousCES(), SimConfig(seed=0))
    lz = np.log(d.instruments)
    r = first_stage(d.log_prices, lz)
    X = np.column_stack([np.ones(len(lz)), lz])
    assert np.max(np.abs(X.T @ r.residuals)) / np.linalg.norm(X) < 1e-8
    np.testing.assert_allclose(r.residuals.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(r.residuals_for(d.log_prices, lz), r.residuals, atol=1e-12)


def test_residual_tracks_demand_shock():
    d = generate_dataset(EndogenousCES(), SimConfig(seed=0))
    r = first_stage(d.log_prices, np.log(d.instruments))
    for g in range(3):
        assert np.corrcoef(r.residuals[:, g], d.xi[:, g])[0, 1] > 0.5
    assert np.all(r.F > 10)


def test_exogenous_residual_small():
    d = generate_dataset(CES(), SimConfig(seed=0))
    r = first_stage(d.log_prices, np.log(d.instruments))
    assert np.mean(np.abs(r.residuals)) < 0.05


def test_irrelevant_instruments_F_near_one():
    rng = np.random.default_rng(0)
    Fs = []
    for _ in range(200):
        y = rng.normal(size=(200, 1))
        Fs.append(first_stage(y, rng.normal(size=(200, 3))).F[0])
    assert np.mean(Fs) == pytest.approx(1.0, abs=0.15)


def test_controls_and_partial_r2(tmp_path):
    rng = np.random.default_rng(1)
    n = 500
    c = rng.normal(size=(n, 1))
    z = rng.normal(size=(n, 2))
    lp = 0.5 * c + z @ np.array([[1.0], [0.5]]) + 0.1 * rng.normal(size=(n, 1))
    r = first_stage(lp, z, controls=c, goods=("A",))
    assert 0 < r.partial_r2[0] <= r.r2[0] <= 1
    write_diagnostics_csv(r, tmp_path / "fs.csv")
    lines = (tmp_path / "fs.csv").read_text().splitlines()
    assert lines[0] == "good,F,R2,partial_R2" and lines[1].startswith("A,")
    with pytest.raises(ValueError):
        first_stage(lp, z[:10])
