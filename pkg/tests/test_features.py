import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuraldemand.data import PanelDataset
from neuraldemand.dgp import CES, HabitCES, SimConfig, generate_dataset
from neuraldemand.features import (
    FeatureMatrix,
    HabitConfig,
    build_habit_stock,
    build_linear_features,
    build_window_features,
    habit_column,
    habit_recursion,
    placebo_shuffle,
)


def _panel(n=12, groups=1, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(1, 3, (n, 3))
    w = rng.dirichlet(np.ones(3), n)
    g = np.repeat(np.arange(groups), n // groups)
    t = np.tile(np.arange(n // groups), groups)
    return PanelDataset(p, rng.uniform(10, 20, n), w, g, t)


def test_habit_recursion_unrolled():
    h = np.zeros((5, 1))
    h[0] = 1.0
    x = habit_recursion(h, np.zeros(5, int), 0.5, np.zeros(1))
    np.testing.assert_allclose(x[:, 0], [0, 0.5, 0.25, 0.125, 0.0625])


def test_habit_small_delta_is_lag():
    h = np.arange(12.0).reshape(6, 2)
    x = habit_recursion(h, np.zeros(6, int), 1e-12, np.zeros(2))
    np.testing.assert_allclose(x[1:], h[:-1], atol=1e-9)


def test_habit_constant_fixed_point():
    h = np.full((7, 3), 2.5)
    x = habit_recursion(h, np.zeros(7, int), 0.7, np.full(3, 2.5))
    np.testing.assert_allclose(x, 2.5, rtol=1e-15)


def test_habit_resets_at_group_boundaries():
    d = _panel(n=12, groups=3)
    out = build_habit_stock(d, HabitConfig(0.6, "log_share"))
    xb = out.columns[habit_column(0.6)]
    mean = np.log(d.shares).mean(axis=0)
    for first in (0, 4, 8):
        np.testing.assert_allclose(xb[first], mean)


def test_habit_causality():
    d = _panel(n=30)
    base = build_habit_stock(d, HabitConfig(0.7)).columns[habit_column(0.7)]
    # perturbing row k must leave rows <= k untouched; the init mean is fixed to isolate the recursion
    h = d.quantities
    init = h.mean(axis=0)
    ref = habit_recursion(h, d.group, 0.7, init)
    np.testing.assert_allclose(ref, base)
    for k in (5, 17, 29):
        h2 = h.copy()
        h2[k] += 10.0
        x2 = habit_recursion(h2, d.group, 0.7, init)
        np.testing.assert_array_equal(x2[: k + 1], ref[: k + 1])
        if k < 29:
            assert not np.allclose(x2[k + 1], ref[k + 1])


def test_habit_config_validation_and_order():
    with pytest.raises(ValueError):
        HabitConfig(1.0)
    with pytest.raises(ValueError):
        HabitConfig(0.5, "levels")
    d = _panel()
    d.time[:] = d.time[::-1]
    with pytest.raises(ValueError):
        build_habit_stock(d, HabitConfig(0.5))


def test_habit_collinearity_across_delta():
    d = generate_dataset(HabitCES(), SimConfig(seed=0))
    a = build_habit_stock(d, HabitConfig(0.70)).columns[habit_column(0.70)]
    b = build_habit_stock(d, HabitConfig(0.72)).columns[habit_column(0.72)]
    for g in range(3):
        assert np.corrcoef(a[:, g], b[:, g])[0, 1] > 0.99


def test_window_features():
    d = _panel(n=12, groups=2)
    with pytest.raises(ValueError):
        build_window_features(d, L=0)
    F = build_window_features(d, L=2)
    assert F.values.shape == (12, 3 + 1 + 2 * 2 * 3)
    lp = d.log_prices
    lq = np.log(d.quantities)
    first_lag = F.values[:, 4:10]
    # first row of each group: global means
    for r in (0, 6):
        np.testing.assert_allclose(first_lag[r], np.r_[lp.mean(0), lq.mean(0)])
    # interior rows: shifted originals
    np.testing.assert_array_equal(first_lag[1:6, :3], lp[0:5])
    np.testing.assert_array_equal(first_lag[7:12, 3:], lq[6:11])
    lag2 = F.values[:, 10:16]
    np.testing.assert_allclose(lag2[1, :3], lp.mean(0))
    np.testing.assert_array_equal(lag2[2, :3], lp[0])
    assert np.all(np.isfinite(F.values))


def test_placebo_shuffle_properties():
    n = 50
    cols = {"a": np.arange(n, dtype=float), "b": np.arange(n, dtype=float) * 2}
    split = np.array(["train"] * 40 + ["test"] * 10)
    out = placebo_shuffle(cols, seed=1, split=split)
    assert sorted(out["a"][:40]) == list(range(40))
    assert sorted(out["a"][40:]) == list(range(40, 50))
    np.testing.assert_array_equal(out["b"], 2 * out["a"])  # joint permutation
    assert not np.array_equal(out["a"], cols["a"])
    one = placebo_shuffle({"a": np.array([3.0])}, seed=0, split=np.array(["test"]))
    np.testing.assert_array_equal(one["a"], [3.0])
    with pytest.raises(ValueError):
        placebo_shuffle(cols, 0, split=np.array(["val"] * n))


def test_placebo_breaks_habit_share_correlation():
    d = generate_dataset(HabitCES(), SimConfig(seed=0))
    d = build_habit_stock(d, HabitConfig(0.7))
    xb = d.columns[habit_column(0.7)]
    sh = placebo_shuffle({"x": xb}, seed=0)["x"]
    for g in range(3):
        assert abs(np.corrcoef(sh[:, g], d.shares[:, g])[0, 1]) < 0.1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 60))
def test_placebo_preserves_multiset(seed, n):
    x = np.random.default_rng(seed).normal(size=n)
    out = placebo_shuffle({"x": x}, seed)["x"]
    np.testing.assert_array_equal(np.sort(out), np.sort(x))


def test_linear_features_shapes_and_qr():
    d = generate_dataset(CES(), SimConfig(seed=0, N=200))
    s = build_linear_features(d, "shared")
    assert s.values.shape == (200, 3, 3)
    g = build_linear_features(d, "goodspec")
    assert g.values.shape == (200, 3, 5)
    o = build_linear_features(d, "orth")
    assert o.values.shape == (200, 3, 8)
    Q = o.values[:, 0, 3:6]
    np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-10)
    A = d.log_prices - d.log_prices.mean(0)
    assert np.linalg.norm(A - Q @ o.flags["R"]) / np.linalg.norm(A) < 1e-10
    # training rotation applied to the same data reproduces Q
    again = build_linear_features(d, "orth", basis=o.flags)
    np.testing.assert_allclose(again.values, o.values, atol=1e-10)
    with pytest.raises(ValueError):
        build_linear_features(d, "cubic")


def test_linear_features_degenerate_single_row():
    d = _panel(n=1)
    o = build_linear_features(d, "orth")
    assert np.all(o.values[:, :, 3:6] == 0)
    assert o.flags["zero_q_columns"] == [0, 1, 2]


def test_feature_csv_dump(tmp_path):
    d = _panel(n=4)
    build_window_features(d, L=1).to_csv(tmp_path / "w.csv")
    build_linear_features(d, "shared").to_csv(tmp_path / "l.csv")
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0].startswith("lnp0,lnp1,lnp2,lny")
    assert len(lines) == 5
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "obs,good,lnp_own,lnp_own_sq,lny"
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 2)), ["a"], "x")
