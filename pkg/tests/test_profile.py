import numpy as np
import pytest

from neuraldemand.dgp import HabitCES, SimConfig, generate_dataset
from neuraldemand.neural import TrainConfig
from neuraldemand.profile import (
    ProfileResult,
    block_bootstrap_se,
    circular_block_indices,
    identified_set,
    per_observation_kl,
    profile_delta,
    write_profile_csv,
)
from neuraldemand.rng import Stream

TINY = TrainConfig(epochs=3, hidden=8, batch_size=64, slutsky_start=1)


@pytest.fixture(scope="module")
def habit_data():
    return generate_dataset(HabitCES(), SimConfig(N=200, seed=0))


def _mask(n, frac=0.75):
    return np.arange(n) >= int(frac * n)


def _profile(kl, se, valid=None):
    kl = np.asarray(kl, dtype=float)
    return ProfileResult(np.linspace(0.1, 0.9, len(kl)), kl, np.asarray(se, float), np.ones(len(kl), bool) if valid is None else np.asarray(valid))


def test_single_point_grid(habit_data):
    pr = profile_delta(habit_data, [0.4], TINY, test_mask=_mask(len(habit_data)))
    assert pr.delta_hat == 0.4
    assert identified_set(pr, 1) == identified_set(pr, 2) == (0.4, 0.4)


def test_grid_points_are_trained_independently(habit_data):
    m = _mask(len(habit_data))
    a = profile_delta(habit_data, [0.2, 0.5, 0.8], TINY, test_mask=m)
    b = profile_delta(habit_data, [0.5, 0.8], TINY, test_mask=m)
    np.testing.assert_array_equal(a.kl[1:], b.kl)


def test_grid_validation(habit_data):
    with pytest.raises(ValueError):
        profile_delta(habit_data, [0.5, 0.2], TINY, test_mask=_mask(len(habit_data)))
    with pytest.raises(ValueError):
        profile_delta(habit_data, [0.0, 0.5], TINY, test_mask=_mask(len(habit_data)))
    with pytest.raises(ValueError):
        profile_delta(habit_data, [0.5], TINY)  # no split information


def test_zero_se_gives_argmin_singleton():
    pr = _profile([3.0, 1.0, 2.0, 1.5], [0, 0, 0, 0])
    assert identified_set(pr, 2) == (pr.grid[1], pr.grid[1])


def test_identified_set_is_monotone_in_c():
    rng = np.random.default_rng(0)
    for _ in range(50):
        kl = rng.uniform(0, 1, 9)
        pr = _profile(kl, rng.uniform(0, 0.3, 9))
        q1, q2 = pr.qualifying(1), pr.qualifying(2)
        assert np.all(q2[q1])
        lo1, hi1 = identified_set(pr, 1)
        lo2, hi2 = identified_set(pr, 2)
        assert lo2 <= lo1 <= pr.delta_hat <= hi1 <= hi2


def test_invalid_points_are_excluded():
    pr = _profile([0.1, 5.0, 1.0], [0.1, 0.1, 0.1], valid=[False, True, True])
    assert pr.delta_hat == pr.grid[2]
    assert not pr.qualifying(100)[0]


def test_max_se_rule():
    pr = _profile([1.0, 1.2, 3.0], [0.01, 0.1, 0.5])
    assert identified_set(pr, 1) == (pr.grid[0], pr.grid[0])
    pr.se_rule = "max"
    assert identified_set(pr, 1) == (pr.grid[0], pr.grid[1])


def test_degenerate_resampler_gives_zero_se():
    K = np.random.default_rng(1).uniform(size=(3, 40))
    same = np.arange(40)
    np.testing.assert_array_equal(block_bootstrap_se(K, resampler=lambda: [same, same]), 0.0)


def test_whole_sample_block_gives_zero_se():
    K = np.random.default_rng(2).uniform(size=(2, 60))
    np.testing.assert_allclose(block_bootstrap_se(K, B=50, block=60), 0.0, atol=1e-15)


def test_block_longer_than_sequence_errors():
    with pytest.raises(ValueError):
        block_bootstrap_se(np.ones((1, 30)), B=50, block=50)
    with pytest.raises(ValueError):
        block_bootstrap_se(np.ones((1, 30)), B=10)


def test_circular_blocks_wrap():
    idx = circular_block_indices(10, 4, 20, Stream(0, "t"))
    assert idx.shape == (20, 10)
    d = np.diff(idx[:, :4], axis=1) % 10
    assert np.all(d == 1)


def test_group_bootstrap_matches_iid_scale():
    rng = np.random.default_rng(3)
    groups = np.repeat(np.arange(40), 5)
    vals = np.repeat(rng.normal(size=40), 5)  # one value per store
    se = block_bootstrap_se(vals[None], B=400, groups=groups, seed=1)[0]
    assert se == pytest.approx(vals[::5].std(ddof=1) / np.sqrt(40), rel=0.2)


def test_per_observation_kl_zero_at_truth():
    w = np.array([[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]])
    np.testing.assert_allclose(per_observation_kl(w, w), 0.0, atol=1e-15)


def test_profile_csv(tmp_path):
    pr = _profile([2.0, 1.0, 1.05, 3.0], [0.1, 0.1, 0.1, 0.1])
    write_profile_csv(pr, tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "delta,test_kl,se,in_IS_c1,in_IS_c2"
    assert [r.split(",")[3:] for r in rows[1:]] == [["0", "0"], ["1", "1"], ["1", "1"], ["0", "0"]]
