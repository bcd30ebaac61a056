import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amen.data import Impression, ImpressionTable, ItemFeatures
from amen.tsp import (ContrastivePair, SamplingConfig, brute_force_candidates, build_index,
                      check_pair, match_batch, pair_dataset, sample_diff)

from conftest import small_meta

META = small_meta()
ITEM = ItemFeatures(1, 1, 1, 1)


def table_of(rows):
    """rows: (user, scenario, timestamp, label) tuples."""
    imps = [Impression(u, 0, 0, s, ts, ITEM, y) for u, s, ts, y in rows]
    return ImpressionTable.from_impressions(imps, META)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(min_gap=100, max_gap=50)
    with pytest.raises(ValueError):
        SamplingConfig(domain_constraint="nearby")


def test_single_impression_index():
    index = build_index(table_of([(0, 0, 1000, 1)]), SamplingConfig())
    assert len(index.groups) == 1 and len(index) == 1
    assert sample_diff(0, index) is None


def test_same_label_user_has_no_diff():
    t = table_of([(0, 0, 1000 + 500 * k, 1) for k in range(5)])
    index = build_index(t, SamplingConfig())
    assert all(sample_diff(i, index) is None for i in range(5))


def test_thirty_seconds_is_too_close():
    t = table_of([(0, 0, 1000, 1), (0, 0, 1030, 0)])
    index = build_index(t, SamplingConfig(min_gap=60))
    assert sample_diff(0, index) is None and sample_diff(1, index) is None


def test_window_bounds_are_inclusive():
    t = table_of([(0, 0, 1000, 1), (0, 0, 1060, 0), (0, 0, 1000 + 604800, 0),
                  (0, 0, 1000 + 604801, 0)])
    assert brute_force_candidates(t, 0, SamplingConfig()).tolist() == [1, 2]
    assert build_index(t, SamplingConfig()).candidates(0).tolist() == [1, 2]


@pytest.mark.parametrize("seed", range(10))
def test_single_candidate_always_chosen(seed):
    t = table_of([(0, 0, 1000, 1), (0, 0, 1010, 0), (0, 0, 5000, 0), (0, 1, 6000, 0),
                  (1, 0, 5000, 0), (0, 0, 5000 + 700_000, 0)])
    config = SamplingConfig(rng_seed=seed)
    assert sample_diff(0, build_index(t, config), config) == 2


def test_domain_constraint_widens_candidates():
    t = table_of([(0, 0, 1000, 1), (0, 1, 5000, 0)])
    assert sample_diff(0, build_index(t, SamplingConfig())) is None
    glob = SamplingConfig(domain_constraint="global")
    assert sample_diff(0, build_index(t, glob), glob) == 1


def test_index_domain_mismatch():
    t = table_of([(0, 0, 1000, 1)])
    with pytest.raises(ValueError):
        sample_diff(0, build_index(t, SamplingConfig()), SamplingConfig(domain_constraint="global"))


def test_empty_batch():
    index = build_index(table_of([(0, 0, 1000, 1)]), SamplingConfig())
    pairs, report = match_batch([], index)
    assert pairs == [] and report.total_impressions == 0 and report.coverage_rate == 0.0


def test_fully_matchable_batch():
    t = table_of([(0, 0, 1000, 1), (0, 0, 2000, 0), (1, 2, 50, 0), (1, 2, 4000, 1)])
    pairs, report = match_batch(np.arange(4), build_index(t, SamplingConfig()))
    assert report.coverage_rate == 1.0
    assert all(check_pair(t, p, SamplingConfig()) == [] for p in pairs)


def test_check_pair_names_each_broken_rule():
    t = table_of([(0, 0, 1000, 1), (1, 1, 1010, 1)])
    broken = check_pair(t, ContrastivePair(0, 1), SamplingConfig())
    assert set(broken) == {"same_user", "opposite_label", "time_window", "same_scenario"}


@pytest.mark.parametrize("domain", ["same_scenario", "global"])
def test_index_partitions_rows_in_time_order(small_sim, domain):
    t = small_sim.table
    index = build_index(t, SamplingConfig(domain_constraint=domain))
    rows = np.concatenate(list(index.groups.values()))
    assert sorted(rows.tolist()) == list(range(len(t)))
    for group in index.groups.values():
        assert (np.diff(t.timestamp[group]) >= 0).all()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1), st.integers(0, 3000),
                          st.integers(0, 1)), max_size=30),
       st.sampled_from(["same_scenario", "global"]), st.integers(0, 1000))
def test_index_matches_brute_force(rows, domain, seed):
    t = table_of(rows)
    config = SamplingConfig(min_gap=60, max_gap=1500, domain_constraint=domain, rng_seed=seed)
    index = build_index(t, config)
    for i in range(len(t)):
        want = brute_force_candidates(t, i, config)
        assert index.candidates(i).tolist() == want.tolist()
        got = sample_diff(i, index, config)
        assert (got is None) == (len(want) == 0)
        if got is not None:
            assert got in want


def test_pairing_is_deterministic_and_valid(small_sim):
    config = SamplingConfig(rng_seed=11)
    a, rep_a = pair_dataset(small_sim.table, config)
    b, rep_b = pair_dataset(small_sim.table, config)
    assert a.diff.tobytes() == b.diff.tobytes() and rep_a == rep_b
    matched = np.flatnonzero(a.diff >= 0)
    assert rep_a.matched_impressions == len(matched)
    for i in matched:
        assert check_pair(a, ContrastivePair(int(i), int(a.diff[i])), config) == []


def test_pairing_independent_of_batch_order(small_sim):
    config = SamplingConfig(rng_seed=2)
    index = build_index(small_sim.table, config)
    rows = np.arange(len(small_sim.table))
    fwd, _ = match_batch(rows, index)
    back, _ = match_batch(rows[::-1], index)
    assert sorted(fwd, key=lambda p: p.target) == sorted(back, key=lambda p: p.target)


def test_global_coverage_is_at_least_same_scenario(small_sim):
    same = pair_dataset(small_sim.table, SamplingConfig())[1].coverage_rate
    glob = pair_dataset(small_sim.table, SamplingConfig(domain_constraint="global"))[1].coverage_rate
    assert glob >= same
