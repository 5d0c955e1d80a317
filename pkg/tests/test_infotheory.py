import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datingrec.domain import DataError, MessageEvent, MessageLog, UserSet
from datingrec.infotheory import (LabeledDataset, SelectionError, UndefinedScore, build_plan, candidate_features,
                                  chimerge, conditional_entropy, discretize_columns, entropy, info,
                                  info_given_feature, information_gain, information_gain_ratio,
                                  mutual_information, select_features, split_info)

from conftest import person


def h2(p):
    return 0.0 if p in (0, 1) else -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


@pytest.mark.parametrize("dist, want", [((0.5, 0.5), 1.0), ((1.0, 0.0), 0.0), ((0.25, 0.75), 0.8112781244591328)])
def test_entropy_examples(dist, want):
    assert entropy(dist) == pytest.approx(want, abs=1e-12)


def test_entropy_rejects_non_distribution():
    with pytest.raises(ValueError):
        entropy([0.5, 0.6])


def test_conditional_entropy_examples():
    assert conditional_entropy(np.diag([0.3, 0.7])) == pytest.approx(0.0, abs=1e-15)
    px, py = np.array([0.2, 0.8]), np.array([0.1, 0.6, 0.3])
    assert conditional_entropy(np.outer(px, py)) == pytest.approx(entropy(py), abs=1e-12)
    assert conditional_entropy([[0.25, 0.25], [0, 0.5]]) == pytest.approx(0.5, abs=1e-12)


def test_mutual_information_examples():
    assert mutual_information(np.outer([0.4, 0.6], [0.5, 0.5])) == pytest.approx(0.0, abs=1e-12)
    assert mutual_information([[0.5, 0], [0, 0.5]]) == pytest.approx(1.0, abs=1e-12)


def test_counts_and_probabilities_agree():
    counts = np.array([[3, 1, 0], [2, 2, 4]])
    assert conditional_entropy(counts) == pytest.approx(conditional_entropy(counts / counts.sum()), abs=1e-14)


def test_info_examples():
    assert info(1, 1) == 1.0
    assert info(0, 5) == 0.0
    assert info(9, 5) == pytest.approx(0.940286, abs=1e-6)
    with pytest.raises(ValueError):
        info(0, 0)


def test_partition_worked_example():
    parts = [(2, 3), (4, 0), (3, 2)]
    assert info_given_feature(parts) == pytest.approx(0.693536, abs=1e-6)
    assert information_gain(parts) == pytest.approx(0.246750, abs=1e-6)
    assert split_info(parts) == pytest.approx(1.577406, abs=1e-6)
    assert information_gain_ratio(parts) == pytest.approx(0.156428, abs=1e-6)
    # independent oracle: spelled-out weighted sum
    oracle = h2(9 / 14) - (5 / 14 * h2(2 / 5) + 4 / 14 * 0 + 5 / 14 * h2(3 / 5))
    assert information_gain(parts) == pytest.approx(oracle, abs=1e-12)


def test_partition_edge_cases():
    assert info_given_feature([(3, 4)]) == pytest.approx(info(3, 4))
    assert info_given_feature([(3, 0), (0, 2)]) == 0.0
    assert information_gain_ratio([(6, 0), (0, 4)]) == pytest.approx(1.0, abs=1e-12)
    assert information_gain([(2, 6), (1, 3)]) == pytest.approx(0.0, abs=1e-12)
    assert information_gain_ratio([(2, 6), (1, 3)]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(UndefinedScore):
        information_gain_ratio([(3, 4), (0, 0)])


joints = st.integers(2, 5).flatmap(lambda a: st.integers(2, 5).flatmap(
    lambda b: st.lists(st.floats(0, 1), min_size=a * b, max_size=a * b).map(lambda v: np.reshape(v, (a, b)))))


@settings(max_examples=200, deadline=None)
@given(joints)
def test_mutual_information_identity(j):
    if j.sum() <= 0:
        return
    p = j / j.sum()
    h_col = entropy(p.sum(axis=0))
    assert mutual_information(p) == pytest.approx(h_col - conditional_entropy(p), abs=1e-12)
    assert mutual_information(p) >= -1e-12
    assert conditional_entropy(p) <= h_col + 1e-12


def test_chimerge_identical_labels():
    assert chimerge([1, 2, 3, 4, 5], [True] * 5) == [1.0, 5.0]


def test_chimerge_two_interval_example():
    values = list(range(1, 11))
    assert chimerge(values, [v > 5 for v in values]) == [1.0, 6.0, 10.0]


def test_chimerge_max_intervals_one():
    values = list(range(1, 11))
    assert chimerge(values, [v % 2 == 0 for v in values], max_intervals=1) == [1.0, 10.0]


def test_chimerge_respects_cap_and_range():
    rng = np.random.default_rng(0)
    v = rng.integers(0, 200, size=500)
    labels = rng.random(500) < 0.5
    bounds = chimerge(v, labels, significance_threshold=0.0, max_intervals=7, lo=-1, hi=250)
    assert len(bounds) - 1 == 7
    assert bounds[0] == -1 and bounds[-1] == 250
    assert all(b > a for a, b in zip(bounds, bounds[1:]))
    with pytest.raises(ValueError):
        chimerge(v, labels, lo=10)


def test_select_features_perfect_predictor_first():
    y = np.array([1, 0, 1, 1, 0, 0, 1, 0], dtype=bool)
    data = LabeledDataset({"copy": y.astype(int), "noise": [0, 1, 0, 1, 0, 1, 1, 0]}, y)
    rep = select_features(data)
    assert rep.ranking()[0] == "copy"
    assert rep.scores["copy"].igr == pytest.approx(1.0)
    assert rep.selected == ["copy"]


def test_select_features_drops_duplicate():
    rng = np.random.default_rng(3)
    y = rng.random(400) < 0.3
    a = np.where(y, rng.integers(0, 2, 400), rng.integers(1, 4, 400))
    b = rng.integers(0, 3, 400)
    rep = select_features(LabeledDataset({"a": a, "a_copy": a.copy(), "b": b}, y))
    survivors = {"a", "a_copy"} & set(rep.selected)
    assert len(survivors) == 1
    dropped = ({"a", "a_copy"} - survivors).pop()
    assert rep.scores[dropped].eliminated_by["rule"] == "conditional_entropy"


def test_select_features_keeps_informative_set():
    """Replies depend on five features only; three are pure noise."""
    rng = np.random.default_rng(8)
    n = 20000
    cols = {f"inf{i}": rng.integers(0, 3, n) for i in range(5)}
    cols.update({f"noise{i}": rng.integers(0, 3, n) for i in range(3)})
    logit = sum(cols[f"inf{i}"] - 1 for i in range(5))
    y = rng.random(n) < 1 / (1 + np.exp(-logit))
    rep = select_features(LabeledDataset(cols, y))
    assert set(rep.selected) == {f"inf{i}" for i in range(5)}
    # oracle: recompute IGR of every column from scratch
    for name, col in cols.items():
        parts = [(np.sum(y & (col == v)), np.sum(~y & (col == v))) for v in range(3)]
        assert rep.scores[name].igr == pytest.approx(information_gain_ratio(parts), abs=1e-12)


def test_select_features_all_equal_keeps_all():
    y = np.array([1, 1, 0, 0, 1, 1, 0, 0], dtype=bool)
    rep = select_features(LabeledDataset({"a": [0, 0, 0, 0, 1, 1, 1, 1], "b": [0, 1, 0, 1, 0, 1, 0, 1]}, y))
    assert sorted(rep.selected) == ["a", "b"]


def test_select_features_errors():
    with pytest.raises(SelectionError):
        select_features(LabeledDataset({}, []))
    y = np.array([1, 0, 1, 0], dtype=bool)
    with pytest.raises(SelectionError):
        select_features(LabeledDataset({"c": [1, 1, 1, 1]}, y))


def test_candidate_features_and_plan():
    users = UserSet([person("m1", "M", age=25, height=180, income=6), person("m2", "M", age=45, height=170),
                     person("f1", "F", age=30, height=160, income=2), person("f2", "F", age=22, height=175)])
    log = MessageLog([MessageEvent("m1", "f1", 1, True), MessageEvent("m2", "f2", 2, False),
                      MessageEvent("f1", "m2", 3, True), MessageEvent("f2", "m1", 4, False)])
    cols, labels = candidate_features(users, log)
    assert cols["height_dif"] == [-20, 5, 10, 5]
    assert labels.tolist() == [True, False, True, False]
    data = discretize_columns(cols, labels)
    assert set(data.columns) >= {"age", "height_dif", "child_info"}
    plan = build_plan(users, log)
    for s in users:
        for r in users:
            if s.gender != r.gender:
                plan.bin("height_dif", r.raw_features["height"] - s.raw_features["height"])
    with pytest.raises(DataError):
        candidate_features(users, MessageLog())


def test_chimerge_singleton_top_interval():
    values = [1, 1, 2, 2, 3, 3, 9]
    labels = [False, False, False, False, False, False, True]
    bounds = chimerge(values, labels, max_intervals=16)
    assert all(b > a for a, b in zip(bounds, bounds[1:]))
    assert bounds[-2] == 9.0 and bounds[-1] == 10.0
    plan_bins = np.searchsorted(bounds, values, side="right") - 1
    assert plan_bins[-1] != plan_bins[0]
