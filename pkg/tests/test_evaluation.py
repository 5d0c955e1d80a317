import itertools
import json
import warnings

import numpy as np
import pytest

from datingrec.domain import MessageEvent, MessageLog
from datingrec.evaluation import (CSV_FIELDS, ExperimentReport, FoldOutcome, RankingResult, base_rate,
                                  cross_validate, eligible_suitors, kl_divergence, match_types, partition_folds,
                                  ranking_experiment, relative_gain, report_csv, report_rows, top_share,
                                  type_recovery_metrics)
from datingrec.lda import Hyperparams, Schedule


def test_kl_examples():
    assert kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.207519, abs=1e-6)
    with pytest.raises(ValueError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


def test_match_identity_and_permutation():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(8), size=4)
    m = match_types(P, P)
    assert m.mapping == {0: 0, 1: 1, 2: 2, 3: 3} and m.total == pytest.approx(0.0, abs=1e-12)
    perm = [2, 0, 3, 1]
    m = match_types(P, P[perm])
    assert all(perm[m.mapping[t]] == t for t in range(4))
    assert m.total == pytest.approx(0.0, abs=1e-12)


def test_match_against_exhaustive_injections():
    rng = np.random.default_rng(7)
    for _ in range(20):
        P = rng.dirichlet(np.ones(5), size=4)
        Q = rng.dirichlet(np.ones(5), size=6)
        cost = np.array([[kl_divergence(p, q) for q in Q] for p in P])
        best = min(sum(cost[i, j] for i, j in enumerate(inj)) for inj in itertools.permutations(range(6), 4))
        assert match_types(P, Q).total == pytest.approx(best, abs=1e-12)


def test_match_large_uses_assignment():
    rng = np.random.default_rng(1)
    P = rng.dirichlet(np.ones(12), size=10)
    perm = rng.permutation(12)
    Q = np.vstack([P, rng.dirichlet(np.ones(12), size=2)])[perm]
    m = match_types(P, Q)
    assert m.total == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        match_types(Q, P)


def test_recovery_metrics():
    rng = np.random.default_rng(3)
    P = rng.dirichlet(np.ones(6), size=4)
    truth = {f"u{i}": i % 4 for i in range(400)}
    # learned type = true type + 2 (mod 6 labels)
    learned = {u: t + 2 for u, t in truth.items()}
    Q = np.vstack([rng.dirichlet(np.ones(6), size=2), P])
    m = match_types(P, Q)
    scores = type_recovery_metrics(truth, learned, m)
    assert all(s.precision == 1.0 and s.recall == 1.0 for s in scores)
    noise = {u: int(rng.integers(4)) + 2 for u in truth}
    scores = type_recovery_metrics(truth, noise, m)
    assert np.mean([s.precision for s in scores]) == pytest.approx(0.25, abs=0.06)
    with pytest.raises(ValueError):
        type_recovery_metrics(truth, {"x": 0}, m)


def test_top_share():
    assert top_share({"a": 0, "b": 0, "c": 1, "d": 2}, n=2) == 0.75
    assert top_share({}) == 0.0


def chain_log(components):
    """Each component is a path of users joined by one message per edge."""
    events, t = [], 0
    for c, size in enumerate(components):
        for i in range(size - 1):
            a, b = f"c{c}u{i}", f"c{c}u{i + 1}"
            events.append(MessageEvent(a, b, t))
            t += 1
    return MessageLog(events)


def test_folds_one_component_each():
    folds = partition_folds(chain_log([5] * 4), 4)
    assert sorted(len(f) for f in folds) == [5, 5, 5, 5]
    for f in folds:
        assert len({u.split("u")[0] for u in f}) == 1


def test_single_component_warns():
    with pytest.warns(UserWarning, match="largest component"):
        folds = partition_folds(chain_log([20]), 5)
    assert sum(1 for f in folds if f) == 1


def test_folds_edge_disjoint_and_balanced(small_market):
    _, res, _, enc = small_market
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        folds = partition_folds(res.log, 3, enc.user_ids)
    where = {u: i for i, f in enumerate(folds) for u in f}
    assert len(where) == sum(map(len, folds))
    assert all(where[e.sender_id] == where[e.receiver_id] for e in res.log)
    sizes = [len(f) for f in folds]
    assert max(sizes) <= 1.1 * min(sizes)


def test_empty_log_folds():
    assert partition_folds(MessageLog(), 3) == [[], [], []]
    with pytest.raises(ValueError):
        partition_folds(MessageLog(), 0)


def test_relative_gain():
    assert relative_gain(0.2, 0.2) == 0.0
    assert relative_gain(0.18, 0.12) == pytest.approx(50.0)
    with pytest.raises(ValueError):
        relative_gain(0.1, 0.0)


def replied_log(all_replied):
    ev = []
    for s in range(6):
        for r in range(4):
            ev.append(MessageEvent(f"m{s}", f"f{r}", 10 * s + r, all_replied or (r + s) % 3 == 0))
    return MessageLog(ev)


def test_eligible_suitors_need_two_receivers():
    log = MessageLog([MessageEvent("a", "x", 1), MessageEvent("a", "x", 2), MessageEvent("b", "x", 3),
                      MessageEvent("b", "y", 4), MessageEvent("c", "z", 5)])
    assert eligible_suitors(log, {"a", "b", "x", "y"}) == {"b": [2, 3]}


def test_random_policy_rates():
    from datingrec.domain import PairEncoder, UserSet
    from conftest import person
    users = UserSet([person(f"m{i}", "M") for i in range(6)] + [person(f"f{i}", "F") for i in range(4)])
    from datingrec.simulator import default_plan
    enc = PairEncoder(users, default_plan())
    fold = enc.user_ids
    res = ranking_experiment(None, enc, replied_log(True), fold, "random", seed=1)
    assert res.rate == 1.0 and res.kept == 6 * 2
    log = replied_log(False)
    rates = [ranking_experiment(None, enc, log, fold, "random", seed=s).rate for s in range(300)]
    assert np.mean(rates) == pytest.approx(base_rate(log, fold), abs=0.02)
    with pytest.raises(ValueError):
        ranking_experiment(None, enc, log, fold, "suitor")
    with pytest.raises(ValueError):
        ranking_experiment(None, enc, log, fold, "psychic")


def test_ranking_keeps_top_half(small_market):
    from datingrec.lda import train
    _, res, _, enc = small_market
    folds = partition_folds(res.log, 3, enc.user_ids)
    held = set(folds[0])
    train_log = MessageLog(e for e in res.log if e.sender_id not in held and e.receiver_id not in held)
    model = train(train_log, enc, Hyperparams.symmetric(6, enc.space.size), Schedule(burn_in=20, n_samples=3, thin=2))
    groups = eligible_suitors(res.log, folds[0])
    expected_kept = sum(max(1, -(-len(v) // 2)) for v in groups.values())
    for policy in ("random", "suitor", "two_sided"):
        r = ranking_experiment(model, enc, res.log, folds[0], policy, seed=2)
        assert r.kept == expected_kept
        assert sum(k for k, _ in r.by_gender.values()) == r.kept
        assert 0 <= r.rate <= 1
        again = ranking_experiment(model, enc, res.log, folds[0], policy, seed=2)
        assert (again.kept, again.replied) == (r.kept, r.replied)


def test_report_outputs(tmp_path):
    res = {p: RankingResult(p, 10, k, {"M": (6, k - 1), "F": (4, 1)}) for p, k in
           (("random", 2), ("suitor", 3), ("two_sided", 4))}
    rep = ExperimentReport([["a", "b"]], [FoldOutcome(0, 2, res)])
    assert rep.wins() == 1
    assert rep.outcomes[0].gain() == pytest.approx(100 * (0.4 - 0.3) / 0.3)
    path = tmp_path / "report.json"
    rep.save(path)
    obj = json.loads(path.read_text())
    rows = report_rows(obj)
    assert len(rows) == 3 * 2
    text = report_csv(obj)
    assert text.splitlines()[0] == ",".join(CSV_FIELDS)
    two = [r for r in rows if r["policy"] == "two_sided" and r["gender"] == "M"][0]
    assert two["gain_vs_suitor"] == pytest.approx(100 * (3 / 6 - 2 / 6) / (2 / 6))


def test_cross_validate_small(small_market):
    _, res, _, enc = small_market
    rep = cross_validate(enc, res.log, Hyperparams.symmetric(6, enc.space.size),
                         Schedule(burn_in=15, n_samples=2, thin=2), k=3, seed=0)
    assert len(rep.outcomes) == 3
    users = [u for f in rep.folds for u in f]
    assert len(users) == len(set(users))
    for o in rep.outcomes:
        assert set(o.results) == {"random", "suitor", "two_sided"}
