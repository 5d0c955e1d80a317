"""Scoring and experiments: type recovery against ground truth, and the
held-out ranking experiment comparing one- and two-sided ordering of messages.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .domain import GENDERS, MessageLog, PairEncoder
from .lda import Hyperparams, Schedule, TrainedModel, pair_preferences, train
from .rng import substream

log = logging.getLogger(__name__)

POLICIES = ("random", "suitor", "two_sided")
EXHAUSTIVE_MAX = 8
GIANT_SLACK = 1.1


def kl_divergence(p, q) -> float:
    """D(p || q) in bits."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    m = p > 0
    if (q[m] <= 0).any():
        raise ValueError("q has zero mass where p is positive")
    return float(np.sum(p[m] * np.log2(p[m] / q[m])))


@dataclass
class TypeMatching:
    """``mapping[true_t] = learned_t``; ``cost[i, j] = KL(true_i || learned_j)``."""

    mapping: dict[int, int]
    cost: np.ndarray

    @property
    def total(self) -> float:
        return float(sum(self.cost[t, l] for t, l in self.mapping.items()))

    def learned_to_true(self) -> dict[int, int]:
        return {l: t for t, l in self.mapping.items()}


def kl_cost_matrix(true_prefs, learned_phi) -> np.ndarray:
    P = np.asarray(true_prefs, dtype=float)
    Q = np.asarray(learned_phi, dtype=float)
    return np.array([[kl_divergence(p, q) for q in Q] for p in P])


def match_types(true_prefs, learned_phi) -> TypeMatching:
    """Minimum total K-L injection of true types into learned types."""
    cost = kl_cost_matrix(true_prefs, learned_phi)
    K, T = cost.shape
    if K == 0 or T == 0:
        raise ValueError("both type sets must be non-empty")
    if K > T:
        raise ValueError(f"{K} true types cannot be matched into {T} learned types")
    if K <= EXHAUSTIVE_MAX:
        best, best_cost = None, math.inf
        rows = np.arange(K)
        it = itertools.permutations(range(T), K)
        while True:
            chunk = np.array(list(itertools.islice(it, 100_000)), dtype=np.int64).reshape(-1, K)
            if not len(chunk):
                break
            totals = cost[rows, chunk].sum(axis=1)
            i = int(np.argmin(totals))
            if totals[i] < best_cost:
                best, best_cost = chunk[i], totals[i]
        mapping = {t: int(best[t]) for t in range(K)}
    else:
        r, c = linear_sum_assignment(cost)
        mapping = {int(a): int(b) for a, b in zip(r, c)}
    return TypeMatching(mapping, cost)


@dataclass
class TypeScore:
    true_type: int
    learned_type: int
    precision: float
    recall: float
    kl: float | None = None

    def to_json(self) -> dict:
        return {"true_type": self.true_type, "learned_type": self.learned_type,
                "precision": self.precision, "recall": self.recall, "kl": self.kl}


def type_recovery_metrics(truth: dict[str, int], learned: dict[str, int],
                          matching: TypeMatching) -> list[TypeScore]:
    if set(truth) != set(learned):
        raise ValueError("truth and learned labels cover different users")
    back = matching.learned_to_true()
    out = []
    for t, l in sorted(matching.mapping.items()):
        true_t = {u for u, x in truth.items() if x == t}
        pred_t = {u for u, x in learned.items() if back.get(x) == t}
        hit = len(true_t & pred_t)
        out.append(TypeScore(t, l, hit / len(pred_t) if pred_t else 0.0,
                             hit / len(true_t) if true_t else 0.0, float(matching.cost[t, l])))
    return out


def top_share(labels: dict[str, int], n: int = 4) -> float:
    """Fraction of users in the ``n`` most populated labels."""
    if not labels:
        return 0.0
    counts = np.bincount(list(labels.values()))
    return float(np.sort(counts)[::-1][:n].sum() / counts.sum())


# --------------------------------------------------------------------------
# folds


def partition_folds(log_: MessageLog, k: int, users=None) -> list[list[str]]:
    """Split message-connected components into ``k`` folds of balanced user count.

    Components are packed largest first, each into the currently smallest
    fold (lowest index on ties).  A component more than 10% larger than an
    ideal fold triggers a warning, since balance is then impossible.  ``users`` (optional) fixes the id order;
    only users that appear in at least one message are assigned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    active = log_.participants()
    ids = sorted(active) if users is None else [u for u in users if u in active]
    if not ids:
        return [[] for _ in range(k)]
    index = {u: i for i, u in enumerate(ids)}
    a = np.array([index[e.sender_id] for e in log_], dtype=np.int64)
    b = np.array([index[e.receiver_id] for e in log_], dtype=np.int64)
    graph = coo_matrix((np.ones(len(a)), (a, b)), shape=(len(ids), len(ids)))
    n_comp, comp = connected_components(graph, directed=False)
    members: list[list[int]] = [[] for _ in range(n_comp)]
    for i, c in enumerate(comp):
        members[c].append(i)
    members.sort(key=lambda m: (-len(m), m[0]))
    if len(members[0]) > GIANT_SLACK * len(ids) / k:
        warnings.warn(f"largest component has {len(members[0])} of {len(ids)} users; folds will be unbalanced")
    folds: list[list[int]] = [[] for _ in range(k)]
    for m in members:
        j = min(range(k), key=lambda f: (len(folds[f]), f))
        folds[j].extend(m)
    return [sorted((ids[i] for i in f), key=index.get) for f in folds]


# --------------------------------------------------------------------------
# ranking experiment


@dataclass
class RankingResult:
    policy: str
    kept: int
    replied: int
    by_gender: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.replied / self.kept if self.kept else float("nan")

    def gender_rate(self, g: str) -> float:
        kept, rep = self.by_gender.get(g, (0, 0))
        return rep / kept if kept else float("nan")


def eligible_suitors(log_: MessageLog, fold_users) -> dict[str, list[int]]:
    """Initiation indices per suitor in ``fold_users`` with two or more distinct receivers."""
    fold = set(fold_users)
    inits = log_.initiations()
    per: dict[str, list[int]] = {}
    for i, e in enumerate(inits):
        if e.sender_id in fold and e.receiver_id in fold:
            per.setdefault(e.sender_id, []).append(i)
    return {s: idx for s, idx in per.items() if len({inits[i].receiver_id for i in idx}) >= 2}


def policy_scores(model: TrainedModel | None, encoder: PairEncoder, s_idx, r_idx, policy: str,
                  weights: np.ndarray | None = None) -> np.ndarray:
    if policy == "suitor":
        return pair_preferences(model, encoder, s_idx, r_idx, weights)
    if policy == "two_sided":
        return (pair_preferences(model, encoder, s_idx, r_idx, weights)
                * pair_preferences(model, encoder, r_idx, s_idx, weights))
    raise ValueError(f"unknown policy {policy!r}")


def ranking_experiment(model: TrainedModel | None, encoder: PairEncoder, log_: MessageLog, fold_users,
                       policy: str, seed: int = 0, weights: np.ndarray | None = None) -> RankingResult:
    """Keep the top half (rounded up) of each eligible suitor's messages under ``policy``.

    Messages are in log order, so equal scores keep the earlier message.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    inits = log_.initiations()
    groups = eligible_suitors(log_, fold_users)
    if not groups:
        raise ValueError("no suitor in the fold has two or more distinct receivers")
    if policy != "random":
        if model is None:
            raise ValueError(f"policy {policy!r} needs a model")
        if weights is None:
            weights = model.weights_for(encoder)
        flat = [i for idx in groups.values() for i in idx]
        s_idx = np.array([encoder.index[inits[i].sender_id] for i in flat])
        r_idx = np.array([encoder.index[inits[i].receiver_id] for i in flat])
        score_of = dict(zip(flat, policy_scores(model, encoder, s_idx, r_idx, policy, weights)))
    kept = replied = 0
    by_gender = {g: [0, 0] for g in GENDERS}
    for suitor, idx in groups.items():
        if policy == "random":
            order = substream(seed, "rank", suitor).permutation(len(idx))
        else:
            order = np.argsort(-np.array([score_of[i] for i in idx]), kind="stable")
        keep = [idx[j] for j in order[:max(1, math.ceil(len(idx) / 2))]]
        n_rep = sum(inits[i].replied for i in keep)
        kept += len(keep)
        replied += n_rep
        g = encoder.gender[encoder.index[suitor]]
        by_gender[g][0] += len(keep)
        by_gender[g][1] += n_rep
    return RankingResult(policy, kept, replied, {g: tuple(v) for g, v in by_gender.items()})


def base_rate(log_: MessageLog, fold_users) -> float:
    inits = log_.initiations()
    idx = [i for v in eligible_suitors(log_, fold_users).values() for i in v]
    return sum(inits[i].replied for i in idx) / len(idx) if idx else float("nan")


def relative_gain(rate_a: float, rate_b: float) -> float:
    """Percentage by which ``rate_a`` exceeds ``rate_b``."""
    if rate_b <= 0:
        raise ValueError("reference rate must be positive")
    return 100.0 * (rate_a - rate_b) / rate_b


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldOutcome:
    fold: int
    n_users: int
    results: dict[str, RankingResult]

    def gain(self, gender: str | None = None) -> float | None:
        a, b = self.results.get("two_sided"), self.results.get("suitor")
        if a is None or b is None:
            return None
        ra, rb = (a.rate, b.rate) if gender is None else (a.gender_rate(gender), b.gender_rate(gender))
        return relative_gain(ra, rb) if rb > 0 else None


@dataclass
class ExperimentReport:
    folds: list[list[str]]
    outcomes: list[FoldOutcome]
    recovery: dict[str, list[TypeScore]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def wins(self, a: str = "two_sided", b: str = "suitor") -> int:
        return sum(o.results[a].rate > o.results[b].rate for o in self.outcomes)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "folds": [{"fold": i, "n_users": len(f), "users": f} for i, f in enumerate(self.folds)],
            "success_rates": [
                {"fold": o.fold, "policy": p, "kept": r.kept, "replied": r.replied, "rate": r.rate,
                 "by_gender": {g: {"kept": k, "replied": n, "rate": r.gender_rate(g)}
                               for g, (k, n) in r.by_gender.items()}}
                for o in self.outcomes for p, r in o.results.items()
            ],
            "relative_gain": [{"fold": o.fold, "all": o.gain(), **{g: o.gain(g) for g in GENDERS}}
                              for o in self.outcomes],
            "recovery": {g: [s.to_json() for s in scores] for g, scores in self.recovery.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, allow_nan=True) + "\n")


CSV_FIELDS = ("fold", "policy", "gender", "kept", "replied", "rate", "gain_vs_suitor")


def report_rows(report: dict) -> list[dict]:
    """Flatten a saved report into one row per policy, fold and gender."""
    gains = {r["fold"]: r for r in report.get("relative_gain", [])}
    rows = []
    for entry in report["success_rates"]:
        for g, st in sorted(entry["by_gender"].items()):
            gain = gains.get(entry["fold"], {}).get(g) if entry["policy"] == "two_sided" else None
            rows.append({"fold": entry["fold"], "policy": entry["policy"], "gender": g, "kept": st["kept"],
                         "replied": st["replied"], "rate": st["rate"], "gain_vs_suitor": gain})
    return rows


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in report_rows(report):
        w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def cross_validate(encoder: PairEncoder, log_: MessageLog, hp: Hyperparams, schedule: Schedule,
                   k: int = 10, policies=POLICIES, seed: int = 0, config: dict | None = None) -> ExperimentReport:
    """Train on all folds but one, rank the held-out fold's messages, repeat for every fold."""
    folds = partition_folds(log_, k, encoder.user_ids)
    outcomes = []
    for i, fold in enumerate(folds):
        if not fold:
            continue
        held = set(fold)
        train_log = MessageLog(e for e in log_ if e.sender_id not in held and e.receiver_id not in held)
        model = train(train_log, encoder, hp, schedule)
        W = model.weights_for(encoder)
        res = {}
        for p in policies:
            try:
                res[p] = ranking_experiment(model, encoder, log_, fold, p, seed=seed, weights=W)
            except ValueError as exc:
                log.warning("fold %d, policy %s skipped: %s", i, p, exc)
        if res:
            outcomes.append(FoldOutcome(i, len(fold), res))
            log.info("fold %d: %s", i, {p: round(r.rate, 4) for p, r in res.items()})
    return ExperimentReport(folds, outcomes, config=config or {})
