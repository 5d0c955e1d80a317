"""Entropy-family scores, ChiMerge discretization and reply-driven feature selection.

All logarithms are base 2.  Joint tables are indexed ``joint[a, b]``; the
conditional entropy helpers condition on the *row* variable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import DataError, DiscretizationPlan, MessageLog, UserSet, opposite

CHI2_DF1_P05 = 3.841


class UndefinedScore(ValueError):
    """Raised when a ratio score has a zero denominator."""


class SelectionError(ValueError):
    pass


def _xlog2x_sum(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _normalized(table) -> np.ndarray:
    arr = np.asarray(table, dtype=float)
    if arr.size == 0:
        raise ValueError("empty table")
    if (arr < 0).any():
        raise ValueError("negative entries in table")
    total = arr.sum()
    if total <= 0:
        raise ValueError("table has no mass")
    return arr / total


def entropy(dist) -> float:
    p = np.asarray(dist, dtype=float)
    if p.size == 0 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("entropy() expects a probability vector")
    return _xlog2x_sum(p)


def conditional_entropy(joint) -> float:
    """H(B | A) for ``joint[a, b]`` (counts or probabilities)."""
    p = _normalized(joint)
    if p.ndim != 2:
        raise ValueError("joint table must be 2-D")
    pa = np.broadcast_to(p.sum(axis=1, keepdims=True), p.shape)
    mask = p > 0
    # log of the ratio, not ratio of logs: p may be subnormal
    return float((p[mask] * (np.log2(pa[mask]) - np.log2(p[mask]))).sum())


def mutual_information(joint) -> float:
    p = _normalized(joint)
    if p.ndim != 2:
        raise ValueError("joint table must be 2-D")
    pa = np.broadcast_to(p.sum(axis=1, keepdims=True), p.shape)
    pb = np.broadcast_to(p.sum(axis=0, keepdims=True), p.shape)
    mask = p > 0
    return float((p[mask] * (np.log2(p[mask]) - np.log2(pa[mask]) - np.log2(pb[mask]))).sum())


def info(n_y, n_n) -> float:
    """Bits needed to predict a reply from ``n_y`` replied and ``n_n`` ignored messages."""
    total = n_y + n_n
    if n_y < 0 or n_n < 0 or total <= 0:
        raise ValueError("info() needs non-negative counts with a positive total")
    return _xlog2x_sum(np.array([n_y, n_n], dtype=float) / total)


def _partition_array(partitions) -> np.ndarray:
    arr = np.asarray(partitions, dtype=float).reshape(-1, 2)
    if (arr < 0).any():
        raise ValueError("negative partition counts")
    if arr.sum() <= 0:
        raise ValueError("all partitions are empty")
    return arr


def info_given_feature(partitions) -> float:
    arr = _partition_array(partitions)
    sizes = arr.sum(axis=1)
    total = sizes.sum()
    return float(sum(s / total * info(y, n) for (y, n), s in zip(arr, sizes) if s > 0))


def split_info(partitions) -> float:
    arr = _partition_array(partitions)
    return _xlog2x_sum(arr.sum(axis=1) / arr.sum())


def information_gain(partitions) -> float:
    arr = _partition_array(partitions)
    ny, nn = arr.sum(axis=0)
    return info(ny, nn) - info_given_feature(arr)


def information_gain_ratio(partitions) -> float:
    si = split_info(partitions)
    if si <= 0:
        raise UndefinedScore("split information is zero (single non-empty partition)")
    return information_gain(partitions) / si


# --------------------------------------------------------------------------
# ChiMerge


def _chi2_pair(a: np.ndarray, b: np.ndarray) -> float:
    obs = np.vstack([a, b])
    rows = obs.sum(axis=1, keepdims=True)
    cols = obs.sum(axis=0, keepdims=True)
    expected = rows * cols / obs.sum()
    mask = expected > 0
    return float(((obs[mask] - expected[mask]) ** 2 / expected[mask]).sum())


def chimerge(values, labels, significance_threshold: float = CHI2_DF1_P05,
             max_intervals: int = 16, lo=None, hi=None) -> list[float]:
    """Bottom-up chi-square merging of adjacent intervals.

    Starts from one interval per distinct value and merges the leftmost
    adjacent pair with the smallest statistic while that statistic is at or
    below ``significance_threshold`` or while more than ``max_intervals``
    intervals remain.  Returns boundaries ``[lo, start_2, ..., start_k, hi]``
    where each inner boundary is the smallest value of its interval.
    """
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if values.size == 0:
        raise ValueError("chimerge() needs at least one sample")
    if values.shape != labels.shape:
        raise ValueError("values and labels differ in length")
    if max_intervals < 1:
        raise ValueError("max_intervals must be >= 1")
    uniq, inv = np.unique(values, return_inverse=True)
    counts = np.zeros((len(uniq), 2))
    np.add.at(counts, (inv, labels.astype(int)), 1)
    starts = list(uniq)
    cells = [row for row in counts]
    chi = [_chi2_pair(cells[i], cells[i + 1]) for i in range(len(cells) - 1)]
    while chi:
        j = int(np.argmin(chi))  # argmin returns the leftmost minimum
        if chi[j] > significance_threshold and len(cells) <= max_intervals:
            break
        cells[j] = cells[j] + cells[j + 1]
        del cells[j + 1], starts[j + 1], chi[j]
        if j < len(chi):
            chi[j] = _chi2_pair(cells[j], cells[j + 1])
        if j > 0:
            chi[j - 1] = _chi2_pair(cells[j - 1], cells[j])
    lo = float(uniq[0]) if lo is None else float(lo)
    hi = float(uniq[-1]) if hi is None else float(hi)
    if lo > uniq[0] or hi < uniq[-1]:
        raise ValueError("requested range does not cover the data")
    if hi <= float(starts[-1]) or hi <= lo:
        # the top value sits alone in the last interval; widen so edges stay increasing
        hi = max(lo, float(starts[-1])) + 1.0
    return [lo] + [float(s) for s in starts[1:]] + [hi]


# --------------------------------------------------------------------------
# feature selection


@dataclass
class LabeledDataset:
    """Discretized candidate features (integer codes) and reply labels."""

    columns: dict[str, np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        self.columns = {k: np.asarray(v, dtype=np.int64) for k, v in self.columns.items()}
        for k, v in self.columns.items():
            if v.shape != self.labels.shape:
                raise DataError(f"column {k!r} has {len(v)} rows, labels have {len(self.labels)}")

    def partitions(self, name: str) -> np.ndarray:
        col = self.columns[name]
        _, inv = np.unique(col, return_inverse=True)
        out = np.zeros((inv.max() + 1, 2))
        # column 0 counts replies, column 1 non-replies
        np.add.at(out, (inv, (~self.labels).astype(int)), 1)
        return out

    def joint(self, a: str, b: str) -> np.ndarray:
        _, ia = np.unique(self.columns[a], return_inverse=True)
        _, ib = np.unique(self.columns[b], return_inverse=True)
        out = np.zeros((ia.max() + 1, ib.max() + 1))
        np.add.at(out, (ia, ib), 1)
        return out


@dataclass
class SelectionConfig:
    redundancy_entropy_threshold: float = 0.05
    redundancy_mi_threshold: float = 0.9


@dataclass
class FeatureScore:
    igr: float | None
    ig: float
    split_info: float
    eliminated_by: dict | None = None


@dataclass
class FeatureScoreReport:
    scores: dict[str, FeatureScore]
    mean_igr: float
    pairwise: dict[tuple[str, str], dict] = field(default_factory=dict)

    @property
    def selected(self) -> list[str]:
        alive = [k for k, s in self.scores.items() if s.eliminated_by is None]
        return sorted(alive, key=lambda k: (-self.scores[k].igr, k))

    def ranking(self) -> list[str]:
        return sorted(self.scores, key=lambda k: (-(self.scores[k].igr or 0.0), k))

    def to_json(self) -> dict:
        return {
            "mean_igr": self.mean_igr,
            "selected": self.selected,
            "features": {
                k: {"igr": s.igr, "ig": s.ig, "split_info": s.split_info, "eliminated_by": s.eliminated_by}
                for k, s in sorted(self.scores.items())
            },
            "pairwise": [
                {"a": a, "b": b, **v} for (a, b), v in sorted(self.pairwise.items())
            ],
        }


def select_features(dataset: LabeledDataset, config: SelectionConfig | None = None) -> FeatureScoreReport:
    """Rank by information gain ratio, apply the above-mean floor, then drop redundant features.

    A feature survives the floor when its IGR is strictly above the mean IGR
    of all candidates with a defined ratio; when every defined ratio is equal
    nobody is below average and all are kept.  Among survivors, taken in
    decreasing IGR order, feature ``b`` is dropped if some already-kept ``a``
    has ``H(b|a)`` below the entropy threshold or ``I(a;b)`` above the MI
    threshold times ``min(H(a), H(b))``.
    """
    config = config or SelectionConfig()
    if not dataset.columns or dataset.labels.size == 0:
        raise SelectionError("empty dataset")
    scores: dict[str, FeatureScore] = {}
    for name in dataset.columns:
        parts = dataset.partitions(name)
        ig = information_gain(parts)
        si = split_info(parts)
        igr = ig / si if si > 0 else None
        scores[name] = FeatureScore(igr, ig, si)
    defined = [s.igr for s in scores.values() if s.igr is not None]
    mean = float(np.mean(defined)) if defined else 0.0
    all_equal = bool(defined) and max(defined) - min(defined) <= 1e-12
    for name, s in scores.items():
        if s.igr is None:
            s.eliminated_by = {"rule": "undefined_igr", "partner": None, "score": None}
        elif not all_equal and not s.igr > mean:
            s.eliminated_by = {"rule": "below_mean_igr", "partner": None, "score": s.igr}

    report = FeatureScoreReport(scores, mean)
    floor_survivors = sorted((k for k, s in scores.items() if s.eliminated_by is None),
                             key=lambda k: (-scores[k].igr, k))
    marg = {k: entropy(np.bincount(np.unique(dataset.columns[k], return_inverse=True)[1]) / dataset.labels.size)
            for k in floor_survivors}
    for i, a in enumerate(floor_survivors):
        for b in floor_survivors[i + 1:]:
            j = dataset.joint(a, b)
            report.pairwise[(a, b)] = {
                "h_b_given_a": conditional_entropy(j),
                "h_a_given_b": conditional_entropy(j.T),
                "mutual_information": mutual_information(j),
            }
    kept: list[str] = []
    for b in floor_survivors:
        for a in kept:
            pw = report.pairwise[(a, b)]
            if pw["h_b_given_a"] < config.redundancy_entropy_threshold:
                scores[b].eliminated_by = {"rule": "conditional_entropy", "partner": a, "score": pw["h_b_given_a"]}
                break
            limit = config.redundancy_mi_threshold * min(marg[a], marg[b])
            if pw["mutual_information"] > limit:
                scores[b].eliminated_by = {"rule": "mutual_information", "partner": a,
                                           "score": pw["mutual_information"]}
                break
        else:
            kept.append(b)
    if not kept:
        raise SelectionError("no features survived selection; review the thresholds")
    return report


# --------------------------------------------------------------------------
# building candidate features from messages

DIFF_SOURCES = {"age_dif": "age", "weight_dif": "weight", "height_dif": "height", "income_dif": "income_level"}


def candidate_features(users: UserSet, log: MessageLog) -> tuple[dict[str, list], np.ndarray]:
    """Raw pair-expanded candidate features of every initiation, plus reply labels.

    Columns describe the receiver (its raw features) and receiver-minus-suitor
    differences of the numeric ones.
    """
    inits = log.initiations()
    if not inits:
        raise DataError("no initiation messages to build features from")
    names = sorted({k for p in users for k in p.raw_features})
    cols: dict[str, list] = {k: [] for k in names}
    cols.update({k: [] for k in DIFF_SOURCES})
    for e in inits:
        s, r = users[e.sender_id].raw_features, users[e.receiver_id].raw_features
        for k in names:
            cols[k].append(r.get(k))
        for k, src in DIFF_SOURCES.items():
            cols[k].append(r[src] - s[src])
    labels = np.array([e.replied for e in inits], dtype=bool)
    return cols, labels


def discretize_columns(columns: dict[str, list], labels, significance_threshold: float = CHI2_DF1_P05,
                       max_intervals: int = 16) -> LabeledDataset:
    """ChiMerge numeric columns and code categorical ones; columns with gaps are dropped."""
    coded = {}
    for name, vals in columns.items():
        if any(v is None for v in vals):
            continue
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            bounds = chimerge(vals, labels, significance_threshold, max_intervals)
            plan = DiscretizationPlan({name: bounds})
            coded[name] = plan.bin_array(name, vals)
        else:
            _, inv = np.unique(np.asarray([str(v) for v in vals]), return_inverse=True)
            coded[name] = inv
    return LabeledDataset(coded, labels)


def build_plan(users: UserSet, log: MessageLog, significance_threshold: float = CHI2_DF1_P05,
               max_intervals: int = 16) -> DiscretizationPlan:
    """ChiMerge plan for the tuple features, covering every realizable value.

    Receiver features are discretized against the reply flag of the
    initiations they received; difference features are binned directly on the
    signed differences observed in those initiations.
    """
    cols, labels = candidate_features(users, log)
    plan = {}
    for feat in ("age", "weight"):
        vals = [p.raw_features[feat] for p in users]
        plan[feat] = chimerge(cols[feat], labels, significance_threshold, max_intervals,
                              lo=min(vals), hi=max(vals))
    for feat, src in (("income_dif", "income_level"), ("height_dif", "height")):
        lo, hi = _difference_range(users, src)
        plan[feat] = chimerge(cols[feat], labels, significance_threshold, max_intervals, lo=lo, hi=hi)
    plan["child_info"] = sorted({str(p.raw_features["child_info"]) for p in users})
    return DiscretizationPlan(plan)


def _difference_range(users: UserSet, feat: str) -> tuple[float, float]:
    lo, hi = np.inf, -np.inf
    for g in ("M", "F"):
        mine = [p.raw_features[feat] for p in users.by_gender(g)]
        theirs = [p.raw_features[feat] for p in users.by_gender(opposite(g))]
        if mine and theirs:
            lo = min(lo, min(theirs) - max(mine))
            hi = max(hi, max(theirs) - min(mine))
    if not np.isfinite(lo):
        raise DataError("both genders are needed to compute difference ranges")
    return float(lo), float(hi)
