"""Synthetic dating market with known user types and preferences.

Each gender has a few true types; a type prefers a small random set of
counterpart feature tuples.  Users receive a random pool of opposite-gender
candidates and contact ``k_d`` of them by a multinomial draw weighted by their
type's preference.  Replies are an extension used for success-rate
experiments: a receiver replies with probability proportional to its own
type's preference for the suitor's tuple.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .domain import (GENDERS, DiscretizationPlan, FeatureSpace, MessageEvent, MessageLog, PairEncoder,
                     UserProfile, UserSet, opposite)
from .rng import substream

TS0 = 1_320_000_000


def bundled_defaults() -> dict:
    text = resources.files("datingrec").joinpath("data/sim_defaults.json").read_text()
    return json.loads(text)


def default_plan() -> DiscretizationPlan:
    return DiscretizationPlan(bundled_defaults()["plan"])


@dataclass(frozen=True)
class SimConfig:
    users_per_gender: int = 20000
    types_per_gender: int = 4
    recommendations: int = 100
    k_max: int = 10
    favorite_fraction: float = 0.05
    favorite_weight: tuple = (300.0, 500.0)
    other_weight: tuple = (1.0, 2.0)
    # candidate pools are drawn within a region of about this many users per
    # gender, so large markets split into several message components
    region_size: int = 2000
    reply_rate: float = 0.17
    # "uniform": types independent of features; "profile": a user's type is
    # drawn from a per-profile-tuple distribution (symmetric Dirichlet with
    # this concentration), so cold-start type weights carry information
    type_assignment: str = "uniform"
    type_concentration: float = 0.5
    dedupe_repeats: bool = False
    seed: int = 0
    marginals: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if min(self.users_per_gender, self.types_per_gender, self.recommendations, self.region_size) < 1:
            raise ValueError("user, type, recommendation and region counts must be positive")
        if self.k_max < 0 or not 0 < self.favorite_fraction < 1 or not 0 < self.reply_rate < 1:
            raise ValueError("invalid k_max, favorite_fraction or reply_rate")
        if self.type_assignment not in ("profile", "uniform") or self.type_concentration <= 0:
            raise ValueError("type_assignment must be 'profile' or 'uniform' with positive concentration")
        for lo, hi in (self.favorite_weight, self.other_weight):
            if not 0 < lo < hi:
                raise ValueError("weight ranges must be positive and ordered")

    @property
    def regions(self) -> int:
        return max(1, -(-self.users_per_gender // self.region_size))

    def resolved_marginals(self) -> dict:
        return self.marginals if self.marginals is not None else bundled_defaults()["marginals"]

    def to_json(self) -> dict:
        out = asdict(self)
        out["marginals"] = self.resolved_marginals()
        return out


def _marginal_for(marginals: dict, gender: str, feature: str) -> dict:
    src = marginals[gender] if gender in marginals else marginals
    if feature not in src:
        raise ValueError(f"missing marginal for feature {feature!r}")
    return src[feature]


def _py(v):
    return v.item() if isinstance(v, np.generic) else v


def generate_profiles(cfg: SimConfig) -> UserSet:
    """Independent draws from each feature's marginal; genders of equal size."""
    marginals = cfg.resolved_marginals()
    features = ("age", "weight", "height", "income_level", "child_info")
    profiles = []
    for g in GENDERS:
        cols = {}
        for feat in features:
            m = _marginal_for(marginals, g, feat)
            rng = substream(cfg.seed, "sim", "profile", g, feat)
            probs = np.asarray(m["probs"], dtype=float)
            idx = rng.choice(len(m["values"]), size=cfg.users_per_gender, p=probs / probs.sum())
            cols[feat] = [m["values"][i] for i in idx]
        for i in range(cfg.users_per_gender):
            feats = {f: _py(cols[f][i]) for f in features}
            feats["region"] = i % cfg.regions
            profiles.append(UserProfile(f"{g}{i:06d}", g, feats))
    return UserSet(profiles)


@dataclass
class TruePreferences:
    """Per gender: ``p[g]`` is (types x |V|); ``favorites[g][t]`` are tuple ids.

    ``type_table[g]`` (|V| x types), when present, gives the type distribution
    of a user whose own profile tuple is v.
    """

    p: dict[str, np.ndarray]
    favorites: dict[str, list[np.ndarray]]
    type_table: dict[str, np.ndarray] | None = None

    @property
    def types_per_gender(self) -> int:
        return len(next(iter(self.p.values())))

    def to_json(self) -> dict:
        out = {
            "preferences": {g: a.tolist() for g, a in self.p.items()},
            "favorites": {g: [f.tolist() for f in fs] for g, fs in self.favorites.items()},
        }
        if self.type_table is not None:
            out["type_table"] = {g: a.tolist() for g, a in self.type_table.items()}
        return out

    @classmethod
    def from_json(cls, obj) -> "TruePreferences":
        table = obj.get("type_table")
        return cls({g: np.asarray(a, dtype=float) for g, a in obj["preferences"].items()},
                   {g: [np.asarray(f, dtype=np.int64) for f in fs] for g, fs in obj["favorites"].items()},
                   None if table is None else {g: np.asarray(a, dtype=float) for g, a in table.items()})


def n_favorites(cfg: SimConfig, V: int) -> int:
    return int(np.floor(cfg.favorite_fraction * V + 0.5))


def generate_true_preferences(cfg: SimConfig, space: FeatureSpace) -> TruePreferences:
    V = space.size
    nf = n_favorites(cfg, V)
    if nf < 1:
        raise ValueError(f"feature space of {V} tuples is too small for a {cfg.favorite_fraction} favorite set")
    p, favs = {}, {}
    for g in GENDERS:
        rows, fl = [], []
        for t in range(cfg.types_per_gender):
            rng = substream(cfg.seed, "sim", "prefs", g, t)
            fav = np.sort(rng.choice(V, size=nf, replace=False))
            w = rng.uniform(*cfg.other_weight, size=V)
            w[fav] = rng.uniform(*cfg.favorite_weight, size=nf)
            rows.append(w / w.sum())
            fl.append(fav)
        p[g] = np.array(rows)
        favs[g] = fl
    table = None
    if cfg.type_assignment == "profile":
        table = {g: substream(cfg.seed, "sim", "type_table", g).dirichlet(
            np.full(cfg.types_per_gender, cfg.type_concentration), size=V) for g in GENDERS}
    return TruePreferences(p, favs, table)


@dataclass
class SimulationResult:
    users: UserSet
    log: MessageLog
    types: dict[str, int]
    k: dict[str, int]
    pools: dict[str, np.ndarray]
    reply_scale: float | None = None


def _region_members(encoder: PairEncoder, users: UserSet) -> dict:
    out: dict = {}
    for i, uid in enumerate(encoder.user_ids):
        key = (encoder.gender[i], users[uid].raw_features.get("region", 0))
        out.setdefault(key, []).append(i)
    return {k: np.array(v, dtype=np.int64) for k, v in out.items()}


def draw_user(uid: str, members: np.ndarray, cfg: SimConfig, type_probs: np.ndarray | None = None):
    """Type, candidate pool and contact count of one user, from its own substream."""
    rng = substream(cfg.seed, "sim", "user", uid)
    if type_probs is None:
        t = int(rng.integers(cfg.types_per_gender))
    else:
        t = int(rng.choice(len(type_probs), p=type_probs / type_probs.sum()))
    size = min(cfg.recommendations, len(members))
    pool = rng.choice(members, size=size, replace=False) if size else np.zeros(0, dtype=np.int64)
    k = int(rng.integers(0, cfg.k_max + 1))
    return rng, t, pool, k


def simulate_messages(users: UserSet, prefs: TruePreferences, encoder: PairEncoder,
                      cfg: SimConfig) -> SimulationResult:
    members = _region_members(encoder, users)
    events, types, ks, pools = [], {}, {}, {}
    seq = 0
    for si, uid in enumerate(encoder.user_ids):
        g = encoder.gender[si]
        region = users[uid].raw_features.get("region", 0)
        cand = members.get((opposite(g), region), np.zeros(0, dtype=np.int64))
        row = None if prefs.type_table is None else prefs.type_table[g][encoder.profile_ids[si]]
        rng, t, pool, k = draw_user(uid, cand, cfg, row)
        types[uid], ks[uid], pools[uid] = t, k, pool
        if k == 0 or len(pool) == 0:
            continue
        w = prefs.p[g][t][encoder.tuple_ids(np.full(len(pool), si), pool)]
        counts = rng.multinomial(k, w / w.sum())
        if cfg.dedupe_repeats:
            counts = np.minimum(counts, 1)
        for ri in np.repeat(pool, counts):
            events.append(MessageEvent(uid, encoder.user_ids[ri], TS0 + 60 * seq, False, "init"))
            seq += 1
    for g in GENDERS:
        seen = {types[u] for u in encoder.user_ids if users[u].gender == g}
        if len(seen) < cfg.types_per_gender:
            warnings.warn(f"gender {g}: only {len(seen)} of {cfg.types_per_gender} true types have users")
    return SimulationResult(users, MessageLog(events), types, ks, pools)


def reply_probabilities(log: MessageLog, prefs: TruePreferences, types: dict[str, int],
                        encoder: PairEncoder) -> np.ndarray:
    """Receiver-type preference for the suitor's tuple, per initiation (unscaled)."""
    inits = log.initiations()
    if not inits:
        return np.zeros(0)
    s = np.array([encoder.index[e.sender_id] for e in inits])
    r = np.array([encoder.index[e.receiver_id] for e in inits])
    v = encoder.tuple_ids(r, s)
    out = np.empty(len(inits))
    for g in GENDERS:
        mask = encoder.gender[r] == g
        if mask.any():
            t = np.array([types[encoder.user_ids[i]] for i in r[mask]])
            out[mask] = prefs.p[g][t, v[mask]]
    return out


def solve_reply_scale(raw: np.ndarray, target: float) -> float:
    """Scale ``c`` with ``mean(min(1, c * raw)) == target`` (bisection)."""
    if raw.size == 0 or raw.max() <= 0:
        return 0.0
    if np.mean(raw > 0) <= target:
        return float(1.0 / raw[raw > 0].min())
    lo, hi = 0.0, 1.0 / raw[raw > 0].min()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.minimum(1.0, mid * raw).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def simulate_replies(result: SimulationResult, prefs: TruePreferences, encoder: PairEncoder,
                     cfg: SimConfig) -> SimulationResult:
    """Mark initiations replied and add the corresponding reply events."""
    raw = reply_probabilities(result.log, prefs, result.types, encoder)
    scale = solve_reply_scale(raw, cfg.reply_rate)
    rng = substream(cfg.seed, "sim", "reply")
    replied = rng.random(len(raw)) < np.minimum(1.0, scale * raw)
    delays = rng.integers(60, 86_400, size=len(raw))
    events = []
    for e, rep, dly in zip(result.log.initiations(), replied, delays):
        events.append(MessageEvent(e.sender_id, e.receiver_id, e.ts, bool(rep), "init"))
        if rep:
            events.append(MessageEvent(e.receiver_id, e.sender_id, e.ts + int(dly), False, "reply"))
    events.sort(key=lambda e: e.ts)  # stable: inits precede replies at equal ts
    return SimulationResult(result.users, MessageLog(events), result.types, result.k, result.pools, scale)


def contact_distribution(result: SimulationResult, prefs: TruePreferences,
                         encoder: PairEncoder) -> dict[str, np.ndarray]:
    """Expected initiation-tuple distribution of each true type given the realized pools.

    This is the type's preference restricted to the candidates it was
    actually shown, i.e. the distribution its contact tokens are drawn from.
    """
    V = encoder.space.size
    out = {}
    for g in GENDERS:
        acc = np.zeros((prefs.types_per_gender, V))
        for si, uid in enumerate(encoder.user_ids):
            if encoder.gender[si] != g or result.k.get(uid, 0) == 0 or len(result.pools[uid]) == 0:
                continue
            pool = result.pools[uid]
            t = result.types[uid]
            v = encoder.tuple_ids(np.full(len(pool), si), pool)
            w = prefs.p[g][t][v]
            np.add.at(acc[t], v, result.k[uid] * w / w.sum())
        sums = acc.sum(axis=1, keepdims=True)
        out[g] = np.divide(acc, sums, out=np.tile(prefs.p[g].mean(0), (len(acc), 1)), where=sums > 0)
    return out


def simulate(cfg: SimConfig, plan: DiscretizationPlan | None = None, replies: bool = True):
    """Profiles, preferences, messages and (optionally) replies in one call."""
    plan = plan or default_plan()
    users = generate_profiles(cfg)
    encoder = PairEncoder(users, plan)
    prefs = generate_true_preferences(cfg, encoder.space)
    result = simulate_messages(users, prefs, encoder, cfg)
    if replies:
        result = simulate_replies(result, prefs, encoder, cfg)
    return result, prefs, encoder


def truth_json(result: SimulationResult, prefs: TruePreferences, space: FeatureSpace, cfg: SimConfig) -> dict:
    return {
        "types": result.types,
        **prefs.to_json(),
        "feature_space": {"hash": space.hash, "size": space.size, "cards": list(space.cards)},
        "reply_scale": result.reply_scale,
        "config": cfg.to_json(),
    }


def load_truth(path) -> tuple[dict[str, int], TruePreferences, dict]:
    obj = json.loads(Path(path).read_text())
    return {k: int(v) for k, v in obj["types"].items()}, TruePreferences.from_json(obj), obj
