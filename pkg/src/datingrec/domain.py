"""User profiles, message logs, discretization plans and the feature-tuple space.

A feature tuple describes a *counterpart* as seen from a suitor: the
receiver's own age, weight and child information, plus the receiver-minus-
suitor differences in income and height.  A user therefore has no standalone
tuple, only pair-relative ones (see :func:`pair_feature_tuple`).

Plans that bin ``income_level`` and ``height`` instead of the two differences
select the *absolute* tuple mode, in which the income and height components
are the receiver's own bins (equivalently, differences against a zero
reference).  The synthetic market uses this mode.
"""
from __future__ import annotations

import bisect
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np

GENDERS = ("M", "F")
KINDS = ("init", "reply")

REQUIRED_FEATURES = ("age", "weight", "height", "income_level", "child_info")
FEATURE_RANGES = {
    "age": (16.0, 100.0),
    "weight": (30.0, 250.0),
    "height": (120.0, 230.0),
    "income_level": (0, 20),
}
TUPLE_FIELDS = ("age", "weight", "income_dif", "child_info", "height_dif")
ABSOLUTE_FIELDS = ("age", "weight", "income_level", "child_info", "height")
TUPLE_MODES = {"relative": TUPLE_FIELDS, "absolute": ABSOLUTE_FIELDS}


class DataError(ValueError):
    """Invalid input data (bad file contents, unknown ids, out-of-range values)."""


def opposite(gender: str) -> str:
    return "F" if gender == "M" else "M"


# --------------------------------------------------------------------------
# users


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    gender: str
    raw_features: Mapping[str, object]

    def to_json(self) -> dict:
        return {"user_id": self.user_id, "gender": self.gender, "features": dict(self.raw_features)}


def _validate_profile(obj, where: str) -> UserProfile:
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected a JSON object")
    uid = obj.get("user_id")
    if not isinstance(uid, str) or not uid:
        raise DataError(f"{where}: user_id must be a non-empty string")
    gender = obj.get("gender")
    if gender not in GENDERS:
        raise DataError(f"{where}: user {uid!r} has invalid gender {gender!r}")
    feats = obj.get("features")
    if not isinstance(feats, dict):
        raise DataError(f"{where}: user {uid!r} has no features object")
    for name in REQUIRED_FEATURES:
        if name not in feats or feats[name] is None:
            raise DataError(f"{where}: user {uid!r} is missing feature {name!r}")
    for name, (lo, hi) in FEATURE_RANGES.items():
        val = feats[name]
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise DataError(f"{where}: user {uid!r} feature {name!r} is not numeric")
        if not lo <= val <= hi:
            raise DataError(f"{where}: user {uid!r} feature {name!r}={val} outside [{lo}, {hi}]")
    if not isinstance(feats["income_level"], int):
        raise DataError(f"{where}: user {uid!r} income_level must be an integer")
    if not isinstance(feats["child_info"], str):
        raise DataError(f"{where}: user {uid!r} child_info must be a string")
    return UserProfile(uid, gender, dict(feats))


class UserSet:
    """Ordered collection of profiles keyed by ``user_id``."""

    def __init__(self, profiles: Iterable[UserProfile] = ()):
        self._users: dict[str, UserProfile] = {}
        for p in profiles:
            if p.user_id in self._users:
                raise DataError(f"duplicate user_id {p.user_id!r}")
            self._users[p.user_id] = p

    def __len__(self) -> int:
        return len(self._users)

    def __iter__(self) -> Iterator[UserProfile]:
        return iter(self._users.values())

    def __contains__(self, user_id) -> bool:
        return user_id in self._users

    def __getitem__(self, user_id: str) -> UserProfile:
        return self._users[user_id]

    def __eq__(self, other) -> bool:
        return isinstance(other, UserSet) and list(self) == list(other)

    def ids(self) -> list[str]:
        return list(self._users)

    def by_gender(self, gender: str) -> list[UserProfile]:
        return [p for p in self if p.gender == gender]

    def subset(self, user_ids) -> "UserSet":
        keep = set(user_ids)
        return UserSet(p for p in self if p.user_id in keep)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for p in self:
                fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def load_users(path) -> UserSet:
    users = UserSet()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            profile = _validate_profile(obj, f"{path}:{lineno}")
            if profile.user_id in users:
                raise DataError(f"{path}:{lineno}: duplicate user_id {profile.user_id!r}")
            users._users[profile.user_id] = profile
    return users


# --------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class MessageEvent:
    sender_id: str
    receiver_id: str
    ts: int
    replied: bool = False
    kind: str = "init"

    def to_json(self) -> dict:
        return {
            "sender_id": self.sender_id,
            "receiver_id": self.receiver_id,
            "ts": self.ts,
            "replied": self.replied,
            "kind": self.kind,
        }


class MessageLog:
    """Ordered message events plus a per-user index of distinct contacts."""

    def __init__(self, events: Iterable[MessageEvent] = ()):
        self.events: tuple[MessageEvent, ...] = tuple(events)
        contacts: dict[str, list[str]] = {}
        seen: dict[str, set] = {}
        for e in self.events:
            bucket = seen.setdefault(e.sender_id, set())
            if e.receiver_id not in bucket:
                bucket.add(e.receiver_id)
                contacts.setdefault(e.sender_id, []).append(e.receiver_id)
        self.contacts = contacts

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[MessageEvent]:
        return iter(self.events)

    def __eq__(self, other) -> bool:
        return isinstance(other, MessageLog) and self.events == other.events

    def k(self, user_id: str) -> int:
        """Number of distinct counterparts ``user_id`` has sent to."""
        return len(self.contacts.get(user_id, ()))

    def initiations(self) -> list[MessageEvent]:
        return [e for e in self.events if e.kind == "init"]

    def participants(self) -> set[str]:
        out = set()
        for e in self.events:
            out.add(e.sender_id)
            out.add(e.receiver_id)
        return out

    def restrict(self, user_ids) -> "MessageLog":
        """Events whose sender and receiver are both in ``user_ids``."""
        keep = set(user_ids)
        return MessageLog(e for e in self.events if e.sender_id in keep and e.receiver_id in keep)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.events:
                fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def load_messages(path, users: UserSet) -> MessageLog:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: malformed JSON ({exc.msg})") from None
            try:
                s, r, ts = obj["sender_id"], obj["receiver_id"], obj["ts"]
                replied, kind = obj["replied"], obj["kind"]
            except (KeyError, TypeError):
                raise DataError(f"{where}: missing message field") from None
            if not isinstance(ts, int) or isinstance(ts, bool):
                raise DataError(f"{where}: ts must be an integer")
            if not isinstance(replied, bool):
                raise DataError(f"{where}: replied must be a boolean")
            if kind not in KINDS:
                raise DataError(f"{where}: unknown kind {kind!r}")
            for uid in (s, r):
                if uid not in users:
                    raise DataError(f"{where}: unknown user id {uid!r}")
            if s == r:
                raise DataError(f"{where}: sender and receiver are both {s!r}")
            if users[s].gender == users[r].gender:
                raise DataError(f"{where}: {s!r} and {r!r} are on the same side of the market")
            events.append(MessageEvent(s, r, ts, replied, kind))
    return MessageLog(events)


# --------------------------------------------------------------------------
# discretization


@dataclass(frozen=True)
class DiscretizationPlan:
    """Per-feature interval boundaries (numeric) or category lists (strings).

    Numeric intervals are half-open ``[b_i, b_{i+1})`` except the last one,
    which is closed, so ``n`` boundaries give ``n - 1`` bins.
    """

    features: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for name, spec in self.features.items():
            spec = tuple(spec)
            if spec and all(isinstance(v, str) for v in spec):
                if len(set(spec)) != len(spec):
                    raise DataError(f"plan: duplicate categories for {name!r}")
            else:
                if len(spec) < 2:
                    raise DataError(f"plan: {name!r} needs at least two boundaries")
                spec = tuple(float(v) for v in spec)
                if any(b <= a for a, b in zip(spec, spec[1:])):
                    raise DataError(f"plan: boundaries for {name!r} are not strictly increasing")
            clean[name] = spec
        object.__setattr__(self, "features", clean)

    def __contains__(self, name) -> bool:
        return name in self.features

    def is_categorical(self, name: str) -> bool:
        return isinstance(self.features[name][0], str)

    def n_bins(self, name: str) -> int:
        spec = self.features[name]
        return len(spec) if self.is_categorical(name) else len(spec) - 1

    def bin(self, name: str, value) -> int:
        spec = self.features[name]
        if self.is_categorical(name):
            try:
                return spec.index(value)
            except ValueError:
                raise DataError(f"{name}={value!r} is not a declared category") from None
        if not spec[0] <= value <= spec[-1]:
            raise DataError(f"{name}={value} outside plan range [{spec[0]}, {spec[-1]}]")
        return min(bisect.bisect_right(spec, value) - 1, len(spec) - 2)

    def bin_array(self, name: str, values) -> np.ndarray:
        spec = self.features[name]
        if self.is_categorical(name):
            lookup = {c: i for i, c in enumerate(spec)}
            try:
                return np.array([lookup[v] for v in values], dtype=np.int64)
            except KeyError as exc:
                raise DataError(f"{name}={exc.args[0]!r} is not a declared category") from None
        values = np.asarray(values, dtype=float)
        bad = (values < spec[0]) | (values > spec[-1])
        if bad.any():
            v = values[np.argmax(bad)]
            raise DataError(f"{name}={v} outside plan range [{spec[0]}, {spec[-1]}]")
        idx = np.searchsorted(np.asarray(spec), values, side="right") - 1
        return np.minimum(idx, len(spec) - 2).astype(np.int64)

    def to_json(self) -> dict:
        return {k: list(v) for k, v in self.features.items()}

    def save(self, path, extra: dict | None = None) -> None:
        """Write the plan; ``extra`` entries go under ``_``-prefixed keys, which loading skips."""
        obj = self.to_json()
        for k, v in (extra or {}).items():
            obj[f"_{k}"] = v
        Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DiscretizationPlan":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DataError(f"{path}: plan must be a JSON object")
        return cls({k: v for k, v in obj.items() if not k.startswith("_")})


def apply_discretization(users: UserSet, plan: DiscretizationPlan) -> dict[str, dict[str, int]]:
    """Map each user's plan-covered raw features to bin indices."""
    out = {}
    for p in users:
        bins = {}
        for name in plan.features:
            if name not in p.raw_features:
                continue
            try:
                bins[name] = plan.bin(name, p.raw_features[name])
            except DataError as exc:
                raise DataError(f"user {p.user_id!r}, feature {name!r}: {exc}") from None
        out[p.user_id] = bins
    return out


# --------------------------------------------------------------------------
# feature tuples


class FeatureTuple(NamedTuple):
    age: int
    weight: int
    income_dif: int
    child_info: int
    height_dif: int


def tuple_mode(plan: DiscretizationPlan, mode: str | None = None) -> str:
    """``relative`` when the plan bins both differences, else ``absolute``."""
    if mode is None:
        mode = "relative" if all(f in plan for f in TUPLE_FIELDS) else "absolute"
    if mode not in TUPLE_MODES:
        raise DataError(f"unknown tuple mode {mode!r}")
    missing = [f for f in TUPLE_MODES[mode] if f not in plan]
    if missing:
        raise DataError(f"plan lacks tuple features {missing}")
    return mode


def income_difference(suitor_income, receiver_income, signed: bool = True):
    d = np.subtract(receiver_income, suitor_income)
    return d if signed else np.abs(d)


def pair_feature_tuple(suitor: UserProfile, receiver: UserProfile, plan: DiscretizationPlan,
                       signed_income: bool = True, mode: str | None = None) -> FeatureTuple:
    """Tuple describing ``receiver`` relative to ``suitor``."""
    if suitor.gender == receiver.gender:
        raise DataError(f"{suitor.user_id!r} and {receiver.user_id!r} are on the same side")
    rf, sf = receiver.raw_features, suitor.raw_features
    if tuple_mode(plan, mode) == "absolute":
        inc_bin = plan.bin("income_level", rf["income_level"])
        ht_bin = plan.bin("height", rf["height"])
    else:
        inc_bin = plan.bin("income_dif", income_difference(sf["income_level"], rf["income_level"], signed_income))
        ht_bin = plan.bin("height_dif", rf["height"] - sf["height"])
    return FeatureTuple(
        plan.bin("age", rf["age"]),
        plan.bin("weight", rf["weight"]),
        inc_bin,
        plan.bin("child_info", rf["child_info"]),
        ht_bin,
    )


def profile_feature_tuple(user: UserProfile, plan: DiscretizationPlan, mode: str | None = None) -> FeatureTuple:
    """A user's own tuple: its own bins, with any difference taken at zero offset."""
    f = user.raw_features
    if tuple_mode(plan, mode) == "absolute":
        inc_bin, ht_bin = plan.bin("income_level", f["income_level"]), plan.bin("height", f["height"])
    else:
        inc_bin, ht_bin = plan.bin("income_dif", 0), plan.bin("height_dif", 0)
    return FeatureTuple(plan.bin("age", f["age"]), plan.bin("weight", f["weight"]), inc_bin,
                        plan.bin("child_info", f["child_info"]), ht_bin)


class FeatureSpace:
    """Dense 0-based enumeration of all feature tuples declared by a plan."""

    def __init__(self, plan: DiscretizationPlan, mode: str | None = None):
        self.mode = tuple_mode(plan, mode)
        fields = TUPLE_MODES[self.mode]
        self.cards = tuple(plan.n_bins(f) for f in fields)
        self.size = int(np.prod(self.cards))
        strides = [1] * len(self.cards)
        for i in range(len(self.cards) - 2, -1, -1):
            strides[i] = strides[i + 1] * self.cards[i + 1]
        self.strides = tuple(strides)
        canon = json.dumps({"mode": self.mode, **{f: list(plan.features[f]) for f in fields}}, sort_keys=True)
        self.hash = hashlib.sha256(canon.encode()).hexdigest()[:16]

    def __len__(self) -> int:
        return self.size

    def id_of(self, t: FeatureTuple) -> int:
        for v, c in zip(t, self.cards):
            if not 0 <= v < c:
                raise DataError(f"tuple {t} outside feature space {self.cards}")
        return int(sum(v * s for v, s in zip(t, self.strides)))

    def tuple_of(self, idx: int) -> FeatureTuple:
        if not 0 <= idx < self.size:
            raise DataError(f"tuple id {idx} outside 0..{self.size - 1}")
        return FeatureTuple(*((idx // s) % c for s, c in zip(self.strides, self.cards)))

    def ids_of(self, components) -> np.ndarray:
        """Vectorized :meth:`id_of` over five equal-length component arrays."""
        out = np.zeros(len(components[0]), dtype=np.int64)
        for comp, s in zip(components, self.strides):
            out += np.asarray(comp, dtype=np.int64) * s
        return out


class PairEncoder:
    """Precomputed per-user bins for fast pair-tuple computation.

    Agrees with :func:`pair_feature_tuple` pair for pair; the loop-free path
    exists because simulation and market building touch millions of pairs.
    """

    def __init__(self, users: UserSet, plan: DiscretizationPlan, signed_income: bool = True,
                 mode: str | None = None):
        self.plan = plan
        self.space = FeatureSpace(plan, mode)
        self.mode = self.space.mode
        self.signed_income = signed_income
        profiles = list(users)
        self.user_ids = [p.user_id for p in profiles]
        self.index = {uid: i for i, uid in enumerate(self.user_ids)}
        self.gender = np.array([p.gender for p in profiles])
        feats = lambda k: [p.raw_features[k] for p in profiles]  # noqa: E731
        try:
            self.age_bin = plan.bin_array("age", feats("age"))
            self.weight_bin = plan.bin_array("weight", feats("weight"))
            self.child_bin = plan.bin_array("child_info", feats("child_info"))
        except DataError as exc:
            raise DataError(f"discretizing users: {exc}") from None
        self.income = np.array(feats("income_level"), dtype=float)
        self.height = np.array(feats("height"), dtype=float)
        n = len(profiles)
        if self.mode == "absolute":
            try:
                self.income_bin = plan.bin_array("income_level", self.income)
                self.height_bin = plan.bin_array("height", self.height)
            except DataError as exc:
                raise DataError(f"discretizing users: {exc}") from None
            own_inc, own_ht = self.income_bin, self.height_bin
        else:
            own_inc = np.full(n, plan.bin("income_dif", 0))
            own_ht = np.full(n, plan.bin("height_dif", 0))
        self.profile_ids = self.space.ids_of([self.age_bin, self.weight_bin, own_inc, self.child_bin, own_ht])

    def __len__(self) -> int:
        return len(self.user_ids)

    def tuple_ids(self, s_idx, r_idx) -> np.ndarray:
        """Tuple ids of receivers ``r_idx`` relative to suitors ``s_idx``."""
        s_idx = np.asarray(s_idx, dtype=np.int64)
        r_idx = np.asarray(r_idx, dtype=np.int64)
        if np.any(self.gender[s_idx] == self.gender[r_idx]):
            raise DataError("same-side pair in tuple computation")
        if self.mode == "absolute":
            return self.profile_ids[r_idx]
        inc = income_difference(self.income[s_idx], self.income[r_idx], self.signed_income)
        try:
            inc_bin = self.plan.bin_array("income_dif", inc)
            ht_bin = self.plan.bin_array("height_dif", self.height[r_idx] - self.height[s_idx])
        except DataError as exc:
            raise DataError(f"pair difference: {exc}") from None
        return self.space.ids_of(
            [self.age_bin[r_idx], self.weight_bin[r_idx], inc_bin, self.child_bin[r_idx], ht_bin]
        )
