"""Collapsed Gibbs sampling of user types and the learned preference functions.

Each side of the market (suitor gender) is an independent LDA-style model:
a user is a "document" whose tokens are the feature tuples of the
counterparts it contacted; a single latent type per user selects the
categorical ``phi[t]`` those tokens are drawn from.  Type proportions and
``phi`` are integrated out, so the chain only moves the assignments ``z``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.special import gammaln

from .domain import (GENDERS, DataError, DiscretizationPlan, FeatureSpace, MessageLog, PairEncoder,
                     UserProfile, pair_feature_tuple, profile_feature_tuple)
from .rng import substream


@dataclass(frozen=True, eq=False)
class Hyperparams:
    T: int
    alpha: float
    m: np.ndarray
    beta: float
    n: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        n = np.asarray(self.n, dtype=float)
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if m.shape != (self.T,) or (m <= 0).any() or abs(m.sum() - 1) > 1e-9:
            raise ValueError("m must be a positive probability vector of length T")
        if n.ndim != 1 or (n <= 0).any() or abs(n.sum() - 1) > 1e-9:
            raise ValueError("n must be a positive probability vector")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "n", n)

    @property
    def V(self) -> int:
        return len(self.n)

    @classmethod
    def symmetric(cls, T: int, V: int, alpha: float = 1.0, beta_per_tuple: float = 0.5) -> "Hyperparams":
        """Uniform base measures; ``beta = beta_per_tuple * V``."""
        return cls(T, float(alpha), np.full(T, 1.0 / T), beta_per_tuple * V, np.full(V, 1.0 / V))

    def to_json(self) -> dict:
        return {"T": self.T, "alpha": self.alpha, "beta": self.beta, "m": self.m.tolist(), "n": self.n.tolist()}

    @classmethod
    def from_json(cls, obj) -> "Hyperparams":
        return cls(int(obj["T"]), float(obj["alpha"]), obj["m"], float(obj["beta"]), obj["n"])


@dataclass(frozen=True)
class Schedule:
    burn_in: int = 500
    n_samples: int = 100
    thin: int = 5
    seed: int = 0


# --------------------------------------------------------------------------
# corpus and state


@dataclass
class Corpus:
    """Token lists in CSR layout; tokens of a user are sorted by tuple id.

    ``rep[i]`` counts earlier occurrences of the same tuple within the user,
    which turns the Gamma ratios of the conditional into running products.
    """

    user_ids: list[str]
    ptr: np.ndarray
    tokens: np.ndarray
    rep: np.ndarray
    V: int

    @classmethod
    def from_tokens(cls, tokens_by_user: dict[str, list[int]], V: int) -> "Corpus":
        ids, ptr, toks, rep = [], [0], [], []
        for uid, tk in tokens_by_user.items():
            if not tk:
                continue
            tk = sorted(int(t) for t in tk)
            if tk[0] < 0 or tk[-1] >= V:
                raise DataError(f"token outside 0..{V - 1} for user {uid!r}")
            ids.append(uid)
            prev, c = None, 0
            for t in tk:
                c = c + 1 if t == prev else 0
                prev = t
                toks.append(t)
                rep.append(c)
            ptr.append(len(toks))
        return cls(ids, np.array(ptr, dtype=np.int64), np.array(toks, dtype=np.int64),
                   np.array(rep, dtype=np.int64), V)

    @property
    def D(self) -> int:
        return len(self.user_ids)

    @property
    def N(self) -> int:
        return len(self.tokens)

    def user_tokens(self, d: int) -> np.ndarray:
        return self.tokens[self.ptr[d]:self.ptr[d + 1]]


def build_corpus(log: MessageLog, encoder: PairEncoder, gender: str) -> Corpus:
    """Tokens of every ``gender`` user who sent at least one message (initiation or reply)."""
    senders, receivers = [], []
    for e in log:
        si = encoder.index[e.sender_id]
        if encoder.gender[si] == gender:
            senders.append(si)
            receivers.append(encoder.index[e.receiver_id])
    by_user: dict[int, list[int]] = {}
    if senders:
        tids = encoder.tuple_ids(senders, receivers)
        for si, t in zip(senders, tids):
            by_user.setdefault(si, []).append(int(t))
    ordered = {encoder.user_ids[i]: by_user[i] for i in sorted(by_user)}
    return Corpus.from_tokens(ordered, encoder.space.size)


class GibbsState:
    def __init__(self, corpus: Corpus, hp: Hyperparams, z: np.ndarray, rng: np.random.Generator):
        if hp.V != corpus.V:
            raise ValueError(f"hyperparameters cover {hp.V} tuples, corpus has {corpus.V}")
        self.corpus, self.hp, self.rng = corpus, hp, rng
        self.z = np.asarray(z, dtype=np.int64).copy()
        self.Nvt = np.zeros((corpus.V, hp.T), dtype=np.int64)
        np.add.at(self.Nvt, (corpus.tokens, np.repeat(self.z, np.diff(corpus.ptr))), 1)
        self.Nt = self.Nvt.sum(axis=0)
        self.Dt = np.bincount(self.z, minlength=hp.T).astype(np.int64)
        self.removed: int | None = None

    def remove(self, d: int) -> None:
        if self.removed is not None:
            raise RuntimeError(f"user {self.removed} is already removed")
        t = self.z[d]
        toks = self.corpus.user_tokens(d)
        np.subtract.at(self.Nvt[:, t], toks, 1)
        self.Nt[t] -= len(toks)
        self.Dt[t] -= 1
        self.removed = d

    def add(self, d: int, t: int) -> None:
        if self.removed != d:
            raise RuntimeError(f"user {d} is not the removed user")
        toks = self.corpus.user_tokens(d)
        np.add.at(self.Nvt[:, t], toks, 1)
        self.Nt[t] += len(toks)
        self.Dt[t] += 1
        self.z[d] = t
        self.removed = None

    def check(self) -> None:
        assert (self.Nt == self.Nvt.sum(axis=0)).all()
        assert self.Dt.sum() == self.corpus.D - (self.removed is not None)
        assert (self.Nvt >= 0).all()


def init_state(corpus: Corpus, hp: Hyperparams, seed: int, *names) -> GibbsState:
    if corpus.N == 0:
        raise DataError("empty corpus")
    rng = substream(seed, "lda", *names)
    z = rng.integers(hp.T, size=corpus.D)
    return GibbsState(corpus, hp, z, rng)


def log_conditional_scores(state: GibbsState, d: int) -> np.ndarray:
    """Log of the unnormalized collapsed conditional of ``z_d`` (Gamma form)."""
    if state.removed != d:
        raise RuntimeError(f"state is not in the (-{d}) form")
    hp, corpus = state.hp, state.corpus
    toks = corpus.user_tokens(d)
    vs, c = np.unique(toks, return_counts=True)
    bn = hp.beta * hp.n[vs][:, None]
    N = state.Nvt[vs].astype(float)
    Nt = state.Nt.astype(float)
    k = len(toks)
    D = corpus.D
    out = (gammaln(Nt + hp.beta) - gammaln(Nt + k + hp.beta)
           + (gammaln(N + c[:, None] + bn) - gammaln(N + bn)).sum(axis=0))
    return out + np.log((state.Dt + hp.alpha * hp.m) / (D - 1 + hp.alpha))


def gibbs_conditional(state: GibbsState, d: int) -> np.ndarray:
    ls = log_conditional_scores(state, d)
    p = np.exp(ls - ls.max())
    return p / p.sum()


def log_joint(state: GibbsState) -> float:
    """log P(Data, z) with theta and phi integrated out."""
    hp = state.hp
    bn = hp.beta * hp.n
    am = hp.alpha * hp.m
    words = (hp.T * gammaln(hp.beta) - gammaln(state.Nt + hp.beta).sum()
             + (gammaln(state.Nvt + bn[:, None]) - gammaln(bn)[:, None]).sum())
    types = (gammaln(hp.alpha) - gammaln(state.Dt.sum() + hp.alpha)
             + (gammaln(state.Dt + am) - gammaln(am)).sum())
    return float(words + types)


@njit(cache=True)
def _log_scores_kernel(d, Nvt, Nt, Dt, ptr, tok, rep, beta_n, beta, alpha_m, out):
    a = ptr[d]
    b = ptr[d + 1]
    k = b - a
    for t in range(Nt.shape[0]):
        s = np.log(Dt[t] + alpha_m[t])
        for i in range(a, b):
            v = tok[i]
            s += np.log(Nvt[v, t] + beta_n[v] + rep[i])
        for j in range(k):
            s -= np.log(Nt[t] + beta + j)
        out[t] = s


@njit(cache=True)
def _sweep_kernel(z, Nvt, Nt, Dt, ptr, tok, rep, beta_n, beta, alpha_m, u):
    T = Nt.shape[0]
    logp = np.empty(T)
    cum = np.empty(T)
    for d in range(z.shape[0]):
        a = ptr[d]
        b = ptr[d + 1]
        t = z[d]
        for i in range(a, b):
            Nvt[tok[i], t] -= 1
        Nt[t] -= b - a
        Dt[t] -= 1
        _log_scores_kernel(d, Nvt, Nt, Dt, ptr, tok, rep, beta_n, beta, alpha_m, logp)
        mx = logp.max()
        total = 0.0
        for j in range(T):
            total += np.exp(logp[j] - mx)
            cum[j] = total
        target = u[d] * total
        t = T - 1
        for j in range(T):
            if cum[j] > target:
                t = j
                break
        for i in range(a, b):
            Nvt[tok[i], t] += 1
        Nt[t] += b - a
        Dt[t] += 1
        z[d] = t


@njit(cache=True)
def _icm_kernel(z, Nvt, Nt, Dt, ptr, tok, rep, beta_n, beta, alpha_m):
    """Move every user to its most probable type; returns the number of moves."""
    T = Nt.shape[0]
    logp = np.empty(T)
    moved = 0
    for d in range(z.shape[0]):
        a = ptr[d]
        b = ptr[d + 1]
        old = z[d]
        for i in range(a, b):
            Nvt[tok[i], old] -= 1
        Nt[old] -= b - a
        Dt[old] -= 1
        _log_scores_kernel(d, Nvt, Nt, Dt, ptr, tok, rep, beta_n, beta, alpha_m, logp)
        t = old
        for j in range(T):
            if logp[j] > logp[t] + 1e-9:
                t = j
        for i in range(a, b):
            Nvt[tok[i], t] += 1
        Nt[t] += b - a
        Dt[t] += 1
        z[d] = t
        if t != old:
            moved += 1
    return moved


def kernel_log_scores(state: GibbsState, d: int) -> np.ndarray:
    """Running-product form of :func:`log_conditional_scores`, as used in sweeps.

    Omits the ``D - 1 + alpha`` denominator, which is constant in ``t``.
    """
    if state.removed != d:
        raise RuntimeError(f"state is not in the (-{d}) form")
    hp, c = state.hp, state.corpus
    out = np.empty(hp.T)
    _log_scores_kernel(d, state.Nvt, state.Nt, state.Dt, c.ptr, c.tokens, c.rep,
                       hp.beta * hp.n, hp.beta, hp.alpha * hp.m, out)
    return out


def gibbs_sweep(state: GibbsState) -> GibbsState:
    """Resample every user once, in corpus order."""
    if state.removed is not None:
        raise RuntimeError("cannot sweep a state with a removed user")
    hp, c = state.hp, state.corpus
    u = state.rng.random(c.D)
    _sweep_kernel(state.z, state.Nvt, state.Nt, state.Dt, c.ptr, c.tokens, c.rep,
                  hp.beta * hp.n, hp.beta, hp.alpha * hp.m, u)
    return state


# --------------------------------------------------------------------------
# estimates


def estimate_phi(Nvt: np.ndarray, hp: Hyperparams) -> np.ndarray:
    """Posterior-mean preference matrix, shape ``(T, V)``."""
    Nvt = np.asarray(Nvt, dtype=float)
    return (hp.beta * hp.n[None, :] + Nvt.T) / (hp.beta + Nvt.sum(axis=0)[:, None])


def type_prior_predictive(Dt, hp: Hyperparams) -> np.ndarray:
    Dt = np.asarray(Dt, dtype=float)
    return (Dt + hp.alpha * hp.m) / (Dt.sum() + hp.alpha)


def profile_type_mle(z, profile_ids, hp: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    """Type distribution given a user's own profile tuple.

    Returns ``(q, seen)`` where ``q`` has one row per tuple id; rows of tuples
    with no training user fall back to the type prior predictive.
    """
    z = np.asarray(z, dtype=np.int64)
    profile_ids = np.asarray(profile_ids, dtype=np.int64)
    C = np.zeros((hp.V, hp.T))
    np.add.at(C, (profile_ids, z), 1)
    seen = C.sum(axis=1) > 0
    q = (C + hp.alpha * hp.m) / (C.sum(axis=1, keepdims=True) + hp.alpha)
    q[~seen] = type_prior_predictive(np.bincount(z, minlength=hp.T), hp)
    return q, seen


def _greedy_row_match(phi: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """``perm[t]`` = row of ``ref`` matched to row ``t`` of ``phi`` (greedy on L1 distance)."""
    dist = np.abs(phi[:, None, :] - ref[None, :, :]).sum(axis=2)
    T = len(phi)
    perm = np.full(T, -1)
    for _ in range(T):
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        perm[i] = j
        dist[i, :] = np.inf
        dist[:, j] = np.inf
    return perm


@dataclass
class SideModel:
    """Posterior summaries for the users of one gender acting as suitors."""

    gender: str
    user_ids: list[str]
    phi: np.ndarray
    mu: np.ndarray
    q: np.ndarray
    q_seen: np.ndarray
    labels: np.ndarray
    log_joint_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.index = {u: i for i, u in enumerate(self.user_ids)}

    @property
    def type_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.phi.shape[0])

    def hard_labels(self) -> dict[str, int]:
        """Type of each training user in the posterior mode."""
        return {u: int(t) for u, t in zip(self.user_ids, self.labels)}

    def mu_labels(self) -> dict[str, int]:
        return {u: int(np.argmax(row)) for u, row in zip(self.user_ids, self.mu)}

    def to_json(self) -> dict:
        prior = self.q[~self.q_seen][0].tolist() if (~self.q_seen).any() else None
        return {
            "phi": self.phi.tolist(),
            "user_ids": list(self.user_ids),
            "mu": {u: row.tolist() for u, row in zip(self.user_ids, self.mu)},
            "q": {str(v): self.q[v].tolist() for v in np.flatnonzero(self.q_seen)},
            "q_prior": prior,
            "labels": self.labels.tolist(),
            "log_joint_trace": self.log_joint_trace,
        }

    @classmethod
    def from_json(cls, gender: str, obj, hp: Hyperparams) -> "SideModel":
        q = np.tile(np.asarray(obj["q_prior"] if obj["q_prior"] is not None else hp.m, dtype=float), (hp.V, 1))
        seen = np.zeros(hp.V, dtype=bool)
        for k, row in obj["q"].items():
            q[int(k)] = row
            seen[int(k)] = True
        ids = list(obj["user_ids"])  # explicit: "mu" is key-sorted on disk, "labels" is not
        mu = np.array([obj["mu"][u] for u in ids], dtype=float).reshape(len(ids), hp.T)
        return cls(gender, ids, np.asarray(obj["phi"], dtype=float), mu, q, seen,
                   obj["labels"], list(obj["log_joint_trace"]))


@dataclass
class TrainedModel:
    hp: Hyperparams
    plan: DiscretizationPlan
    sides: dict[str, SideModel]
    schedule: Schedule
    signed_income: bool = True

    tuple_mode: str | None = None

    def __post_init__(self):
        self.space = FeatureSpace(self.plan, self.tuple_mode)
        self.tuple_mode = self.space.mode

    @property
    def feature_space_hash(self) -> str:
        return self.space.hash

    def profile_id(self, user: UserProfile) -> int:
        return self.space.id_of(profile_feature_tuple(user, self.plan, self.tuple_mode))

    def type_weights(self, user: UserProfile) -> np.ndarray:
        """mu for training users, the profile table q otherwise."""
        side = self.sides[user.gender]
        i = side.index.get(user.user_id)
        if i is not None:
            return side.mu[i]
        return side.q[self.profile_id(user)]

    def weights_for(self, encoder: PairEncoder) -> np.ndarray:
        """Vectorized :meth:`type_weights` for every user of ``encoder``."""
        if encoder.space.hash != self.feature_space_hash:
            raise DataError("encoder and model use different feature spaces")
        W = np.empty((len(encoder), self.hp.T))
        for g, side in self.sides.items():
            mask = encoder.gender == g
            W[mask] = side.q[encoder.profile_ids[mask]]
            for j in np.flatnonzero(mask):
                i = side.index.get(encoder.user_ids[j])
                if i is not None:
                    W[j] = side.mu[i]
        return W

    def to_json(self) -> dict:
        return {
            "hyperparams": self.hp.to_json(),
            "schedule": asdict(self.schedule),
            "signed_income": self.signed_income,
            "tuple_mode": self.tuple_mode,
            "plan": self.plan.to_json(),
            "feature_space_hash": self.feature_space_hash,
            "sides": {g: s.to_json() for g, s in self.sides.items()},
        }

    def save(self, path, extra: dict | None = None) -> None:
        obj = self.to_json()
        if extra:
            obj.update(extra)
        Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainedModel":
        try:
            obj = json.loads(Path(path).read_text())
            hp = Hyperparams.from_json(obj["hyperparams"])
            plan = DiscretizationPlan(obj["plan"])
            model = cls(hp, plan, {g: SideModel.from_json(g, s, hp) for g, s in obj["sides"].items()},
                        Schedule(**obj["schedule"]), obj["signed_income"], obj["tuple_mode"])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: not a model file ({exc})") from None
        if model.feature_space_hash != obj["feature_space_hash"]:
            raise DataError(f"{path}: feature space hash mismatch")
        return model


MERGE_EVERY = 25


def try_merges(state: GibbsState) -> int:
    """Greedily fold whole occupied types into one another while the log joint rises.

    Single-site Gibbs moves rarely reunite a type that got split across two
    labels early on, because every intermediate state is worse.  Only used
    during burn-in, so the retained chain stays a plain Gibbs sampler.
    """
    merged = 0
    while True:
        base = log_joint(state)
        occupied = [int(t) for t in np.flatnonzero(state.Dt)]
        best = None
        for i, a in enumerate(occupied):
            for b in occupied[i + 1:]:
                gain = _merge_gain(state, a, b)
                if gain > 0 and (best is None or gain > best[0]):
                    best = (gain, a, b)
        if best is None:
            return merged
        _, a, b = best
        state.z[state.z == b] = a
        state.Nvt[:, a] += state.Nvt[:, b]
        state.Nvt[:, b] = 0
        state.Nt[a] += state.Nt[b]
        state.Nt[b] = 0
        state.Dt[a] += state.Dt[b]
        state.Dt[b] = 0
        merged += 1
        assert log_joint(state) > base


def _merge_gain(state: GibbsState, a: int, b: int) -> float:
    """Change in log joint from relabeling every user of type b as a."""
    hp = state.hp
    bn = hp.beta * hp.n

    def topic(N, Nt):
        return gammaln(hp.beta) - gammaln(Nt + hp.beta) + (gammaln(N + bn) - gammaln(bn)).sum()

    def doc(Dt, t):
        am = hp.alpha * hp.m[t]
        return gammaln(Dt + am) - gammaln(am)

    Na, Nb = state.Nvt[:, a].astype(float), state.Nvt[:, b].astype(float)
    before = topic(Na, state.Nt[a]) + topic(Nb, state.Nt[b]) + doc(state.Dt[a], a) + doc(state.Dt[b], b)
    after = (topic(Na + Nb, state.Nt[a] + state.Nt[b]) + topic(np.zeros_like(Nb), 0)
             + doc(state.Dt[a] + state.Dt[b], a) + doc(0, b))
    return float(after - before)


def climb_to_mode(state: GibbsState, max_rounds: int = 100) -> GibbsState:
    """Coordinate ascent on the log joint: type merges, then per-user argmax moves.

    Each step never lowers the log joint, so this ends at a local mode.
    """
    hp, c = state.hp, state.corpus
    for _ in range(max_rounds):
        merged = try_merges(state)
        moved = _icm_kernel(state.z, state.Nvt, state.Nt, state.Dt, c.ptr, c.tokens, c.rep,
                            hp.beta * hp.n, hp.beta, hp.alpha * hp.m)
        if not merged and not moved:
            break
    return state


def run_chain(corpus: Corpus, hp: Hyperparams, schedule: Schedule, *names):
    """Burn in, then keep ``n_samples`` states ``thin`` sweeps apart.

    Returns ``(phi, mu, z_map, trace)``.  The retained sample with the highest
    log joint is climbed to a local mode, which supplies phi and the hard
    assignment.  mu is the frequency of each user's type across retained
    samples after greedy alignment of each sample's phi rows to the mode's.
    """
    if schedule.n_samples < 1 or schedule.thin < 1 or schedule.burn_in < 0:
        raise ValueError("schedule needs n_samples >= 1, thin >= 1, burn_in >= 0")
    state = init_state(corpus, hp, schedule.seed, *names)
    trace = []
    samples = []
    total = schedule.burn_in + schedule.n_samples * schedule.thin
    for sweep in range(1, total + 1):
        gibbs_sweep(state)
        if sweep <= schedule.burn_in and sweep % MERGE_EVERY == 0:
            try_merges(state)
        lj = log_joint(state)
        trace.append(lj)
        if sweep > schedule.burn_in and (sweep - schedule.burn_in) % schedule.thin == 0:
            samples.append((lj, state.z.copy(), state.Nvt.copy()))
    best = max(range(len(samples)), key=lambda i: samples[i][0])
    mode = climb_to_mode(GibbsState(corpus, hp, samples[best][1], state.rng))
    z_map = mode.z.copy()
    phi = estimate_phi(mode.Nvt, hp)
    freq = np.zeros((corpus.D, hp.T))
    rows = np.arange(corpus.D)
    for _, z, N in samples:
        perm = _greedy_row_match(estimate_phi(N, hp), phi)
        freq[rows, perm[z]] += 1
    return phi, freq / len(samples), z_map, trace


def train(log: MessageLog, encoder: PairEncoder, hp: Hyperparams, schedule: Schedule) -> TrainedModel:
    """Fit one chain per suitor gender on every sender's contact tuples."""
    if hp.V != encoder.space.size:
        raise ValueError(f"hyperparameters cover {hp.V} tuples, feature space has {encoder.space.size}")
    sides = {}
    total_tokens = 0
    for g in GENDERS:
        corpus = build_corpus(log, encoder, g)
        total_tokens += corpus.N
        own_profiles = encoder.profile_ids[[encoder.index[u] for u in corpus.user_ids]]
        if corpus.N == 0:
            phi = np.tile(hp.n, (hp.T, 1))
            q, seen = profile_type_mle(np.zeros(0, dtype=np.int64), own_profiles, hp)
            sides[g] = SideModel(g, [], phi, np.zeros((0, hp.T)), q, seen, np.zeros(0, dtype=np.int64))
            continue
        phi, mu, z_map, trace = run_chain(corpus, hp, schedule, g)
        q, seen = profile_type_mle(z_map, own_profiles, hp)
        sides[g] = SideModel(g, corpus.user_ids, phi, mu, q, seen, z_map, trace)
    if total_tokens == 0:
        raise DataError("empty corpus")
    return TrainedModel(hp, encoder.plan, sides, schedule, encoder.signed_income, encoder.mode)


def preference(model: TrainedModel, s: UserProfile, r: UserProfile) -> float:
    """Probability that ``s`` contacts ``r``: mixture of type preferences at r's tuple."""
    if s.gender == r.gender:
        return 0.0
    v = model.space.id_of(pair_feature_tuple(s, r, model.plan, model.signed_income, model.tuple_mode))
    return float(model.type_weights(s) @ model.sides[s.gender].phi[:, v])


def pair_preferences(model: TrainedModel, encoder: PairEncoder, s_idx, r_idx,
                     weights: np.ndarray | None = None) -> np.ndarray:
    """Vectorized :func:`preference` over index arrays into ``encoder``."""
    s_idx = np.asarray(s_idx, dtype=np.int64)
    r_idx = np.asarray(r_idx, dtype=np.int64)
    W = model.weights_for(encoder) if weights is None else weights
    out = np.zeros(len(s_idx))
    cross = encoder.gender[s_idx] != encoder.gender[r_idx]
    for g, side in model.sides.items():
        mask = cross & (encoder.gender[s_idx] == g)
        if not mask.any():
            continue
        v = encoder.tuple_ids(s_idx[mask], r_idx[mask])
        out[mask] = np.einsum("it,ti->i", W[s_idx[mask]], side.phi[:, v])
    return out
