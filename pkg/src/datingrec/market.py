"""Capacity-constrained max expected utility recommendations.

Every ordered cross-gender pair (s, r) carries a utility
``u_sr = f(s, r) * g(r, s)``: the chance that s writes to r times the chance
that r writes back.  The plan picks recommendation probabilities ``x_sr`` in
[0, 1] maximizing ``sum u_sr x_sr`` subject to

    sum_r u_sr x_sr <= C_S(s)   for every suitor s
    sum_s u_sr x_sr <= C_R(r)   for every receiver r

Substituting ``y_sr = u_sr x_sr`` gives a bipartite max-flow problem
(source -> s with capacity C_S, s -> r with capacity u_sr, r -> sink with
capacity C_R), which :func:`solve_max_utility` solves with Dinic's algorithm.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from numba import njit

from .domain import DataError, PairEncoder, UserSet
from .lda import TrainedModel
from .rng import substream

EPS = 1e-12
TOL = 1e-9
ORACLE_MAX_PAIRS = 12


@dataclass(frozen=True)
class Capacities:
    send: float = 10.0
    recv: float = 20.0
    overrides: dict = field(default_factory=dict)

    def for_user(self, user_id: str) -> tuple[float, float]:
        o = self.overrides.get(user_id, {})
        return float(o.get("send", self.send)), float(o.get("recv", self.recv))


@dataclass(frozen=True)
class CandidateFilter:
    """Which pairs enter the instance.  ``floor=0, top_k=None`` keeps every cross pair."""

    floor: float = 1e-6
    top_k: int | None = None


@dataclass
class MarketInstance:
    user_ids: list[str]
    s: np.ndarray
    r: np.ndarray
    u: np.ndarray
    cap_send: np.ndarray
    cap_recv: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=float)
        self.cap_send = np.asarray(self.cap_send, dtype=float)
        self.cap_recv = np.asarray(self.cap_recv, dtype=float)
        n = len(self.user_ids)
        if not (len(self.s) == len(self.r) == len(self.u)):
            raise ValueError("pair arrays differ in length")
        if self.cap_send.shape != (n,) or self.cap_recv.shape != (n,):
            raise ValueError("capacity arrays must have one entry per user")
        if (self.cap_send < 0).any() or (self.cap_recv < 0).any():
            raise ValueError("capacities must be non-negative")
        if len(self.u) and ((self.u < 0).any() or (self.u > 1).any()):
            raise ValueError("utilities must lie in [0, 1]")
        if len(self.s) and (self.s == self.r).any():
            raise ValueError("a user cannot be paired with itself")

    @property
    def n_pairs(self) -> int:
        return len(self.u)


@dataclass
class MatchingPlan:
    x: np.ndarray
    objective: float
    send_load: np.ndarray
    recv_load: np.ndarray

    def to_json(self, instance: MarketInstance) -> dict:
        ids = instance.user_ids
        keep = np.flatnonzero(self.x > 0)
        return {
            "objective": self.objective,
            "pairs": [{"s": ids[instance.s[i]], "r": ids[instance.r[i]],
                       "u": float(instance.u[i]), "x": float(self.x[i])} for i in keep],
            "loads": {u: {"send": float(a), "recv": float(b)}
                      for u, a, b in zip(ids, self.send_load, self.recv_load)},
        }


def plan_loads(instance: MarketInstance, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = instance.u * x
    n = len(instance.user_ids)
    return (np.bincount(instance.s, weights=y, minlength=n),
            np.bincount(instance.r, weights=y, minlength=n))


# --------------------------------------------------------------------------
# building instances


def _utility_table(model: TrainedModel, encoder: PairEncoder) -> np.ndarray:
    """``A[i, v]`` = probability that user i contacts a counterpart with tuple v."""
    W = model.weights_for(encoder)
    A = np.zeros((len(encoder), model.hp.V))
    for g, side in model.sides.items():
        mask = encoder.gender == g
        A[mask] = W[mask] @ side.phi
    return A


def build_market(model: TrainedModel, users: UserSet, caps: Capacities | None = None,
                 candidate_filter: CandidateFilter | None = None,
                 encoder: PairEncoder | None = None, chunk_pairs: int = 2_000_000) -> MarketInstance:
    """Utilities for all ordered cross-gender pairs of ``users`` that pass the filter."""
    caps = caps or Capacities()
    flt = candidate_filter or CandidateFilter()
    if encoder is None:
        try:
            encoder = PairEncoder(users, model.plan, model.signed_income, model.tuple_mode)
        except DataError as exc:
            raise DataError(f"users do not fit the model's feature space: {exc}") from None
    if encoder.space.hash != model.feature_space_hash or encoder.space.size != model.hp.V:
        raise DataError("model and encoder use different feature spaces")
    A = _utility_table(model, encoder)
    S, R, U = [], [], []
    for g in ("M", "F"):
        suitors = np.flatnonzero(encoder.gender == g)
        receivers = np.flatnonzero(encoder.gender != g)
        if not len(suitors) or not len(receivers):
            continue
        step = max(1, chunk_pairs // len(receivers))
        for lo in range(0, len(suitors), step):
            ss = suitors[lo:lo + step]
            si = np.repeat(ss, len(receivers))
            ri = np.tile(receivers, len(ss))
            f = A[si, encoder.tuple_ids(si, ri)]
            back = A[ri, encoder.tuple_ids(ri, si)]
            u = np.clip(f * back, 0.0, 1.0)
            keep = u >= flt.floor if flt.floor > 0 else np.ones(len(u), dtype=bool)
            if flt.top_k is not None:
                block = np.where(keep, u, -1.0).reshape(len(ss), len(receivers))
                k = min(flt.top_k, len(receivers))
                # stable: ties resolved by receiver order
                order = np.argsort(-block, axis=1, kind="stable")[:, :k]
                top = np.zeros_like(block, dtype=bool)
                np.put_along_axis(top, order, True, axis=1)
                keep &= top.ravel()
            S.append(si[keep])
            R.append(ri[keep])
            U.append(u[keep])
    cs, cr = zip(*(caps.for_user(u) for u in encoder.user_ids)) if len(encoder) else ((), ())
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt))
    return MarketInstance(list(encoder.user_ids), cat(S, np.int64), cat(R, np.int64), cat(U, float),
                          np.array(cs, dtype=float), np.array(cr, dtype=float))


# --------------------------------------------------------------------------
# exact solver: Dinic max-flow


@njit(cache=True)
def _bfs(n_nodes, head, nxt, to, cap, src, snk, level, queue, eps):
    level[:] = -1
    level[src] = 0
    qh, qt = 0, 1
    queue[0] = src
    while qh < qt:
        v = queue[qh]
        qh += 1
        e = head[v]
        while e != -1:
            w = to[e]
            if cap[e] > eps and level[w] < 0:
                level[w] = level[v] + 1
                queue[qt] = w
                qt += 1
            e = nxt[e]
    return level[snk] >= 0


@njit(cache=True)
def _dinic(n_nodes, head, nxt, to, cap, src, snk, eps):
    level = np.empty(n_nodes, dtype=np.int64)
    queue = np.empty(n_nodes, dtype=np.int64)
    it = np.empty(n_nodes, dtype=np.int64)
    stack_v = np.empty(n_nodes, dtype=np.int64)
    stack_e = np.empty(n_nodes, dtype=np.int64)
    total = 0.0
    while _bfs(n_nodes, head, nxt, to, cap, src, snk, level, queue, eps):
        it[:] = head
        depth = 0
        stack_v[0] = src
        while True:
            v = stack_v[depth]
            if v == snk:
                f = np.inf
                for i in range(depth):
                    if cap[stack_e[i]] < f:
                        f = cap[stack_e[i]]
                for i in range(depth):
                    cap[stack_e[i]] -= f
                    cap[stack_e[i] ^ 1] += f
                total += f
                depth = 0
                continue
            e = it[v]
            while e != -1 and not (cap[e] > eps and level[to[e]] == level[v] + 1):
                e = nxt[e]
            it[v] = e
            if e == -1:
                if depth == 0:
                    break
                level[v] = -1
                depth -= 1
                it[stack_v[depth]] = nxt[it[stack_v[depth]]]
                continue
            stack_e[depth] = e
            depth += 1
            stack_v[depth] = to[e]
    return total


@njit(cache=True)
def _link(frm, n_nodes):
    head = np.full(n_nodes, -1, dtype=np.int64)
    nxt = np.empty(frm.shape[0], dtype=np.int64)
    for e in range(frm.shape[0]):
        nxt[e] = head[frm[e]]
        head[frm[e]] = e
    return head, nxt


def solve_max_utility(instance: MarketInstance) -> MatchingPlan:
    """Exact optimum via the y = u x max-flow reduction."""
    n, P = len(instance.user_ids), instance.n_pairs
    if P == 0:
        z = np.zeros(n)
        return MatchingPlan(np.zeros(0), 0.0, z, z.copy())
    # nodes: 0 source, 1 sink, 2..n+1 senders, n+2..2n+1 receivers
    src, snk = 0, 1
    tails = np.concatenate([np.zeros(n, dtype=np.int64), 2 + instance.s, n + 2 + np.arange(n)])
    heads = np.concatenate([2 + np.arange(n), n + 2 + instance.r, np.ones(n, dtype=np.int64)])
    caps = np.concatenate([instance.cap_send, instance.u, instance.cap_recv])
    m = len(tails)
    to = np.empty(2 * m, dtype=np.int64)
    cap = np.zeros(2 * m)
    to[0::2], to[1::2] = heads, tails
    cap[0::2] = caps
    frm = np.empty(2 * m, dtype=np.int64)
    frm[0::2], frm[1::2] = tails, heads
    n_nodes = 2 * n + 2
    head, nxt = _link(frm, n_nodes)
    _dinic(n_nodes, head, nxt, to, cap, src, snk, EPS)
    pair_edges = 2 * (n + np.arange(P))
    y = caps[n:n + P] - cap[pair_edges]
    x = np.zeros(P)
    pos = instance.u > 0
    x[pos] = np.clip(y[pos] / instance.u[pos], 0.0, 1.0)
    send, recv = plan_loads(instance, x)
    return MatchingPlan(x, float(np.dot(instance.u, x)), send, recv)


# --------------------------------------------------------------------------
# verification


@dataclass
class PlanReport:
    send_slack: np.ndarray
    recv_slack: np.ndarray
    bound_violation: float
    objective_error: float
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_plan(plan: MatchingPlan, instance: MarketInstance, tol: float = TOL) -> PlanReport:
    """Slack of every constraint; anything more than ``tol`` out of bounds is listed."""
    ids = instance.user_ids
    x = np.asarray(plan.x, dtype=float)
    problems = []
    if x.shape != instance.u.shape:
        return PlanReport(np.zeros(0), np.zeros(0), np.inf, np.inf, ["plan and instance differ in pair count"])
    send, recv = plan_loads(instance, x)
    send_slack = instance.cap_send - send
    recv_slack = instance.cap_recv - recv
    for i in np.flatnonzero(send_slack < -tol):
        problems.append(f"send capacity of {ids[i]} exceeded by {-send_slack[i]:.3g}")
    for i in np.flatnonzero(recv_slack < -tol):
        problems.append(f"receive capacity of {ids[i]} exceeded by {-recv_slack[i]:.3g}")
    bound = float(max(0.0, (-x).max(initial=0.0), (x - 1).max(initial=0.0)))
    if bound > tol:
        problems.append(f"x outside [0, 1] by {bound:.3g}")
    obj_err = abs(float(np.dot(instance.u, x)) - plan.objective)
    if obj_err > 1e-12 * max(1.0, abs(plan.objective)):
        problems.append(f"stored objective off by {obj_err:.3g}")
    return PlanReport(send_slack, recv_slack, bound, obj_err, problems)


# --------------------------------------------------------------------------
# independent LP oracle


def lp_oracle(instance: MarketInstance) -> Fraction:
    """Exact optimum by rational simplex on the original bounded-variable LP.

    Shares no code with the flow solver.  Dense and slow, so limited to
    ``ORACLE_MAX_PAIRS`` variables.
    """
    P = instance.n_pairs
    if P > ORACLE_MAX_PAIRS:
        raise ValueError(f"oracle handles at most {ORACLE_MAX_PAIRS} pairs, got {P}")
    if P == 0:
        return Fraction(0)
    u = [Fraction(float(v)) for v in instance.u]
    rows, rhs = [], []
    n = len(instance.user_ids)
    for i in range(n):
        for idx, cap in ((instance.s, instance.cap_send[i]), (instance.r, instance.cap_recv[i])):
            cols = np.flatnonzero(idx == i)
            if len(cols):
                rows.append({int(c): u[c] for c in cols})
                rhs.append(Fraction(float(cap)))
    for p in range(P):
        rows.append({p: Fraction(1)})
        rhs.append(Fraction(1))
    return _simplex_max(u, rows, rhs)


def _simplex_max(c: list[Fraction], rows: list[dict], rhs: list[Fraction]) -> Fraction:
    """max c.x s.t. rows x <= rhs, x >= 0, with rhs >= 0 (slack basis is feasible).  Bland's rule."""
    m, nv = len(rows), len(c)
    width = nv + m
    tab = []
    for i, (row, b) in enumerate(zip(rows, rhs)):
        line = [Fraction(0)] * (width + 1)
        for j, a in row.items():
            line[j] = a
        line[nv + i] = Fraction(1)
        line[width] = b
        tab.append(line)
    basis = [nv + i for i in range(m)]
    obj = [-cj for cj in c] + [Fraction(0)] * m + [Fraction(0)]
    while True:
        enter = next((j for j in range(width) if obj[j] < 0), None)
        if enter is None:
            return obj[width]
        best, leave = None, None
        for i in range(m):
            a = tab[i][enter]
            if a > 0:
                ratio = tab[i][width] / a
                if best is None or ratio < best or (ratio == best and basis[i] < basis[leave]):
                    best, leave = ratio, i
        if leave is None:
            raise ArithmeticError("unbounded LP")
        piv = tab[leave][enter]
        tab[leave] = [v / piv for v in tab[leave]]
        for i in range(m):
            if i != leave and tab[i][enter] != 0:
                f = tab[i][enter]
                tab[i] = [a - f * b for a, b in zip(tab[i], tab[leave])]
        f = obj[enter]
        obj = [a - f * b for a, b in zip(obj, tab[leave])]
        basis[leave] = enter


# --------------------------------------------------------------------------
# recommendations


def extract_recommendations(plan: MatchingPlan, instance: MarketInstance, mode: str = "deterministic",
                            seed: int = 0) -> dict[str, list[tuple[str, float]]]:
    """Per-user ranked ``(partner_id, u*x)`` lists.

    ``deterministic`` keeps pairs with x >= 0.5; ``sampled`` keeps each pair
    independently with probability x, drawing from a per-suitor stream.
    """
    if mode not in ("deterministic", "sampled"):
        raise ValueError(f"unknown mode {mode!r}")
    ids = instance.user_ids
    score = instance.u * plan.x
    out: dict[str, list[tuple[str, float]]] = {u: [] for u in ids}
    order = np.lexsort((instance.r, instance.s))
    bounds = np.searchsorted(instance.s[order], np.arange(len(ids) + 1))
    for i, uid in enumerate(ids):
        pairs = order[bounds[i]:bounds[i + 1]]
        if not len(pairs):
            continue
        if mode == "deterministic":
            pairs = pairs[plan.x[pairs] >= 0.5]
        else:
            draws = substream(seed, "recommend", uid).random(len(pairs))
            pairs = pairs[draws < plan.x[pairs]]
        ranked = pairs[np.argsort(-score[pairs], kind="stable")]
        out[uid] = [(ids[instance.r[p]], float(score[p])) for p in ranked]
    return out


def save_plan(path, plan: MatchingPlan, instance: MarketInstance, extra: dict | None = None) -> None:
    obj = plan.to_json(instance)
    if extra:
        obj.update(extra)
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")


def save_recommendations(path, recs: dict[str, list[tuple[str, float]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid, lst in recs.items():
            rec = {"user_id": uid, "recs": [{"partner_id": p, "score": s} for p, s in lst]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
