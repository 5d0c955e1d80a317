"""``datingrec`` command line.

Every command reads a flat dotted-key JSON config (``--config``), applies
``--set key=value`` overrides and the ``--seed``/``--out`` flags, and writes
its outputs into the output directory together with ``manifest-<command>.json``
(config echo plus SHA-256 of each output).  Inputs default to the standard
file names inside the output directory, so a pipeline can share one folder:

    datingrec simulate --seed 1 --out run
    datingrec train --seed 1 --out run
    datingrec recommend --out run
    datingrec evaluate --seed 1 --out run
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .domain import DataError, DiscretizationPlan, PairEncoder, load_messages, load_users
from .infotheory import (CHI2_DF1_P05, SelectionConfig, SelectionError, build_plan, candidate_features,
                         discretize_columns, select_features)
from .lda import Hyperparams, Schedule, TrainedModel, train
from .market import (Capacities, CandidateFilter, build_market, extract_recommendations, save_plan,
                     save_recommendations, solve_max_utility, verify_plan)
from .simulator import SimConfig, contact_distribution, default_plan, simulate, truth_json

log = logging.getLogger("datingrec")

DEFAULTS: dict = {
    "seed": None,
    "paths.users": None,
    "paths.messages": None,
    "paths.plan": None,
    "paths.model": None,
    "paths.truth": None,
    "paths.report": None,
    "sim.users_per_gender": 20000,
    "sim.types_per_gender": 4,
    "sim.recommendations": 100,
    "sim.k_max": 10,
    "sim.favorite_fraction": 0.05,
    "sim.favorite_weight": [300, 500],
    "sim.other_weight": [1, 2],
    "sim.region_size": 2000,
    "sim.reply_rate": 0.17,
    "sim.type_assignment": "uniform",
    "sim.type_concentration": 0.5,
    "sim.dedupe_repeats": False,
    "sim.replies": True,
    "sim.marginals": None,
    "features.signed_income": True,
    "features.tuple_mode": None,
    "discretize.significance_threshold": CHI2_DF1_P05,
    "discretize.max_intervals": 16,
    "select.redundancy_entropy_threshold": 0.05,
    "select.redundancy_mi_threshold": 0.9,
    "lda.T": 10,
    "lda.alpha": 1.0,
    "lda.beta_per_tuple": 0.5,
    "schedule.burn_in": 500,
    "schedule.n_samples": 100,
    "schedule.thin": 5,
    "market.cap_send": 10.0,
    "market.cap_recv": 20.0,
    "market.cap_overrides": {},
    "market.floor": 1e-6,
    "market.top_k": 100,
    "market.mode": "deterministic",
    "eval.folds": 10,
    "eval.policies": list(ev.POLICIES),
    "eval.burn_in": 200,
    "eval.n_samples": 20,
    "eval.thin": 5,
}

STOCHASTIC = {"simulate", "train", "evaluate"}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        cfg.update(loaded)
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg[key.strip()] = _parse_value(val)
    if args.seed is not None:
        cfg["seed"] = args.seed
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if cfg["seed"] is not None and (isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int)):
        raise ConfigError("seed must be an integer")
    if args.command in STOCHASTIC and cfg["seed"] is None:
        raise ConfigError(f"{args.command} is stochastic and needs --seed (or a 'seed' config entry)")
    if args.command == "recommend" and cfg["market.mode"] == "sampled" and cfg["seed"] is None:
        raise ConfigError("sampled recommendations need --seed")
    return cfg


def _path(cfg: dict, out: Path, key: str, default_name: str) -> Path:
    p = cfg[f"paths.{key}"]
    return Path(p) if p else out / default_name


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def sim_config(cfg: dict) -> SimConfig:
    s = _section(cfg, "sim")
    s.pop("replies")
    marg = s.pop("marginals")
    if isinstance(marg, str):
        try:
            marg = json.loads(Path(marg).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read marginals: {exc}") from None
    try:
        return SimConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()},
                         seed=cfg["seed"], marginals=marg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulation config: {exc}") from None


def hyperparams(cfg: dict, V: int) -> Hyperparams:
    try:
        return Hyperparams.symmetric(int(cfg["lda.T"]), V, float(cfg["lda.alpha"]), float(cfg["lda.beta_per_tuple"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid hyperparameters: {exc}") from None


def schedule(cfg: dict, prefix: str = "schedule") -> Schedule:
    vals = {k: int(cfg[f"{prefix}.{k}"]) for k in ("burn_in", "n_samples", "thin")}
    if vals["n_samples"] < 1 or vals["thin"] < 1 or vals["burn_in"] < 0:
        raise ConfigError(f"{prefix}: need n_samples >= 1, thin >= 1, burn_in >= 0")
    return Schedule(**vals, seed=cfg["seed"] or 0)


# --------------------------------------------------------------------------
# output helpers


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _manifest(out: Path, command: str, cfg: dict, files: list[Path]) -> None:
    digests = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in files}
    _dump(out / f"manifest-{command}.json", {"command": command, "config": cfg, "outputs": digests})


def _inputs(cfg: dict, out: Path, messages: bool = True):
    users = load_users(_require(_path(cfg, out, "users", "users.jsonl"), "users file"))
    msgs = load_messages(_require(_path(cfg, out, "messages", "messages.jsonl"), "messages file"), users) \
        if messages else None
    return users, msgs


def _plan(cfg: dict, out: Path) -> DiscretizationPlan:
    return DiscretizationPlan.load(_require(_path(cfg, out, "plan", "plan.json"), "discretization plan"))


def _encoder(cfg: dict, users, plan) -> PairEncoder:
    return PairEncoder(users, plan, bool(cfg["features.signed_income"]), cfg["features.tuple_mode"])


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, out: Path) -> list[Path]:
    scfg = sim_config(cfg)
    res, prefs, enc = simulate(scfg, default_plan(), replies=bool(cfg["sim.replies"]))
    paths = [out / "users.jsonl", out / "messages.jsonl", out / "truth.json", out / "plan.json"]
    res.users.save(paths[0])
    res.log.save(paths[1])
    truth = truth_json(res, prefs, enc.space, scfg)
    truth["contact_p"] = {g: m.tolist() for g, m in contact_distribution(res, prefs, enc).items()}
    truth["run_config"] = cfg
    _dump(paths[2], truth)
    enc.plan.save(paths[3], {"config": cfg})
    n_init = len(res.log.initiations())
    n_rep = sum(e.replied for e in res.log.initiations())
    print(f"simulated {len(res.users)} users, {n_init} initiations, reply rate {n_rep / max(1, n_init):.4f}")
    return paths


def cmd_discretize(cfg: dict, out: Path) -> list[Path]:
    users, msgs = _inputs(cfg, out)
    plan = build_plan(users, msgs, float(cfg["discretize.significance_threshold"]),
                      int(cfg["discretize.max_intervals"]))
    path = out / "plan.json"
    plan.save(path, {"config": cfg})
    for name, spec in sorted(plan.features.items()):
        print(f"{name}: {list(spec)}")
    return [path]


def cmd_select_features(cfg: dict, out: Path) -> list[Path]:
    users, msgs = _inputs(cfg, out)
    if not len(msgs.initiations()):
        raise DataError("no initiation messages: nothing to score")
    cols, labels = candidate_features(users, msgs)
    data = discretize_columns(cols, labels, float(cfg["discretize.significance_threshold"]),
                              int(cfg["discretize.max_intervals"]))
    report = select_features(data, SelectionConfig(float(cfg["select.redundancy_entropy_threshold"]),
                                                   float(cfg["select.redundancy_mi_threshold"])))
    path = out / "features.json"
    _dump(path, {**report.to_json(), "config": cfg})
    print("selected:", ", ".join(report.selected))
    return [path]


def cmd_train(cfg: dict, out: Path) -> list[Path]:
    users, msgs = _inputs(cfg, out)
    plan = _plan(cfg, out)
    enc = _encoder(cfg, users, plan)
    model = train(msgs, enc, hyperparams(cfg, enc.space.size), schedule(cfg))
    path = out / "model.json"
    model.save(path, {"config": cfg})
    for g, side in sorted(model.sides.items()):
        print(f"{g}: {len(side.user_ids)} users, type sizes {side.type_counts.tolist()}")
    return [path]


def _load_model(cfg: dict, out: Path) -> TrainedModel:
    return TrainedModel.load(_require(_path(cfg, out, "model", "model.json"), "model file"))


def cmd_recommend(cfg: dict, out: Path) -> list[Path]:
    users, _ = _inputs(cfg, out, messages=False)
    model = _load_model(cfg, out)
    overrides = cfg["market.cap_overrides"]
    if isinstance(overrides, str):
        overrides = json.loads(Path(overrides).read_text())
    top_k = cfg["market.top_k"]
    caps = Capacities(float(cfg["market.cap_send"]), float(cfg["market.cap_recv"]), dict(overrides))
    if caps.send < 0 or caps.recv < 0:
        raise ConfigError("capacities must be non-negative")
    inst = build_market(model, users, caps, CandidateFilter(float(cfg["market.floor"]),
                                                            None if top_k is None else int(top_k)))
    plan = solve_max_utility(inst)
    report = verify_plan(plan, inst)
    if not report.ok:
        raise RuntimeError("solver produced an infeasible plan: " + "; ".join(report.violations[:5]))
    recs = extract_recommendations(plan, inst, cfg["market.mode"], cfg["seed"] or 0)
    paths = [out / "matching_plan.json", out / "recommendations.jsonl"]
    save_plan(paths[0], plan, inst, {"config": cfg})
    save_recommendations(paths[1], recs)
    print(f"objective {plan.objective!r} over {inst.n_pairs} candidate pairs; "
          f"{sum(map(len, recs.values()))} recommendations")
    return paths


def _recovery(cfg: dict, out: Path, model: TrainedModel) -> dict:
    path = _path(cfg, out, "truth", "truth.json")
    if not path.is_file():
        return {}
    truth = json.loads(path.read_text())
    result = {}
    for g, side in sorted(model.sides.items()):
        target = np.asarray((truth.get("contact_p") or truth["preferences"])[g], dtype=float)
        learned = side.hard_labels()
        labels = {u: int(truth["types"][u]) for u in learned}
        matching = ev.match_types(target, side.phi)
        result[g] = ev.type_recovery_metrics(labels, learned, matching)
    return result


def cmd_evaluate(cfg: dict, out: Path) -> list[Path]:
    users, msgs = _inputs(cfg, out)
    plan = _plan(cfg, out)
    enc = _encoder(cfg, users, plan)
    hp = hyperparams(cfg, enc.space.size)
    policies = list(cfg["eval.policies"])
    if not set(policies) <= set(ev.POLICIES):
        raise ConfigError(f"unknown policies {sorted(set(policies) - set(ev.POLICIES))}")
    k = int(cfg["eval.folds"])
    if k < 1:
        raise ConfigError("eval.folds must be >= 1")
    report = ev.cross_validate(enc, msgs, hp, schedule(cfg, "eval"), k, policies, cfg["seed"], cfg)
    model_path = _path(cfg, out, "model", "model.json")
    if model_path.is_file():
        report.recovery = _recovery(cfg, out, TrainedModel.load(model_path))
    paths = [out / "report.json", out / "report.csv"]
    report.save(paths[0])
    paths[1].write_text(ev.report_csv(report.to_json()))
    for o in report.outcomes:
        rates = ", ".join(f"{p} {r.rate:.4f}" for p, r in o.results.items())
        print(f"fold {o.fold} ({o.n_users} users): {rates}")
    if report.outcomes and "two_sided" in policies and "suitor" in policies:
        gains = [o.gain() for o in report.outcomes if o.gain() is not None]
        print(f"two_sided beats suitor in {report.wins()} of {len(report.outcomes)} folds; "
              f"median gain {np.median(gains):.2f}%")
    for g, scores in report.recovery.items():
        for s in scores:
            print(f"{g} type {s.true_type}: precision {s.precision:.4f} recall {s.recall:.4f} K-L {s.kl:.4f}")
    return paths


def cmd_report(cfg: dict, out: Path) -> list[Path]:
    src = _require(_path(cfg, out, "report", "report.json"), "report file")
    try:
        obj = json.loads(src.read_text())
        text = ev.report_csv(obj)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{src}: not a report file ({exc})") from None
    path = out / "report.csv"
    path.write_text(text)
    return [path]


COMMANDS = {
    "simulate": cmd_simulate,
    "discretize": cmd_discretize,
    "select-features": cmd_select_features,
    "train": cmd_train,
    "recommend": cmd_recommend,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted config keys")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="datingrec", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.removeprefix("cmd_").replace("_", " "))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](cfg, out)
        _manifest(out, args.command, cfg, files)
    except (ConfigError, DataError, SelectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
