"""Command-line entry point.

Every subcommand reads an experiment config (``--config`` JSON plus
``--set key=value`` overrides) and writes deterministic artifacts.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .domain import AdRequest, TrainConfig, dumps
from .executor import LogTable, Trajectories, augment_dataset, build_low_dataset, mape_gamma_sweep
from .market import (CtrBiddingPolicy, JsonlDaySink, SimConfig, build_channels, generate_advertisers,
                     read_advertisers, read_log_dir, replay, write_advertisers)
from .pipeline import (ExperimentConfig, FlatPolicy, HiBidPolicy, PidPolicy, TrainedBundle, evaluate,
                       oracle_compare, planner_allocations, random_oracle_instance, train_flat, train_low_model)
from .planner import HighModel, build_high_dataset, train_high

ADVERTISERS_FILE = "advertisers.json"
CONFIG_FILE = "config.json"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _section(d: dict[str, Any]) -> dict[str, Any]:
    """Accept a full experiment config, or a bare sim or train section."""
    exp_keys = {f.name for f in fields(ExperimentConfig)}
    if set(d) <= exp_keys:
        return d
    if set(d) <= {f.name for f in fields(SimConfig)}:
        return {"sim": d}
    if set(d) <= {f.name for f in fields(TrainConfig)}:
        return {"train": d}
    raise CliError(f"unrecognised config keys: {sorted(set(d) - exp_keys)}")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: Sequence[str]) -> ExperimentConfig:
    d: dict[str, Any] = {}
    if path:
        try:
            d = _section(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
    d = json.loads(json.dumps(d))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        parts = key.split(".")
        if len(parts) == 1:
            parts = ["sim" if parts[0] in {f.name for f in fields(SimConfig)} else "train", parts[0]] \
                if parts[0] not in {f.name for f in fields(ExperimentConfig)} else parts
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    try:
        return ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _advertisers(logs_dir: Path, explicit: str | None):
    path = Path(explicit) if explicit else logs_dir / ADVERTISERS_FILE
    if not path.exists():
        raise CliError(f"advertiser file not found: {path}")
    return read_advertisers(path)


def _logs(logs_dir: Path, days=None):
    if not logs_dir.is_dir():
        raise CliError(f"log directory not found: {logs_dir}")
    if (logs_dir / "PARTIAL").exists():
        raise CliError(f"log directory {logs_dir} is marked PARTIAL")
    return read_log_dir(logs_dir, days)


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    advs = generate_advertisers(cfg.sim)
    sink = JsonlDaySink(out)
    replay(cfg.sim, CtrBiddingPolicy(cfg.sim), sink, advertisers=advs)
    write_advertisers(out / ADVERTISERS_FILE, advs)
    _write_json(out / CONFIG_FILE, cfg.to_dict())
    print(f"wrote {sink.written} records for {cfg.sim.days} days to {out}")
    return 0


def cmd_train_high(args, cfg: ExperimentConfig) -> int:
    logs_dir, out = Path(args.logs), Path(args.out)
    advs = _advertisers(logs_dir, args.advertisers)
    logs = _logs(logs_dir, cfg.train_days)
    ds = build_high_dataset(logs, advs, cfg.sim.n_channels, cfg.sim.n_categories, cfg.train, list(cfg.train_days))
    model = train_high(ds, cfg.train)
    model.save(out / "high", out / "cvae_h")
    _write_json(out / CONFIG_FILE, cfg.to_dict())
    print(f"trained high level on {len(ds)} transitions; checkpoint in {out}")
    return 0


def cmd_train_low(args, cfg: ExperimentConfig) -> int:
    logs_dir, out = Path(args.logs), Path(args.out)
    high_root = Path(args.high) if args.high else out
    advs = _advertisers(logs_dir, args.advertisers)
    high = HighModel.load(high_root / "high", high_root / "cvae_h")
    logs = _logs(logs_dir, cfg.train_days)
    tc = cfg.train
    alloc = planner_allocations(high, advs, cfg.sim.n_categories, cfg.train_days)
    ds = build_low_dataset(LogTable.from_records(logs, advs), advs, build_channels(cfg.sim), alloc, tc)
    aug = augment_dataset(ds, tc.n_repeat, tc.lambda_max, np.random.default_rng([tc.seed, 0x41, 0x47]))
    low = train_low_model(aug, tc)
    low.save(out)
    if high_root != out:
        high.save(out / "high", out / "cvae_h")
    _write_json(out / CONFIG_FILE, cfg.to_dict())
    print(f"trained low level on {len(ds)} transitions ({len(aug)} augmented); checkpoint in {out}")
    return 0


def _trace_writer(path: Path):
    fh = open(path, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["day", "request_id", "advertiser_id", "bid_ratio", "lambda", "cpc_pred"])
    return fh, w


class _TracedPolicy:
    """Forwards to a HiBid policy and writes one trace row per bid."""

    def __init__(self, inner: HiBidPolicy, writer):
        self.inner, self.writer = inner, writer

    def start_day(self, day, advertisers=None):
        self.inner.start_day(day, advertisers)

    def bid(self, request, candidates):
        out = self.inner.bid(request, candidates)
        for a in candidates:
            ratio, lam, pred = self.inner.last[a.id]
            self.writer.writerow([self.inner.day, request.id, a.id, repr(ratio), repr(lam), repr(pred)])
        return out

    def observe(self, request, records):
        self.inner.observe(request, records)


def cmd_replay(args, cfg: ExperimentConfig) -> int:
    logs_dir, out = Path(args.logs), Path(args.out)
    advs = _advertisers(logs_dir, args.advertisers)
    sim, tc = cfg.sim, cfg.train
    days = list(cfg.eval_days)
    policy_name = args.policy or "hibid"
    trace_fh = None
    allocations = None
    if policy_name == "hibid":
        if not args.ckpt:
            raise CliError("--ckpt is required for the hibid policy")
        bundle = TrainedBundle.load(args.ckpt)
        inner = HiBidPolicy(sim, tc, bundle, advs, use_lambda_selection=not args.no_lambda_selection,
                            use_cpc_as=not args.no_cpc_as)
        # the bid trace is a sibling of the log directory so the logs stay pure JSONL
        trace_fh, writer = _trace_writer(out.parent / f"{out.name}_trace.csv") if args.trace else (None, None)
        policy = _TracedPolicy(inner, writer) if writer else inner
        allocations = inner.allocations
    elif policy_name == "base":
        policy = CtrBiddingPolicy(sim)
    elif policy_name == "pid":
        policy = PidPolicy(advs, tc)
    elif policy_name == "flat":
        logs = _logs(logs_dir, cfg.train_days)
        full = {(d, a.id): (1.0,) * sim.n_channels for d in cfg.train_days for a in advs}
        ds = build_low_dataset(logs, advs, build_channels(sim), full, tc)
        policy = FlatPolicy(sim, train_flat(ds, tc), advs)
    else:
        raise CliError(f"unknown policy {policy_name!r}")
    try:
        sink = JsonlDaySink(out)
        replay(sim, policy, sink, days=days, advertisers=advs)
    finally:
        if trace_fh is not None:
            trace_fh.close()
    if allocations is not None:
        _write_json(out.parent / f"{out.name}_allocations.json",
                    [{"day": d, "advertiser_id": m, "allocation": list(v)} for (d, m), v in sorted(allocations.items())])
    print(f"replayed days {days} with {policy_name}: {sink.written} records in {out}")
    return 0


def _read_allocations(path: str | None):
    if not path:
        return None
    rows = json.loads(Path(path).read_text())
    return {(int(r["day"]), int(r["advertiser_id"])): tuple(r["allocation"]) for r in rows}


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    logs_dir, ref_dir = Path(args.logs), Path(args.reference)
    advs = _advertisers(ref_dir, args.advertisers)
    logs, ref = _logs(logs_dir), _logs(ref_dir)
    ev = evaluate(logs, ref, advs, _read_allocations(args.allocations), cfg.train.eps_fraction)
    text = json.dumps(ev.to_dict(), sort_keys=True, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_mape_sweep(args, cfg: ExperimentConfig) -> int:
    logs_dir = Path(args.logs)
    advs = _advertisers(logs_dir, args.advertisers)
    gammas = [float(g) for g in args.gammas.split(",")]
    trajs = Trajectories.from_logs(_logs(logs_dir), cfg.sim.n_channels, advs)
    res = mape_gamma_sweep(trajs, gammas)
    rows = [["gamma", "mape", "n_used", "n_excluded"]]
    rows += [[repr(g), repr(res.mape[g]), res.n_used, res.n_excluded] for g in gammas]
    _emit_csv(args.out, rows)
    return 0


def cmd_oracle_compare(args, cfg: ExperimentConfig) -> int:
    rng = np.random.default_rng(args.seed)
    rows = [["instance", "n_advertisers", "planner_clicks", "optimal_clicks", "gap"]]
    within = 0
    for k in range(args.instances):
        inst = random_oracle_instance(rng, 2 + k % 4)
        cmp_ = oracle_compare(inst, cfg.train, args.days)
        within += cmp_.gap <= args.tolerance
        rows.append([k, inst.n_advertisers, repr(cmp_.planner_clicks), repr(cmp_.optimal_clicks), repr(cmp_.gap)])
    _emit_csv(args.out, rows)
    print(f"{within}/{args.instances} instances within {args.tolerance:.0%} of the optimum", file=sys.stderr)
    return 0


def _emit_csv(path: str | None, rows: list[list[Any]]) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
    csv.writer(sys.stdout, lineterminator="\n").writerows(rows)


def _serve_request(pol: HiBidPolicy, msg: dict[str, Any], seq: int) -> dict[str, Any]:
    m, p, t = int(msg["advertiser_id"]), int(msg["channel_id"]), float(msg["timestamp"])
    if not 0 <= m < len(pol.adv):
        raise ValueError(f"unknown advertiser {m}")
    if not 0 <= p < pol.P:
        raise ValueError(f"unknown channel {p}")
    day = int(msg.get("day", pol.day))
    if day != pol.day:
        pol.start_day(day)
    req = AdRequest(seq, p, t, tuple(float(x) for x in msg["features"]))
    ratio = float(pol.bid(req, [pol.adv[m]])[0])
    _, lam, pred = pol.last[m]
    return {"advertiser_id": m, "bid_price": ratio * pol.adv[m].cpc_target, "lambda": lam, "cpc_pred": pred}


def _serve_outcome(pol: HiBidPolicy, msg: dict[str, Any]) -> None:
    m, p = int(msg["advertiser_id"]), int(msg["channel_id"])
    charged = float(msg.get("charged", 0.0))
    if charged < 0:
        raise ValueError("charged must be >= 0")
    if charged:
        pol.cost[m] += charged
        pol.clicks[m] += 1
        pol.ch_spend[m, p] += charged


def cmd_serve(args, cfg: ExperimentConfig) -> int:
    """One JSON request per input line, one JSON response per output line.

    Lines carrying ``"outcome": true`` report an auction result instead and
    update the advertiser's running totals without producing output.
    """
    advs = read_advertisers(args.advertisers)
    pol = HiBidPolicy(cfg.sim, cfg.train, TrainedBundle.load(args.ckpt), advs)
    src = open(args.input) if args.input else sys.stdin
    failures = 0
    try:
        for n, line in enumerate(src, 1):
            if not line.strip():
                continue
            try:
                msg = json.loads(line)
                if msg.get("outcome"):
                    _serve_outcome(pol, msg)
                    continue
                out = _serve_request(pol, msg, n)
            except (KeyError, TypeError, ValueError) as exc:
                failures += 1
                out = {"error": f"line {n}: {type(exc).__name__}: {exc}"}
            sys.stdout.write(dumps(out) + "\n")
            sys.stdout.flush()
    finally:
        if src is not sys.stdin:
            src.close()
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hibid", description="Hierarchical offline RL ad bidding.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="experiment, sim or train config JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. sim.n_advertisers=50 or train.high_iters=10")
        p.set_defaults(func=func)
        return p

    def logs_args(p, out_required=True):
        p.add_argument("--logs", required=True, help="log directory")
        p.add_argument("--advertisers", help="advertiser JSON (default: <logs>/advertisers.json)")
        p.add_argument("--out", required=out_required)

    p = add("gen-data", cmd_gen_data, "simulate base-policy logs")
    p.add_argument("--out", required=True)

    p = add("train-high", cmd_train_high, "train the budget planner")
    logs_args(p)

    p = add("train-low", cmd_train_low, "train the bid executor")
    logs_args(p)
    p.add_argument("--high", help="checkpoint root holding high/ and cvae_h/ (default: --out)")

    p = add("replay", cmd_replay, "run a policy over the eval days")
    logs_args(p)
    p.add_argument("--ckpt", help="checkpoint root")
    p.add_argument("--policy", choices=("hibid", "base", "pid", "flat"))
    p.add_argument("--no-lambda-selection", action="store_true")
    p.add_argument("--no-cpc-as", action="store_true")
    p.add_argument("--trace", action="store_true", help="write a per-bid lambda/CPC trace CSV")

    p = add("evaluate", cmd_evaluate, "metrics of logs against reference logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--advertisers")
    p.add_argument("--allocations", help="allocation JSON written by replay")
    p.add_argument("--out")

    p = add("mape-sweep", cmd_mape_sweep, "CPC prediction error against the discount factor")
    logs_args(p, out_required=False)
    p.add_argument("--gammas", default="0.5,0.9,0.99,0.999,1.0")

    p = add("oracle-compare", cmd_oracle_compare, "planner against exhaustive allocation")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=123)
    p.add_argument("--days", type=int, default=300)
    p.add_argument("--tolerance", type=float, default=0.15)
    p.add_argument("--out")

    p = add("serve", cmd_serve, "answer JSON bid requests line by line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--advertisers", required=True)
    p.add_argument("--input", help="request file (default: stdin)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "replay" and args.policy is None:
            args.policy = "hibid" if args.ckpt else cfg.baseline
        return args.func(args, cfg)
    except CliError as exc:
        print(f"hibid {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure must surface as a nonzero exit
        print(f"hibid {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
