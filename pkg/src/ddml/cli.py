"""``ddml`` command line.

Exit status: 0 on success, 1 on a domain error or a failed verification,
2 on a usage error.  Flags override values from a config file.  Stochastic
commands take ``--seed`` (default 0).
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import math
import signal
import sys
from pathlib import Path

import numpy as np

from . import privacy
from .client import PrivacyParams
from .errors import DDMLError
from .pool import InstancePool, SpamPolicy, Strategy

log = logging.getLogger("ddml")


def _eps(text: str) -> float:
    """Parse epsilon; accepts ``inf``/``none`` and ``log(16)``-style values."""
    t = text.strip().lower()
    if t in ("inf", "none", "off"):
        return math.inf
    if t.startswith("log(") and t.endswith(")"):
        return math.log(float(t[4:-1]))
    return float(t)


def _load_config(path, args):
    from .sim import SimConfig

    doc = json.loads(Path(path).read_text()) if path else {}
    sweep = doc.pop("sweep", {})
    cfg = SimConfig.from_dict(doc)
    changes = {}
    for name in ("k", "passes", "examples_per_client", "eval_every", "max_updates"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "strategy", None):
        changes["strategy"] = Strategy.parse(args.strategy)
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "gamma", None) is not None:
        changes["privacy"] = PrivacyParams(**{**cfg.privacy.__dict__, "gamma": args.gamma})
        cfg = cfg.replace(**changes)
        changes = {}
    if getattr(args, "epsilon", None) is not None:
        changes["epsilon"] = None if math.isinf(args.epsilon) else args.epsilon
    if getattr(args, "spam_t", None) is not None:
        changes["spam"] = SpamPolicy(args.spam_t, True)
    return cfg.replace(**changes), sweep


def _write(text: str, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# --- commands --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .sim import rows_to_csv, run_sim

    cfg, _ = _load_config(args.config, args)
    _write(rows_to_csv(run_sim(cfg)), args.out)
    return 0


def cmd_grid(args) -> int:
    from .sim import experiment_grid

    cfg, sweep = _load_config(args.config, args)
    results = experiment_grid(cfg, sweep, args.out)
    for name, rows in results.items():
        last = rows[-1]
        print(f"{name}: loss {last.train_loss:.4f} accuracy {last.test_accuracy:.4f}")
    return 0


def cmd_analyze(args) -> int:
    reports = privacy.analyze(args.k, args.epsilon, args.gamma, args.T, args.delta)
    rng = np.random.default_rng(args.seed)
    doc = {
        "reports": [r.to_dict() for r in reports],
        "summary": privacy.summary_table(args.k, args.epsilon, args.T),
    }
    exact, approx = privacy.eps_after_T(args.epsilon, args.gamma, args.T, args.delta)
    doc["eps_T"] = {"exact": exact, "approx": approx}
    if args.trials:
        est, se = privacy.empirical_preimage_amplification(args.k, args.gamma, args.epsilon, args.t, args.trials, rng)
        doc["preimage"] = {"t": args.t, "probability": est, "stderr": se, "trials": args.trials,
                           "protocol": privacy.PREIMAGE_PROTOCOL}
    if args.csv_dir:
        _analyze_sweeps(args, Path(args.csv_dir), rng)
    print(json.dumps(doc, indent=2))
    return 0


def _analyze_sweeps(args, out: Path, rng):
    out.mkdir(parents=True, exist_ok=True)
    trials = args.trials or 20_000
    with open(out / "k_amplification.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "probability", "stderr"])
        for k in (2, 5, 10, 20, 40, 60):
            w.writerow([k, *privacy.empirical_preimage_amplification(k, args.gamma, args.epsilon, args.t, trials, rng)])
    with open(out / "T_eps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "exact", "approx"])
        for T in (10, 100, 1_000, 10_000, 100_000, 1_000_000):
            w.writerow([T, *privacy.eps_after_T(args.epsilon, args.gamma, T, args.delta)])
    with open(out / "t_preimage.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "probability", "stderr"])
        for i in range(1, 10):
            t = i / 10
            w.writerow([t, *privacy.empirical_preimage_amplification(args.k, args.gamma, args.epsilon, t, trials, rng)])


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suite

    if args.suite != "all" and args.suite not in SUITES:
        print(f"unknown suite {args.suite!r}; choose from all, {', '.join(SUITES)}", file=sys.stderr)
        return 2
    checks = run_suite(args.suite, seed=args.seed, workers=args.workers)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 1


def cmd_serve(args) -> int:
    from .net import parse_address, server_from_config

    cfg, _ = _load_config(args.config, args)
    server = server_from_config(cfg, record=bool(args.trace), snapshot_path=args.snapshot, trace_path=args.trace)
    host, port = parse_address(args.bind)
    if args.http:
        import uvicorn

        from .service import create_app

        # the socket protocol and the HTTP API share one pool
        async def main():
            await server.start(host, port)
            config = uvicorn.Config(create_app(server), host=host, port=args.http, log_level="warning")
            try:
                await uvicorn.Server(config).serve()
            finally:
                await server.stop()

        asyncio.run(main())
        return 0

    async def main():
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await server.start(host, port)
        print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
        try:
            await stop.wait()
        finally:
            await server.stop()

    asyncio.run(main())
    return 0


def load_examples(path) -> tuple[np.ndarray, np.ndarray]:
    """Local examples from ``.npz`` (arrays X, y) or CSV (response in the last column)."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return np.asarray(z["X"], dtype=float), np.asarray(z["y"])
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1]


def cmd_agent(args) -> int:
    from .net import client_agent

    X, y = load_examples(args.data)
    params = PrivacyParams(args.epsilon, args.gamma, level=args.level)
    summary = client_agent(args.server, X, y, params, args.rounds, np.random.default_rng(args.seed))
    print(json.dumps(summary.to_dict()))
    return 0 if not summary.errors else 1


def cmd_spam_test(args) -> int:
    snap = json.loads(Path(args.snapshot).read_text())
    snap["spam"] = {"t": args.t, "enabled": True}
    pool = InstancePool.from_snapshot(snap)
    weights = json.loads(Path(args.weights).read_text())
    ok, bad = pool.spam_check(weights)
    print(json.dumps({"accept": ok, "offending": list(bad), "t": args.t}))
    return 0


# --- parser ------------------------------------------------------------------------


def _sim_flags(p):
    p.add_argument("config", nargs="?", help="JSON config mirroring SimConfig")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int)
    p.add_argument("--epsilon", type=_eps, help="privacy budget; 'inf' disables noise")
    p.add_argument("--gamma", type=float)
    p.add_argument("--strategy", help="e.g. draw_and_discard, average:same_instance, server_batch:100")
    p.add_argument("--passes", type=int)
    p.add_argument("--examples-per-client", dest="examples_per_client", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--max-updates", dest="max_updates", type=int)
    p.add_argument("--spam-t", dest="spam_t", type=float, help="enable the spam test with this multiplier")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddml", description="Draw-and-discard private learning toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one simulation, CSV trace to --out")
    _sim_flags(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("grid", help="run an experiment grid (config key 'sweep')")
    _sim_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("analyze", help="privacy report for the three observer models")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--epsilon", type=_eps, required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--T", type=int, default=10_000)
    p.add_argument("--delta", type=float, default=1e-8)
    p.add_argument("--t", type=float, default=0.2, help="pre-image radius in units of gamma")
    p.add_argument("--trials", type=int, default=0, help="Monte Carlo pre-image trials (0 skips)")
    p.add_argument("--csv-dir", help="also write k / T / t sweeps as CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify", help="run a verification suite (see README)")
    p.add_argument("suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("serve", help="run the pool server (NDJSON socket, optional HTTP)")
    _sim_flags(p)
    p.add_argument("--bind", default="127.0.0.1:7070")
    p.add_argument("--http", type=int, help="also serve the HTTP API on this port")
    p.add_argument("--snapshot", help="write the pool snapshot here on shutdown")
    p.add_argument("--trace", help="record operations and write them here on shutdown")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("agent", help="run one client agent against a server")
    p.add_argument("--server", required=True, help="host:port")
    p.add_argument("--data", required=True, help=".npz with X, y or CSV with the response last")
    p.add_argument("--epsilon", type=_eps, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--level", choices=("feature", "model"), default="feature")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("spam-test", help="check a weight vector against a pool snapshot")
    p.add_argument("snapshot")
    p.add_argument("weights", help="JSON array of weights")
    p.add_argument("--t", type=float, default=3.0)
    p.set_defaults(func=cmd_spam_test)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DDMLError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
