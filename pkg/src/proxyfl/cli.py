"""Command line: ``proxyfl run | epsilon | topology``.

Exit codes: 0 success, 2 configuration error, 3 protocol fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from .accountant import DEFAULT_ORDERS, epsilon_for_training
from .errors import ConfigError, ProtocolFault
from .gossip import TopologyKind, TopologySchedule, exponential_offset, generate_matrix, \
    rounds_to_full_propagation, taint_trace

EXIT_CONFIG = 2
EXIT_PROTOCOL = 3

log = logging.getLogger("proxyfl")


def _cmd_run(args) -> int:
    from .config import load_config
    from .report import emit_results
    from .runner import run_config

    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
        overrides["num_runs"] = None
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.method is not None:
        overrides["methods"] = args.method
    if args.topology is not None:
        overrides["topology"] = args.topology
    if args.no_dp:
        overrides["dp.enabled"] = False
    if args.dp_fixed_denominator:
        overrides["dp.fixed_denominator"] = True
    if args.debias_in_place:
        overrides["debias_in_place"] = True
    if args.workers is not None:
        overrides["workers"] = args.workers
    try:
        cfg = load_config(args.config, overrides)
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    results = run_config(cfg)
    paths = emit_results(results, cfg.output_dir, figures=not args.no_figures,
                         link_time_per_byte=cfg.link_time_per_byte)
    for p in paths:
        print(p)
    return 0


def _cmd_epsilon(args) -> int:
    if args.n < 1 or args.batch < 1 or args.batch > args.n:
        raise ConfigError("need 1 <= --batch <= --n")
    if args.sigma <= 0 or not 0 < args.delta < 1 or args.epochs < 0:
        raise ConfigError("need --sigma > 0, 0 < --delta < 1 and --epochs >= 0")
    eps = epsilon_for_training(args.n, args.batch, args.sigma, args.delta, args.epochs,
                               DEFAULT_ORDERS, simple=args.simple_conversion)
    steps = args.epochs * -(-args.n // args.batch)
    print(f"epsilon={eps:.4f} delta={args.delta:g} steps={steps} "
          f"q={args.batch / args.n:.6g} sigma={args.sigma:g}")
    return 0


def _cmd_topology(args) -> int:
    if args.k < 1 or args.rounds < 0:
        raise ConfigError("need --k >= 1 and --rounds >= 0")
    kind = TopologyKind(args.kind)
    sched = TopologySchedule(kind, args.k)
    full = rounds_to_full_propagation(sched, args.source)
    if args.trace:
        trace = taint_trace(sched, args.rounds, args.source)
        doc = {
            "kind": kind.value, "num_clients": args.k, "source": args.source,
            "rounds_to_full": full,
            "offsets": [exponential_offset(args.k, t) for t in range(args.rounds)]
            if kind in (TopologyKind.EXPONENTIAL_PERMUTATION, TopologyKind.EXPONENTIAL_SELF_LOOP)
            else None,
            "informed": [sorted(s) for s in trace],
            "matrices": [generate_matrix(sched, t).entries.tolist() for t in range(args.rounds)]
            if args.matrices else None,
        }
        print(json.dumps(doc, indent=2))
    else:
        print(f"kind={kind.value} k={args.k} rounds_to_full={full}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxyfl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--method")
    r.add_argument("--topology")
    r.add_argument("--workers", type=int)
    r.add_argument("--no-dp", action="store_true")
    r.add_argument("--dp-fixed-denominator", action="store_true")
    r.add_argument("--debias-in-place", action="store_true")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("epsilon", help="privacy cost of DP-SGD training")
    e.add_argument("--n", type=int, required=True, help="dataset size")
    e.add_argument("--batch", type=int, required=True, help="expected batch size")
    e.add_argument("--sigma", type=float, required=True, help="noise multiplier")
    e.add_argument("--delta", type=float, default=1e-5)
    e.add_argument("--epochs", type=int, required=True)
    e.add_argument("--simple-conversion", action="store_true")
    e.set_defaults(func=_cmd_epsilon)

    t = sub.add_parser("topology", help="information propagation under a topology")
    t.add_argument("--k", type=int, required=True)
    t.add_argument("--rounds", type=int, default=0)
    t.add_argument("--kind", default=TopologyKind.EXPONENTIAL_PERMUTATION.value,
                   choices=[k.value for k in TopologyKind])
    t.add_argument("--source", type=int, default=0)
    t.add_argument("--trace", action="store_true")
    t.add_argument("--matrices", action="store_true", help="include mixing matrices in the trace")
    t.set_defaults(func=_cmd_topology)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolFault as e:
        print(f"protocol fault: {e}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
