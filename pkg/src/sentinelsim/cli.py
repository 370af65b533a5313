"""Command line interface: run, replay, stats."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional

from .config import ConfigError, load_config_file
from .harness import compute_metrics, replay, run_scenario
from .operator_bridge import ListenBridge, make_bridge
from .trace import read_trace


def _parse_operator(value: str) -> dict:
    if value == "none":
        return {"mode": "none"}
    if value.startswith("scripted:"):
        return {"mode": "scripted", "policy": value.split(":", 1)[1]}
    if value.startswith("listen:"):
        return {"mode": "listen", "port": int(value.split(":", 1)[1])}
    raise argparse.ArgumentTypeError(
        f"operator must be scripted:<policy>, listen:<port> or none, got {value!r}"
    )


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="sentinelsim", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--operator", type=_parse_operator, default=None)
    run_p.add_argument("--trace", default=None, help="write the JSON Lines trace here")

    replay_p = sub.add_parser("replay", help="verify a trace against its config")
    replay_p.add_argument("--trace", required=True)
    replay_p.add_argument("--config", required=True)

    stats_p = sub.add_parser("stats", help="recompute metrics from a trace")
    stats_p.add_argument("--trace", required=True)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    if args.command == "run":
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.operator is not None:
            raw["operator"] = {**raw.get("operator", {}), **args.operator}
        from .config import load_config

        try:
            config = load_config(raw)
        except ConfigError as exc:
            print(str(exc), file=sys.stderr)
            return 2
        bridge = make_bridge(
            config.operator.mode, policy=config.operator.policy, port=config.operator.port
        )
        if isinstance(bridge, ListenBridge):
            print(f"operator-listening port={bridge.port}", flush=True)
        result = run_scenario(config, trace_path=args.trace, bridge=bridge)
        print(json.dumps({"metrics": result.metrics.to_json(), "digest": result.trace_digest}, indent=2))
        return 0

    if args.command == "replay":
        try:
            config = load_config_file(args.config)
        except ConfigError as exc:
            print(str(exc), file=sys.stderr)
            return 2
        report = replay(args.trace, config)
        print(json.dumps(report.to_json(), indent=2))
        return 0 if report.ok else 1

    if args.command == "stats":
        doc = read_trace(args.trace)
        metrics = compute_metrics(doc.body_events())
        print(json.dumps(metrics.to_json(), indent=2))
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
