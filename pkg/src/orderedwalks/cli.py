"""Command line entry point.

Examples
--------
::

    orderedwalks estimate-h --config cfg.json --out results/
    orderedwalks tail-exponent --law ssrw:3 --out tail/
    orderedwalks oracle-check --config check.json --seed 7 --threads 1
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from .harness import KINDS, AcceptanceFailure, ConfigError, ExperimentConfig, run_experiment
from .walk import COMPONENT_TABLE

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ACCEPTANCE = 3


def _law_arg(text: str) -> dict:
    """``ssrw:D`` or a JSON law descriptor."""
    if text.startswith("ssrw:"):
        d = int(text.split(":", 1)[1])
        return {"d": d, "kind": COMPONENT_TABLE, "components": [{"-1": 0.5, "1": 0.5}]}
    return json.loads(text)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration (JSON)")
    common.add_argument("--seed", type=int, help="override seed_base")
    common.add_argument("--threads", type=int, help="worker threads for the kernels")
    common.add_argument("--out", help="output directory")
    common.add_argument("--law", type=_law_arg, help="'ssrw:D' or a JSON law descriptor")
    common.add_argument("--replicas", type=int)
    common.add_argument("--probe", dest="probes", action="append", type=_floats,
                        help="probe gap, e.g. '2' or '1,1' (repeatable)")
    common.add_argument("--c-grid", type=_floats, help="decreasing rates, e.g. '0.2,0.1'")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="orderedwalks",
                                     description="Random walks with ordered components.")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        name = "sample-conditioned" if kind == "conditioned-sample" else kind
        sub.add_parser(name, parents=[common], help=f"run the {kind} experiment")
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    kind = "conditioned-sample" if args.kind == "sample-conditioned" else args.kind
    data: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    data["kind"] = kind
    overrides = {"law": args.law, "replicas": args.replicas, "probes": args.probes,
                 "c_grid": args.c_grid, "seed_base": args.seed, "out": args.out,
                 "threads": args.threads}
    data.update({k: v for k, v in overrides.items() if v is not None})
    if "law" not in data:
        raise ConfigError("no law given (use --law or a config file)")
    if kind == "conditioned-sample" and "x0" not in data:
        data["x0"] = [2.0 * k for k in range(int(data["law"]["d"]))]
    return ExperimentConfig.from_dict(data)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if cfg.threads is not None:
            import numba

            numba.set_num_threads(max(1, min(cfg.threads, numba.config.NUMBA_NUM_THREADS)))
        written = run_experiment(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except AcceptanceFailure as exc:
        print(f"acceptance failure: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    for path in written.values():
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
