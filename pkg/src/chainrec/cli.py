"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 endpoint error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .corpus import CandidatePoolExhausted, CorpusError
from .llm import EndpointError
from .prompts import MissingMetadata, PromptBudgetExceeded

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ENDPOINT = 0, 1, 2, 3

COMMANDS = ("ingest", "sample-chains", "build-prompts", "generate-iot", "collect-rollouts",
            "eval", "toy-grpo", "export")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="YAML or JSON config file")
        p.add_argument("--workdir")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set eval.n_runs=1 (repeatable)")
        if name == "ingest":
            p.add_argument("--synthetic", action="store_true", default=None,
                           help="use the bundled synthetic MovieLens-style corpus")
        if name in ("generate-iot", "collect-rollouts", "eval"):
            p.add_argument("--mock-script", help="script file for the mock endpoint")
    return parser


def _run(args) -> int:
    cfg = load_config(args.config, args.overrides, workdir=args.workdir, seed=args.seed,
                      data__synthetic=getattr(args, "synthetic", None),
                      endpoint__mock_script=getattr(args, "mock_script", None))
    cmd = args.command
    if cmd == "ingest":
        _, summary = pipeline.ingest(cfg)
        print(summary)
    elif cmd == "toy-grpo":
        traj, gap = pipeline.toy_grpo_stage(cfg)
        print(f"{len(traj)} steps, final-window minus first-window mean reward: {gap:.3f}")
    elif cmd == "export":
        counts = pipeline.export_stage(cfg)
        print(", ".join(f"{k}: {v}" for k, v in counts.items()) or "nothing to export")
    else:
        ws = pipeline.open_workspace(cfg)
        if cmd == "sample-chains":
            print(pipeline.sample_chains_stage(ws))
        elif cmd == "build-prompts":
            for path in pipeline.build_prompts_stage(ws):
                print(path)
        elif cmd == "eval":
            print(pipeline.eval_stage(ws).table())
        else:
            gateway = pipeline.make_gateway(cfg)
            try:
                if cmd == "generate-iot":
                    s = pipeline.generate_iot_stage(ws, gateway)
                    print(f"{s.prompts} prompts, {s.responses} responses before filtering, "
                          f"{s.accepted} triplets kept (acceptance rate {s.acceptance_rate:.3f})")
                else:
                    s = pipeline.collect_rollouts_stage(ws, gateway)
                    print(f"{s.prompts} prompts, {s.accepted} scored samples, "
                          f"{s.discarded_groups} groups discarded")
            finally:
                gateway.close()
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, CandidatePoolExhausted, MissingMetadata, PromptBudgetExceeded) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT


if __name__ == "__main__":
    sys.exit(main())
