"""Command line entry points.

  alma run <config.json> [--stop-after T] [--resume CKPT]
  alma ablate-seq <config.json> --k N [-o out.json]
  alma report <run-dir>... [-o merged.json]
  alma inspect <checkpoint.bin>

Exit codes: 0 success, 2 configuration error, 3 numeric abort.
The ALMA_OUTPUT_ROOT environment variable re-roots relative output dirs.
"""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import describe, load_checkpoint
from .errors import ConfigError, FormatError, NumericError
from .harness import ExperimentConfig, report, run_experiment, run_seq_vs_iid

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alma", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one stream experiment")
    p_run.add_argument("config", help="path to a JSON experiment config")
    p_run.add_argument("--stop-after", type=int, default=None, metavar="T",
                       help="checkpoint and stop after arrival T")
    p_run.add_argument("--resume", default=None, metavar="CKPT",
                       help="resume from a checkpoint written by the same config")

    p_abl = sub.add_parser("ablate-seq", help="sequential vs iid training comparison")
    p_abl.add_argument("config")
    p_abl.add_argument("--k", type=int, required=True, help="number of mega-batches")
    p_abl.add_argument("-o", "--output", default=None, help="write the paired summary here")

    p_rep = sub.add_parser("report", help="merge completed runs for plotting")
    p_rep.add_argument("dirs", nargs="+", help="run output directories")
    p_rep.add_argument("-o", "--output", default=None, help="write merged JSON here")

    p_ins = sub.add_parser("inspect", help="describe a checkpoint file")
    p_ins.add_argument("checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = ExperimentConfig.from_json(args.config)
            result = run_experiment(config, resume_from=args.resume, stop_after=args.stop_after)
            print(json.dumps(result, indent=2, sort_keys=True))
        elif args.command == "ablate-seq":
            config = ExperimentConfig.from_json(args.config)
            result = run_seq_vs_iid(config, args.k)
            if args.output:
                with open(args.output, "w", encoding="utf-8") as fh:
                    json.dump(result, fh, indent=2, sort_keys=True)
                    fh.write("\n")
            print(json.dumps(result, indent=2, sort_keys=True))
        elif args.command == "report":
            merged = report(args.dirs, output_path=args.output)
            for run in merged["runs"]:
                print(f"{run['run_dir']}: cer={run['cer']:.4f} "
                      f"final_error={run['final_error']:.4f} cum_comp={run['cum_comp']:.3e}")
            for missing in merged["incomplete"]:
                print(f"{missing}: incomplete")
        else:
            info = describe(load_checkpoint(args.checkpoint))
            print(json.dumps(info, indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
