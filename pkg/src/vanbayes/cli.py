"""Command-line interface: ``vanbayes {simulate,train,diagnose,infer,invariance-check}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .families import DomainError
from .io import FormatError
from .simulators import ConfigError

EXIT_OK, EXIT_GATE, EXIT_CONFIG = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(prog="vanbayes", description="Amortized parametric posterior estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config (YAML or JSON)")
        p.add_argument("--out", required=True, help="experiment output directory")
        p.add_argument("--seed-override", type=int, default=None, help="replace the config seed")
        p.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
        return p

    common(sub.add_parser("simulate", help="simulate training and validation batches"))
    common(sub.add_parser("train", help="fit summaries and networks; write the bundle"))
    p = common(sub.add_parser("diagnose", help="calibration reports on the validation batch"))
    p.add_argument("--ks-gate", type=float, default=None, help="fail if any PIT KS statistic exceeds this")
    p = common(sub.add_parser("infer", help="posterior summaries for observed data"))
    p.add_argument("--observed", default=None, help="observed datasets (.npy, .csv or batch file)")
    p.add_argument("--scenario", action="store_true", help="evaluate MAD and coverage on scenario replicates")
    common(sub.add_parser("invariance-check", help="compare weighted and unweighted training"))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = pipeline.load_config(args.config, args.seed_override)
        if args.command == "simulate":
            train, val = pipeline.cmd_simulate(cfg, args.out, args.workers)
            print(f"simulated {len(train)} training and {len(val)} validation records")
        elif args.command == "train":
            manifest = pipeline.cmd_train(cfg, args.out, args.workers)
            for t, info in manifest["targets"].items():
                best = info["best"]
                score = info["cells"][best]["log_score"] if best else float("nan")
                print(f"{t}: best cell {best} (validation log score {score:.4f})")
        elif args.command == "diagnose":
            reports, ok = pipeline.cmd_diagnose(cfg, args.out, args.ks_gate)
            for r in reports:
                print(f"{r.target}: log score {r.log_score:.4f}, KS {r.ks_stat:.4f}, "
                      f"90% coverage {r.coverage_by_level.get(0.9, float('nan')):.3f}")
            if not ok:
                print("KS gate exceeded", file=sys.stderr)
                return EXIT_GATE
        elif args.command == "infer":
            result = pipeline.cmd_infer(cfg, args.out, args.observed, args.scenario)
            for row in result.get("scenario", []):
                print(", ".join(f"{k}={v}" for k, v in row.items()))
            if "posterior" in result:
                print(f"wrote {len(result['posterior'])} posterior rows")
        elif args.command == "invariance-check":
            for row in pipeline.cmd_invariance_check(cfg, args.out, args.workers):
                print(f"{row['target']}: RMS median discrepancy {row['rms_median_discrepancy']:.4f}")
    except (ConfigError, FormatError, DomainError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
