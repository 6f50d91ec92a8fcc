"""Command-line surface.

One experiment per process; every subcommand reads a config file plus
overriding flags. Exit codes: 0 success, 1 config/usage error, 2
runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path

from . import runner
from .config import ConfigError, RunConfig, load_config, make_config, parse_override
from .data import DataFormatError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser():
    parser = _Parser(prog="backdoorlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", help="TOML run config (defaults used if omitted)")
            p.add_argument("--seed", type=int, help="override the seed")
            p.add_argument("--out", help="override the output directory")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override any config key")
        return p

    add("gen-data", "generate a dataset and write it out")
    add("poison", "poison the configured dataset and save it")
    add("train", "train the undefended baseline model")
    d = add("defend", "run the full defense pipeline")
    d.add_argument("--relearn", action="store_true",
                   help="relabel leftovers and fine-tune the clean model")
    e = add("eval", "evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    h = add("kl-hist", "export robustness-score histogram for a checkpoint")
    h.add_argument("--checkpoint", required=True)
    k = add("kernel-check", "run the kernel-regression robustness check")
    k.add_argument("--ratios", help="comma-separated poison/clean ratios")
    r = sub.add_parser("report", help="print a run directory summary")
    r.add_argument("--run", required=True)
    return parser


def _load(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    overrides = {}
    for text in getattr(args, "set", []):
        key, value = parse_override(text)
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if overrides:
        values = {**cfg.__dict__, **overrides}
        cfg = make_config(values)
    return cfg


def _cmd_report(args):
    root = Path(args.run)
    path = root / "report.json"
    if not path.exists():
        raise ConfigError(f"no report.json under {root}")
    report = json.loads(path.read_text())
    for key in sorted(report):
        print(f"{key}: {report[key]}")
    return 0


def _dispatch(args):
    if args.command == "report":
        return _cmd_report(args)
    cfg = _load(args)
    if args.command == "gen-data":
        info = runner.run_gen_data(cfg)
        print(f"wrote {info['train']} train / {info['test']} test samples to {cfg.out}")
    elif args.command == "poison":
        info = runner.run_poison(cfg)
        print(f"poisoned {info['payload']} payload + {info['cover']} cover "
              f"of {info['total']} samples -> {cfg.out}")
    elif args.command == "train":
        report = runner.run_train(cfg)
        print(f"undefended: acc={report['acc']:.4f} asr={report['asr']:.4f}")
    elif args.command == "defend":
        report, _ = runner.run_defend(cfg, relearn=args.relearn or None)
        print(f"defended: acc={report['acc_after']:.4f} asr={report['asr_after']:.4f} "
              f"n_clean={report['n_clean']} success={report['defense_success']}")
    elif args.command == "eval":
        report = runner.run_eval(cfg, args.checkpoint)
        print(f"acc={report['acc']:.4f} asr={report['asr']:.4f} "
              f"success={report['defense_success']}")
    elif args.command == "kl-hist":
        runner.run_kl_hist(cfg, args.checkpoint)
        print(f"wrote scores.csv and histogram.csv to {cfg.out}")
    elif args.command == "kernel-check":
        ratios = None
        if args.ratios:
            try:
                ratios = [float(x) for x in args.ratios.split(",") if x.strip()]
            except ValueError:
                raise ConfigError(f"bad --ratios value: {args.ratios!r}")
        rows = runner.run_kernel_check(cfg, ratios=ratios)
        for ratio, fraction, mean_phi in rows:
            print(f"ratio={ratio:g} fraction={fraction:.4f} mean_phi={mean_phi:.4f}")
    else:
        raise _UsageError("missing command")
    return 0


def cli_main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ConfigError, DataFormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
