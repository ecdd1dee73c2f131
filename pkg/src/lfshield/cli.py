"""Command line entry point.

    lfshield run --config exp.toml --defense ours --ratio 0.3 --seed 42
    lfshield run --defense all --ratios 0,0.1,0.2,0.3,0.4,0.5 --out-dir out/
    lfshield report out/
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from lfshield import reports
from lfshield.config import DEFENSES, ExperimentConfig, from_mapping, read_mapping, validate
from lfshield.errors import ConfigError, FormatError, LFShieldError
from lfshield.federation import load_dataset, run_experiment

log = logging.getLogger("lfshield")

SEED_ENV = "LFSHIELD_SEED"


def _ratios(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("need at least one ratio")
    return values


def _defenses(text: str) -> list[str]:
    if text == "all":
        return list(DEFENSES)
    names = [v.strip() for v in text.split(",") if v.strip()]
    unknown = [n for n in names if n not in DEFENSES]
    if unknown or not names:
        raise argparse.ArgumentTypeError(
            f"unknown defense {', '.join(unknown) or text!r}; choose from {', '.join(DEFENSES)} or all"
        )
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfshield", description="Label-flipping defense experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment or a defense x ratio sweep")
    run.add_argument("--config", help="TOML experiment config; unset keys take defaults")
    run.add_argument("--defense", type=_defenses, help="defense name, comma list, or 'all'")
    run.add_argument("--ratios", "--ratio", dest="ratios", type=_ratios,
                     help="attacker ratio(s), comma separated")
    run.add_argument("--seed", type=int, help=f"experiment seed (fallback: ${SEED_ENV})")
    run.add_argument("--mode", choices=("auto", "mild", "extreme"), help="defense distribution mode")
    run.add_argument("--rounds", type=int, help="override the number of rounds")
    run.add_argument("--out-dir", default="lfshield-out", help="output directory (default: %(default)s)")
    run.add_argument("--dump-features", action="store_true", help="write per-round feature/PCA CSVs")
    run.add_argument("--threads", type=int, default=1, help="worker threads for local training")
    run.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    rep = sub.add_parser("report", help="re-render figures from an existing output directory")
    rep.add_argument("out_dir")
    return parser


def resolve_config(args) -> ExperimentConfig:
    """Defaults, then the config file, then flags; $LFSHIELD_SEED only fills an unset seed."""
    mapping = read_mapping(args.config) if args.config else {}
    env_seed = os.environ.get(SEED_ENV)
    if args.seed is not None:
        mapping["seed"] = args.seed
    elif env_seed is not None and "seed" not in mapping:
        try:
            mapping["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    cfg = from_mapping(mapping)
    if args.mode is not None:
        cfg = cfg.replace(mode=args.mode)
    if args.rounds is not None:
        cfg = cfg.replace(rounds=args.rounds)
    if args.dump_features:
        cfg = cfg.replace(dump_features=True)
    return cfg


def sweep_configs(cfg: ExperimentConfig, defenses, ratios) -> list[ExperimentConfig]:
    cells = [
        cfg.replace(defense=d, ratio=r)
        for d in (defenses or [cfg.defense])
        for r in (ratios or [cfg.ratio])
    ]
    for c in cells:
        validate(c)
    return cells


def cmd_run(args) -> int:
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    cfg = resolve_config(args)
    cells = sweep_configs(cfg, args.defense, args.ratios)
    dataset = load_dataset(cells[0])
    results = []
    for c in cells:
        tic = time.perf_counter()
        result = run_experiment(c, threads=args.threads, dataset=dataset)
        s = result.summary()
        log.info(
            "%s: src_acc=%.3f asr=%.3f all_acc=%.3f (%.1fs, defense %.2fs)",
            reports.cell_name(c.defense, c.ratio), s["src_acc"] if s["src_acc"] is not None else float("nan"),
            s["asr"] if s["asr"] is not None else float("nan"), s["all_acc"],
            time.perf_counter() - tic, s["defense_seconds"],
        )
        results.append(result)
    written = reports.write_sweep(results, args.out_dir, figures=not args.no_figures)
    for p in written:
        print(p)
    return 0


def cmd_report(args) -> int:
    for p in reports.render_figures(args.out_dir):
        print(p)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_report(args)
    except (ConfigError, FormatError) as exc:
        print(f"lfshield: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, LFShieldError) as exc:
        print(f"lfshield: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
