"""Command-line entry point: ``taco <verb> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .exceptions import CheckpointError, ConfigError, TacoError
from .synthdata import LEVELS

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULTS = {"iterations": 2000, "omega": 5, "delta": 0.3, "instances": 8, "modalities": 3}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seed_flag(p):
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (default: config value, then $TACO_SEED, then 0)")


def _data_flags(p, need_checkpoint=True):
    p.add_argument("--data", default=None, help="cohort directory written by gen-data")
    if need_checkpoint:
        p.add_argument("--checkpoint", default=None, help="checkpoint file written by pretrain")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="taco", description="Topology-aware token pretraining on synthetic phantoms.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort")
    p.add_argument("--out", default=None, help="output directory (required)")
    p.add_argument("--instances", type=int, default=DEFAULTS["instances"],
                   help="number of instances (default: %(default)s)")
    p.add_argument("--modalities", type=int, default=DEFAULTS["modalities"],
                   help="modalities per instance (default: %(default)s)")
    p.add_argument("--start-id", type=int, default=0,
                   help="first instance id, e.g. 8 for a held-out set (default: %(default)s)")
    _seed_flag(p)

    p = sub.add_parser("pretrain", help="train the encoder and write checkpoint + loss log")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--data", default=None, help="cohort directory (or 'data' in the config)")
    p.add_argument("--out", default=None, help="output directory (or 'out' in the config)")
    p.add_argument("--iters", type=int, default=None,
                   help=f"training iterations (default: {DEFAULTS['iterations']})")
    p.add_argument("--omega", type=int, default=None,
                   help=f"neighborhood size (default: {DEFAULTS['omega']})")
    p.add_argument("--delta", type=float, default=None,
                   help=f"triplet margin (default: {DEFAULTS['delta']})")
    _seed_flag(p)

    p = sub.add_parser("eval", help="cross-modal alignment report and anatomy purity")
    _data_flags(p)
    p.add_argument("--report", default="eval_report.json", help="JSON output (default: %(default)s)")
    p.add_argument("--pooled", action="store_true", help="pool tokens instead of per-subject mean")
    p.add_argument("--foreground", action="store_true", help="restrict to foreground tokens")
    _seed_flag(p)

    p = sub.add_parser("perturb-eval", help="robustness sweep under rigid perturbations")
    _data_flags(p)
    p.add_argument("--levels", default="mild,moderate,strong",
                   help="comma-separated levels; clean is always included (default: %(default)s)")
    p.add_argument("--repeats", type=int, default=5,
                   help="perturbation seeds per level (default: %(default)s)")
    p.add_argument("--report", default="robustness.json",
                   help="JSON output; a CSV is written next to it (default: %(default)s)")
    p.add_argument("--format", choices=("csv", "json"), default="csv",
                   help="table format printed to stdout (default: %(default)s)")
    _seed_flag(p)

    p = sub.add_parser("export-embeddings", help="per-instance PCA coordinates of the tokens")
    _data_flags(p)
    p.add_argument("--out", default=None, help="output directory (required)")
    p.add_argument("--format", choices=("csv",), default="csv", help="output format (default: %(default)s)")
    _seed_flag(p)
    return parser


def _resolve_seed(flag, config_value=None) -> int:
    if flag is not None:
        return flag
    if config_value is not None:
        return int(config_value)
    env = os.environ.get("TACO_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"TACO_SEED must be an integer, got {env!r}") from None
    return 0


def _require(args, *names):
    for name in names:
        value = getattr(args, name)
        if value is None:
            raise UsageError(f"taco {args.verb}: --{name} is required")
        if name in ("data", "checkpoint") and not Path(value).exists():
            raise UsageError(f"taco {args.verb}: --{name} path does not exist: {value}")


def _print_resolved(items: dict) -> None:
    print("# resolved configuration")
    for key, value in items.items():
        print(f"{key} = {value}")
    sys.stdout.flush()


def _gen_data(args):
    from .synthdata import generate_cohort, save_cohort

    _require(args, "out")
    seed = _resolve_seed(args.seed)
    _print_resolved({"verb": args.verb, "out": args.out, "instances": args.instances,
                     "modalities": args.modalities, "start_id": args.start_id, "seed": seed})
    cohort = generate_cohort(n_instances=args.instances, modalities=args.modalities, seed=seed,
                             start_id=args.start_id)
    save_cohort(args.out, cohort, seed)


def _pretrain(args):
    from .trainer import TrainConfig, parse_config_text, train

    values = {}
    if args.config is not None:
        if not Path(args.config).exists():
            raise UsageError(f"taco pretrain: --config path does not exist: {args.config}")
        values = parse_config_text(Path(args.config).read_text())
    for flag, key in (("iters", "iterations"), ("omega", "omega"), ("delta", "delta"),
                      ("data", "data"), ("out", "out")):
        if getattr(args, flag) is not None:
            values[key] = getattr(args, flag)
    values["seed"] = _resolve_seed(args.seed, values.get("seed"))
    config = TrainConfig.from_mapping(values)
    if not config.data or not Path(config.data).exists():
        raise UsageError("taco pretrain: a cohort directory is required (--data or 'data' in --config)")
    if not config.out:
        raise UsageError("taco pretrain: an output directory is required (--out or 'out' in --config)")
    print(config.to_text(), end="")
    Path(config.out).mkdir(parents=True, exist_ok=True)
    train(config)


def _load(args):
    from .model import load_checkpoint
    from .synthdata import load_cohort

    _require(args, "checkpoint", "data")
    model, header = load_checkpoint(args.checkpoint)
    return model, header, load_cohort(args.data)


def _eval(args):
    from .metrics import anatomy_cluster_purity, evaluate_alignment, write_report
    from .synthdata import token_region_labels
    import numpy as np

    _require(args, "checkpoint", "data")
    seed = _resolve_seed(args.seed)
    _print_resolved({"verb": args.verb, "checkpoint": args.checkpoint, "data": args.data,
                     "report": args.report, "pooled": args.pooled,
                     "foreground": args.foreground, "seed": seed})
    model, _, cohort = _load(args)
    report = evaluate_alignment(model, cohort, foreground=args.foreground, pooled=args.pooled)
    mods = cohort[0].modalities[:2]
    tokens = np.concatenate([model.tokens(s.volumes[m]) for s in cohort for m in mods])
    labels = np.concatenate([token_region_labels(s.labels, model.grid) for s in cohort for _ in mods])
    purity = anatomy_cluster_purity(tokens, labels, seed=seed)
    write_report(args.report, {"alignment": report, "anatomy_purity": purity,
                               "instances": [s.instance_id for s in cohort]})
    print(f"top1 {report.top1_retrieval:.2f}%  gap {report.neg_pos_gap:.4f}  "
          f"rank {report.pairwise_rank_acc:.2f}%  purity {purity:.4f}")


def _perturb_eval(args):
    from .metrics import robustness_csv, robustness_table, write_report

    _require(args, "checkpoint", "data")
    levels = [lv.strip() for lv in args.levels.split(",") if lv.strip()]
    bad = [lv for lv in levels if lv not in LEVELS]
    if bad:
        raise UsageError(f"taco perturb-eval: unknown level(s) {bad}; choose from {list(LEVELS)}")
    if args.repeats < 1:
        raise UsageError("taco perturb-eval: --repeats must be >= 1")
    levels = ["clean"] + [lv for lv in levels if lv != "clean"]
    seed = _resolve_seed(args.seed)
    _print_resolved({"verb": args.verb, "checkpoint": args.checkpoint, "data": args.data,
                     "levels": ",".join(levels), "repeats": args.repeats, "report": args.report,
                     "format": args.format, "seed": seed})
    model, _, cohort = _load(args)
    rows = robustness_table(model, cohort, levels, seeds=range(seed, seed + args.repeats))
    report = Path(args.report)
    write_report(report, rows)
    table = robustness_csv(rows)
    report.with_suffix(".csv").write_text(table)
    if args.format == "csv":
        print(table, end="")
    else:
        print(report.read_text(), end="")


def _export(args):
    from .metrics import embedding_csv

    _require(args, "checkpoint", "data", "out")
    seed = _resolve_seed(args.seed)
    _print_resolved({"verb": args.verb, "checkpoint": args.checkpoint, "data": args.data,
                     "out": args.out, "format": args.format, "seed": seed})
    model, _, cohort = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in cohort:
        (out / f"embeddings_instance_{s.instance_id:04d}.csv").write_text(embedding_csv(model, s))


COMMANDS = {"gen-data": _gen_data, "pretrain": _pretrain, "eval": _eval,
            "perturb-eval": _perturb_eval, "export-embeddings": _export}


def run(argv=None) -> int:
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.verb](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"taco: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        where = f" (field: {exc.field})" if exc.field else ""
        print(f"taco: corrupt checkpoint{where}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TacoError, OSError, ValueError) as exc:
        print(f"taco: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as exc:
        # --help exits through argparse with code 0
        return int(exc.code or 0)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
