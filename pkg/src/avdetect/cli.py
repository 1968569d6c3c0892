"""Command line: ``avdetect {gen-data,train,eval,ablate,report,print-config}``.

Exit codes: 0 success, 2 usage/config error, 3 data integrity, 4 numeric
failure, 5 ablation ordering violated.  Every failure also prints one JSON
line ``{"error": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .autodiff import NumericError
from .checkpoint import CheckpointError
from .config import EVAL_SPLITS, ConfigError, RunConfig
from .data import CorpusConfigError
from .metrics import load_report
from .pipeline import (ABLATION_ARMS, IntegrityError, ablation_plans, corpus_dir, eval_checkpoint,
                       final_checkpoint, generate_corpus, run_ablation, run_dir, train_run)
from .training import StagePlan

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_ORDER = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        sys.exit(EXIT_USAGE)


def _emit_error(kind: str, message: str, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--plan", choices=StagePlan.PRESETS, help="override the stage plan")
    common.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="stdout format")
    common.add_argument("--out", help="override the output root directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="avdetect", description="Audio-visual deepfake detection by answer-token fine-tuning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    p = sub.add_parser("train", parents=[common], help="run the configured stage plan")
    p.add_argument("--dry-run", action="store_true", help="print the plan and exit")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on evaluation splits")
    p.add_argument("--checkpoint", help="checkpoint file or run directory (default: the configured run)")
    p.add_argument("--splits", nargs="+", help=f"splits to score (default: {' '.join(EVAL_SPLITS)})")
    p = sub.add_parser("ablate", parents=[common], help="train and compare the four ablation arms")
    p.add_argument("--dry-run", action="store_true", help="print the arms' plans without training")
    p.add_argument("--seeds", type=int, nargs="+", help="override the ablation seeds")
    p = sub.add_parser("report", parents=[common], help="print the summary of a stored report.json")
    p.add_argument("path", nargs="?", help="report.json or a directory holding one")
    sub.add_parser("print-config", parents=[common], help="print the effective configuration")
    return parser


def load_config(args) -> RunConfig:
    try:
        config = RunConfig.load(args.config) if args.config else RunConfig()
    except FileNotFoundError:
        raise CliError(EXIT_USAGE, "config", f"config file not found: {args.config}", field="<root>")
    except ConfigError as exc:
        raise CliError(EXIT_USAGE, "config", str(exc), field=exc.field)
    if args.seed is not None:
        config.seed = args.seed
    if args.plan is not None:
        config.plan = args.plan
    if args.threads is not None:
        if args.threads < 1:
            raise CliError(EXIT_USAGE, "config", "threads: must be at least 1", field="threads")
        config.threads = args.threads
    if args.out is not None:
        config.out = args.out
    return config


def _table(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2, sort_keys=False) + "\n"
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def summary_table(report: dict) -> list[dict]:
    """One row per metric, one column per split, from a report dictionary."""
    splits = report["splits"]
    rows = []
    for metric, key, scale in (("mAP", "map", 1.0), ("AUC", "auc", 1.0), ("acc", "accuracy", 100.0)):
        row = {"metric": metric}
        for name, r in splits.items():
            row[name] = None if r[key] is None else r[key] * scale
        rows.append(row)
    return rows


# -- commands -----------------------------------------------------------------

def cmd_gen_data(config: RunConfig, args) -> int:
    digest = generate_corpus(config)
    counts = {k: int(v) for k, v in config.corpus.counts.items()}
    print(json.dumps({"corpus": str(corpus_dir(config)), "corpus_hash": digest, "counts": counts},
                     sort_keys=True))
    return EXIT_OK


def cmd_train(config: RunConfig, args) -> int:
    if args.dry_run:
        print(json.dumps({"run_dir": str(run_dir(config)), "plan": config.stage_plan().to_dict()},
                         indent=2, sort_keys=True))
        return EXIT_OK
    print(json.dumps(train_run(config), sort_keys=True))
    return EXIT_OK


def cmd_eval(config: RunConfig, args) -> int:
    target = Path(args.checkpoint) if args.checkpoint else run_dir(config)
    ckpt = final_checkpoint(target) if target.is_dir() else target
    if not ckpt.exists():
        raise CliError(EXIT_DATA, "integrity", f"checkpoint not found: {ckpt}")
    out = ckpt.parent / "eval"
    report, missing = eval_checkpoint(config, ckpt, args.splits, out)
    if report.splits:
        sys.stdout.write(_table(summary_table(report.to_dict()), args.format))
    if missing:
        raise CliError(EXIT_DATA, "missing_splits", f"splits not in corpus: {', '.join(missing)}",
                       splits=missing)
    return EXIT_OK


def cmd_ablate(config: RunConfig, args) -> int:
    if args.seeds:
        config.ablation_seeds = tuple(args.seeds)
    if args.dry_run:
        print(json.dumps({"seeds": list(config.ablation_seeds), "split": "open_set_full",
                          "arms": ablation_plans(config)}, indent=2, sort_keys=True))
        return EXIT_OK
    result = run_ablation(config)
    out = Path(config.out) / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "ablation.csv").write_text(_table(result.rows(), "csv"))
    sys.stdout.write(_table(result.rows(), args.format))
    if not result.passed():
        accs = {arm: result.accuracy[arm] for arm, _ in ABLATION_ARMS}
        raise CliError(EXIT_ORDER, "ordering",
                       "majority of seeds violates two-stage >= stage-2-only >= stage-1-only > zero-shot",
                       verdicts=result.verdicts(), accuracy=accs)
    return EXIT_OK


def cmd_report(config: RunConfig, args) -> int:
    path = Path(args.path) if args.path else run_dir(config) / "eval"
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise CliError(EXIT_DATA, "integrity", f"report not found: {path}")
    sys.stdout.write(_table(summary_table(load_report(path)), args.format))
    return EXIT_OK


def cmd_print_config(config: RunConfig, args) -> int:
    sys.stdout.write(config.to_json())
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "report": cmd_report, "print-config": cmd_print_config}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        return COMMANDS[args.command](config, args)
    except CliError as exc:
        _emit_error(exc.kind, str(exc), **exc.extra)
        return exc.code
    except (ConfigError, CorpusConfigError) as exc:
        _emit_error("config", str(exc))
        return EXIT_USAGE
    except (IntegrityError, CheckpointError) as exc:
        _emit_error("integrity", str(exc))
        return EXIT_DATA
    except NumericError as exc:
        _emit_error("numeric", str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
