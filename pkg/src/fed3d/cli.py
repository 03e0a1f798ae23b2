"""Command-line front end: ``pretrain``, ``run`` and ``compare``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
runtime and I/O failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from fed3d.config import ConfigError, ExperimentConfig, load_config
from fed3d.data import DatasetFormatError
from fed3d.detector import parameter_census
from fed3d.experiment import (
    CompareError,
    CheckpointMismatch,
    compare,
    pretrain_backbone,
    prepare_data,
    run_experiment,
    write_run,
)
from fed3d.federation import CORRECTIONS, MODES
from fed3d.wire import PayloadFormatError

log = logging.getLogger("fed3d")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--correction", choices=CORRECTIONS)
    p.add_argument("--workers", type=int)
    p.add_argument("--backbone", help="backbone checkpoint (default: OUT/backbone.f3dp)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; may repeat")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fed3d", description="Federated prompt tuning on synthetic point clouds.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train and freeze the backbone")
    _add_common(p)
    p = sub.add_parser("run", help="federate from a pretrained backbone")
    _add_common(p)
    p = sub.add_parser("compare", help="tabulate two or more run summaries")
    p.add_argument("summaries", nargs="+", type=Path)
    p.add_argument("--out", type=Path, help="also write the table as CSV here")
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for key in ("seed", "out", "mode", "correction", "workers", "backbone"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    split, checkpoint, acc = pretrain_backbone(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = cfg.backbone_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint)
    (out / "config.resolved").write_text(cfg.to_text())
    census = parameter_census(split)
    report = {"heldout_accuracy": acc, "checkpoint": str(path), "config_hash": cfg.digest(),
              "backbone_params": census.backbone}
    (out / "pretrain.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"backbone written to {path} (held-out accuracy {acc:.4f})")
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig) -> int:
    path = cfg.backbone_path()
    try:
        checkpoint = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"backbone checkpoint {path} is not readable ({exc.strerror}); run 'pretrain' first") from exc
    data = prepare_data(cfg)
    result = run_experiment(cfg, checkpoint, data)
    out = write_run(cfg, result, data)
    last = result.metrics[-1]
    print(f"{cfg.mode}/{cfg.correction}: accuracy {last.accuracy:.4f}, macro recall {last.macro_recall:.4f}; "
          f"results in {out}")
    return EXIT_OK


def cmd_compare(paths: list[Path], out: Path | None) -> int:
    summaries = []
    for p in paths:
        try:
            summaries.append(json.loads(p.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read summary {p}: {exc}") from exc
    names = [p.parent.name or p.stem for p in paths]
    text, table = compare(summaries, names)
    print(text, end="")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            return cmd_compare(args.summaries, args.out)
        cfg = resolve_config(args)
        return cmd_pretrain(cfg) if args.command == "pretrain" else cmd_run(cfg)
    except (ConfigError, CompareError, CheckpointMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, PayloadFormatError, DatasetFormatError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
