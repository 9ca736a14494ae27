import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from puq.core.errors import ConfigurationError, ConfigValidationError, FormatError, PuqError, UsageError
from puq.schemas.run import RunConfig, Task
from puq.services import runs
from puq.services.selfcheck import run_selfcheck

logger = logging.getLogger(__name__)

SUBCOMMANDS: dict[str, Task] = {
    "train-base": Task.TRAIN_BASE,
    "train-meta": Task.TRAIN_META,
    "eval-ood": Task.EVAL_OOD,
    "eval-misclass": Task.EVAL_MISCLASS,
    "transfer": Task.TRANSFER,
    "ablate": Task.ABLATE,
    "selfcheck": Task.SELF_CHECK,
}


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="puq", description="Post-hoc uncertainty quantification with a Dirichlet meta-model")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    for name in SUBCOMMANDS:
        command = commands.add_parser(name)
        command.add_argument("--config", type=Path, required=name != "selfcheck", help="JSON run configuration")
        command.add_argument("--seed", type=int, help="Run seed (overrides the config)")
        command.add_argument("--out", help="Output directory for report.json and artifacts")
        command.add_argument("--metric", action="append", dest="metrics", help="Metric name; repeatable")
        command.add_argument("--mode", help="Ablation mode: Full, LinearMeta, CrossEnt, LastLayer, TenPercentData")
        command.add_argument("--data-fraction", type=float, help="Fraction of the meta training set to use")
    return parser


def _format_location(location: Sequence[Any]) -> str:
    return ".".join(str(part) for part in location) or "config"


def _apply_overrides(raw: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(raw)
    for dotted, value in overrides.items():
        if value is None:
            continue
        target = merged
        *parents, leaf = dotted.split(".")
        for part in parents:
            child = target.get(part)
            child = dict(child) if isinstance(child, dict) else {}
            target[part] = child
            target = child
        target[leaf] = value
    return merged


def validate_config(
    raw: bytes | str,
    check_files: bool = True,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """Parse a JSON run configuration; every violation is reported with its field path.

    ``overrides`` maps dotted field paths to flag values (flag > file > default).
    """
    try:
        document = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"configuration is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigValidationError(["config: expected a JSON object"])
    document = _apply_overrides(document, overrides or {})
    try:
        config = RunConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigValidationError(
            [f"{_format_location(error['loc'])}: {error['msg']}" for error in exc.errors()]
        ) from exc
    if check_files:
        missing = config.missing_files()
        if missing:
            raise ConfigValidationError(missing)
    return config


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "task": SUBCOMMANDS[args.command].value,
        "seed": args.seed,
        "output": args.out,
        "metrics": args.metrics,
        "ablation": args.mode,
        "meta.train.data_fraction": args.data_fraction,
    }


def _selfcheck(seed: int) -> int:
    results = run_selfcheck(seed=seed)
    failed = [result for result in results if not result.passed]
    for result in results:
        status = "ok" if result.passed else "FAIL"
        sys.stdout.write(f"{status:4} [{result.suite}] {result.name}: {result.detail}\n")
    sys.stdout.write(f"{len(results) - len(failed)}/{len(results)} checks passed\n")
    return 3 if failed else 0


def _dispatch(args: argparse.Namespace) -> int:
    task = SUBCOMMANDS[args.command]
    if task is Task.SELF_CHECK and args.config is None:
        return _selfcheck(args.seed or 0)
    try:
        raw = args.config.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read configuration {args.config}: {exc}") from exc
    config = validate_config(raw, overrides=_overrides(args))
    if task is Task.SELF_CHECK:
        return _selfcheck(config.seed)
    runs.execute(config)
    return 0


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one subcommand; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        return _dispatch(args)
    except ConfigValidationError as exc:
        for error in exc.errors:
            logger.error("Invalid configuration: %s", error)
        return exc.exit_code
    except PuqError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except ValueError as exc:
        logger.error("Invalid settings: %s", exc)
        return ConfigurationError.exit_code
    except SystemExit as exc:
        # --help exits through argparse
        return int(exc.code or 0)
