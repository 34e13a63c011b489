"""
実験ジョブの受付
サブコマンド = 実験名。--config の JSON に --seed / --workers / --out を上書きして
ExperimentConfig を作り、job_processor.run → table_writer.emit_tables に渡す。
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from pydantic import ValidationError

from app.models.errors import LabError
from app.models.experiment import EXPERIMENTS, ExperimentConfig
from app.services import job_processor
from app.services.model_library import list_models
from app.services.table_writer import emit_tables

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INVALID = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochavg",
        description="Stochastic averaging lab: perturbed integrable systems under multiplicative noise",
    )
    parser.add_argument("--list-models", action="store_true", help="print shipped systems and exit")
    sub = parser.add_subparsers(dest="experiment", metavar="EXPERIMENT")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--workers", type=int, help="worker process count override")
        p.add_argument("--out", type=str, help="output directory override")
    return parser


def load_config(experiment: str, path: Path | None, overrides: dict[str, Any]) -> ExperimentConfig:
    """設定ファイルを読み、CLI の上書きを当てて検証する。"""
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise LabError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise LabError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise LabError(f"config {path} must be a JSON object")
    file_experiment = doc.get("experiment")
    if file_experiment is not None and file_experiment != experiment:
        raise LabError(f"config is for experiment {file_experiment!r}, not {experiment!r}")
    doc["experiment"] = experiment
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(doc)


def _report(error_class: str, message: str, fields: list[dict[str, Any]] | None = None) -> None:
    payload = {"error_class": error_class, "message": message, "fields": fields or []}
    print(json.dumps(payload), file=sys.stderr)


def dispatch(argv: Sequence[str] | None = None) -> int:
    """CLI 1 回分を処理して終了コードを返す。"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.list_models:
        print(json.dumps(list_models(), indent=2))
        return EXIT_OK
    if args.experiment is None:
        parser.print_help(sys.stderr)
        return EXIT_INVALID

    try:
        config = load_config(
            args.experiment,
            args.config,
            {"master_seed": args.seed, "workers": args.workers, "output_dir": args.out},
        )
        bundle = job_processor.run(config)
        manifest = emit_tables(bundle, config.output_dir)
    except ValidationError as e:
        fields = [{"field": ".".join(str(p) for p in err["loc"]), "message": err["msg"]} for err in e.errors()]
        logger.error("config rejected: experiment=%s errors=%d", args.experiment, len(fields))
        _report("validation", "invalid experiment config", fields)
        return EXIT_INVALID
    except LabError as e:
        logger.error("experiment failed: experiment=%s error_class=%s message=%s", args.experiment, e.error_class, e)
        _report(e.error_class, str(e), [{"field": k, "message": repr(v)} for k, v in e.context.items() if v is not None])
        return EXIT_INVALID
    except Exception as e:
        logger.exception("unexpected failure: experiment=%s", args.experiment)
        _report("internal", str(e))
        return EXIT_UNEXPECTED

    print(json.dumps({"experiment": bundle.experiment, "manifest": str(manifest), "flags": bundle.flags}))
    return EXIT_OK
