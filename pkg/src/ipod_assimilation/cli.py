#!/usr/bin/env python3
"""
ipod-assim: configuration-driven experiment runner

Commands:
  run <config.yaml> [--dry-run]      execute one experiment, write CSV/JSON/NPZ artifacts
  summarize <run-dir>                print the summary table of a finished run
  sweep <config.yaml> --param k=v1,v2  fan one config out over parameter values

Environment (a .env file is honoured):
  IPODA_OUTPUT_ROOT    output root (overrides output_dir in the config)
  IPODA_LOG_LEVEL      logging level (default INFO)
  IPODA_LOG_FORMAT     text | json
  IPODA_SWEEP_WORKERS  default worker threads for sweep (default 2)

Exit codes: 0 success, 2 config error, 3 invariant failure, 1 any other error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from dotenv import load_dotenv

from .config import ExperimentConfig, dump_config, load_config, parse_override, with_override
from .errors import ConfigError, InvariantFailure, IpodaError, describe_exception
from .experiments import emit_summary, execute, planned_artifacts

load_dotenv()

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


# ---- Logging ----
def _configure_logger(structured: bool = False) -> logging.Logger:
    level = os.getenv("IPODA_LOG_LEVEL", "INFO").upper()
    logger = logging.getLogger("ipod-assim")
    if logger.handlers:  # avoid duplicate handlers if reconfiguring
        for h in list(logger.handlers):
            logger.removeHandler(h)
    handler = logging.StreamHandler(stream=sys.stdout)
    if structured:
        # JSON lines: {"ts":..., "level":..., "msg":..., "name":...}
        class JsonFormatter(logging.Formatter):
            def format(self, record: logging.LogRecord) -> str:
                payload = {
                    "ts": int(record.created * 1000),
                    "level": record.levelname,
                    "msg": record.getMessage(),
                    "name": record.name,
                }
                if record.exc_info:
                    payload["exc"] = self.formatException(record.exc_info)
                return json.dumps(payload)

        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False
    return logger


logger = _configure_logger(structured=os.getenv("IPODA_LOG_FORMAT", "text").lower() == "json")


def output_root(cfg: ExperimentConfig, override: str | None = None) -> Path:
    return Path(override or os.getenv("IPODA_OUTPUT_ROOT") or cfg.output_dir)


def _exit_code(exc: IpodaError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, InvariantFailure):
        return EXIT_INVARIANT
    return EXIT_ERROR


def run_experiment(config_path: str | Path, *, output_dir: str | None = None, dry_run: bool = False) -> int:
    """Validate and execute one experiment; returns the process exit status."""
    try:
        cfg = load_config(config_path)
        run_dir = output_root(cfg, output_dir) / cfg.name
        if dry_run:
            logger.info(
                "Dry-run: config valid, nothing computed. Planned outputs (%s):\n%s",
                cfg.kind,
                "\n".join(f" - {p}" for p in planned_artifacts(cfg, run_dir)),
            )
            return EXIT_OK
        execute(cfg, run_dir)
        (run_dir / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
        sys.stdout.write(emit_summary(run_dir))
        return EXIT_OK
    except IpodaError as e:
        logger.error("%s", e.describe())
        return _exit_code(e)
    except Exception as e:
        logger.error("%s", describe_exception(e))
        logger.debug("Traceback", exc_info=e)
        return EXIT_ERROR


def _sweep(config_path: str, specs: list[str], workers: int, output_dir: str | None) -> int:
    try:
        base = load_config(config_path)
        variants: list[ExperimentConfig] = [base]
        for spec in specs:
            key, values = parse_override(spec)
            variants = [with_override(v, key, val, name_suffix=f"{key}={val}") for v in variants for val in values]
    except IpodaError as e:
        logger.error("%s", e.describe())
        return _exit_code(e)

    root = output_root(base, output_dir)

    def one(cfg: ExperimentConfig) -> int:
        run_dir = root / base.name / cfg.name
        try:
            execute(cfg, run_dir)
            (run_dir / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
            return EXIT_OK
        except IpodaError as e:
            logger.error("%s: %s", cfg.name, e.describe())
            return _exit_code(e)
        except Exception as e:
            logger.error("%s: %s", cfg.name, describe_exception(e))
            logger.debug("Traceback", exc_info=e)
            return EXIT_ERROR

    logger.info("Sweep: %d run(s) on %d worker(s)", len(variants), workers)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        codes = list(ex.map(one, variants))
    for cfg, code in zip(variants, codes):
        logger.info("Sweep run %s -> exit %d", cfg.name, code)
    return max(codes, default=EXIT_OK)


def _summarize(run_dir: str) -> int:
    try:
        sys.stdout.write(emit_summary(run_dir))
        return EXIT_OK
    except IpodaError as e:
        logger.error("%s", e.describe())
        return _exit_code(e)
    except Exception as e:
        logger.error("%s", describe_exception(e))
        logger.debug("Traceback", exc_info=e)
        return EXIT_ERROR


# ---- Main flow ----
def main(argv: list[str] | None = None) -> int:
    """Main entry point for ipod-assim."""
    ap = argparse.ArgumentParser(prog="ipod-assim", description="Incremental POD compression for inexact-gradient data assimilation")
    ap.add_argument("--log-json", action="store_true", help="Emit structured JSON logs to stdout")
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="Run one experiment from a YAML config")
    p_run.add_argument("config", help="Experiment config (YAML)")
    p_run.add_argument("--dry-run", action="store_true", help="Validate the config and show planned outputs without computing")
    p_run.add_argument("--output-dir", default=None, help="Output root (default: IPODA_OUTPUT_ROOT or output_dir from the config)")

    p_sum = sub.add_parser("summarize", help="Print the summary table of a finished run")
    p_sum.add_argument("run_dir", help="Run directory containing summary.json")

    p_sweep = sub.add_parser("sweep", help="Run a config over parameter values")
    p_sweep.add_argument("config", help="Experiment config (YAML)")
    p_sweep.add_argument("--param", action="append", required=True, help="Override key.path=v1,v2,... (repeatable, cartesian product)")
    p_sweep.add_argument(
        "--workers", type=int, default=int(os.getenv("IPODA_SWEEP_WORKERS", "2")), help="Worker threads (default 2)"
    )
    p_sweep.add_argument("--output-dir", default=None, help="Output root")

    args = ap.parse_args(argv)

    # Reconfigure logger if JSON requested via CLI flag
    if args.log_json:
        _configure_logger(structured=True)

    if args.command == "run":
        return run_experiment(args.config, output_dir=args.output_dir, dry_run=args.dry_run)
    if args.command == "summarize":
        return _summarize(args.run_dir)
    return _sweep(args.config, args.param, args.workers, args.output_dir)
