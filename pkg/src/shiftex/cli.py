"""Command-line entry point: run experiments, calibrate detection thresholds,
and audit the assignment heuristic's optimality gap.

Commands exit 0 on success, 1 on a runtime failure, and 2 on a usage or
config error. Nothing outside the output directory is ever written, and
every file produced is echoed to stdout, one path per line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .aggregator import Thresholds
from .assignment import problem_from_json, solve_exact, solve_greedy
from .harness import (
    MethodSpec,
    RunConfig,
    calibration_summary,
    run_experiment,
    write_run,
)
from .models import TrainConfig
from .streams import ShiftEvent, ShiftSchedule, transform_from_config

log = logging.getLogger("shiftex")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

CONFIG_KEYS = frozenset(
    {
        "seed",
        "parties",
        "feature_dim",
        "classes",
        "hidden_dim",
        "windows",
        "samples_per_window",
        "rounds_per_window",
        "bootstrap_rounds",
        "train_fraction",
        "participant_fraction",
        "mean_scale",
        "learning_rate",
        "local_epochs",
        "batch_size",
        "prox_coefficient",
        "methods",
        "schedule",
        "p_value",
        "thresholds",
        "m_profile",
        "m_signature",
        "calibration_splits",
        "out_dir",
    }
)

_INT_KEYS = (
    "seed",
    "parties",
    "feature_dim",
    "classes",
    "hidden_dim",
    "windows",
    "samples_per_window",
    "rounds_per_window",
    "bootstrap_rounds",
    "local_epochs",
    "batch_size",
    "m_profile",
    "m_signature",
    "calibration_splits",
)

_FLOAT_KEYS = (
    "train_fraction",
    "participant_fraction",
    "mean_scale",
    "learning_rate",
    "prox_coefficient",
    "p_value",
)


class ConfigError(Exception):
    """Bad config file, override, or environment value; maps to exit 2."""


def _as_int(key: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"config field {key!r} must be an integer, got {value!r}")
    return int(value)


def _as_float(key: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config field {key!r} must be a number, got {value!r}")
    return float(value)


def parse_override(text: str) -> tuple[str, object]:
    """Split key=value; the value parses as JSON when it can, else as a string."""
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error in {path} at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(obj).__name__}")
    return obj


def _schedule_from_config(items, windows: int) -> ShiftSchedule:
    events = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise ConfigError(f"schedule[{i}] must be an object, got {type(item).__name__}")
        unknown = set(item) - {"window", "affected_fraction", "covariate", "label_alpha"}
        if unknown:
            raise ConfigError(f"schedule[{i}] has unknown keys: {sorted(unknown)}")
        if "window" not in item:
            raise ConfigError(f"schedule[{i}] is missing the window index")
        try:
            covariate = (
                transform_from_config(item["covariate"])
                if item.get("covariate") is not None
                else None
            )
            events.append(
                ShiftEvent(
                    window_index=_as_int(f"schedule[{i}].window", item["window"]),
                    affected_fraction=_as_float(
                        f"schedule[{i}].affected_fraction",
                        item.get("affected_fraction", 0.5),
                    ),
                    covariate=covariate,
                    label_alpha=(
                        _as_float(f"schedule[{i}].label_alpha", item["label_alpha"])
                        if item.get("label_alpha") is not None
                        else None
                    ),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"schedule[{i}]: {exc}") from exc
    try:
        return ShiftSchedule(tuple(events), horizon=windows)
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from exc


def _methods_from_config(raw) -> tuple[MethodSpec, ...]:
    if isinstance(raw, str):
        raw = [part for part in raw.split(",") if part]
    if not isinstance(raw, list):
        raise ConfigError(f"config field 'methods' must be a list of kinds, got {raw!r}")
    try:
        return tuple(MethodSpec(str(kind)) for kind in raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _thresholds_from_config(raw) -> Thresholds:
    if not isinstance(raw, dict):
        raise ConfigError("config field 'thresholds' must be an object")
    known = {
        "delta_cov",
        "delta_label",
        "epsilon_match",
        "tau_merge",
        "gamma_min_cluster",
        "u_max",
        "lambda_open",
        "mu_balance",
        "ema_beta",
        "participant_fraction",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"thresholds has unknown keys: {sorted(unknown)}")
    for required in ("delta_cov", "delta_label"):
        if required not in raw:
            raise ConfigError(f"thresholds needs {required!r} when given explicitly")
    try:
        return Thresholds(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"thresholds: {exc}") from exc


def config_from_dict(obj: dict) -> RunConfig:
    """Build a validated run config from a flat JSON document."""
    unknown = set(obj) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    kwargs: dict = {}
    for key in _INT_KEYS:
        if key in obj:
            kwargs[key] = _as_int(key, obj[key])
    for key in _FLOAT_KEYS:
        if key in obj:
            kwargs[key] = _as_float(key, obj[key])

    defaults = TrainConfig(learning_rate=0.5, local_epochs=3, batch_size=32)
    try:
        train_cfg = TrainConfig(
            learning_rate=kwargs.pop("learning_rate", defaults.learning_rate),
            local_epochs=kwargs.pop("local_epochs", defaults.local_epochs),
            batch_size=kwargs.pop("batch_size", defaults.batch_size),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    if "methods" in obj:
        kwargs["methods"] = _methods_from_config(obj["methods"])
    if "thresholds" in obj and obj["thresholds"] is not None:
        kwargs["thresholds"] = _thresholds_from_config(obj["thresholds"])
    if "out_dir" in obj:
        if not isinstance(obj["out_dir"], str) or not obj["out_dir"]:
            raise ConfigError("config field 'out_dir' must be a nonempty string")
        kwargs["out_dir"] = obj["out_dir"]

    # schedule: absent or null -> the default alternating schedule;
    # an explicit list ([] included) is parsed literally, so [] is shift-free
    windows = kwargs.get("windows", RunConfig.windows)
    if obj.get("schedule") is not None:
        if not isinstance(obj["schedule"], list):
            raise ConfigError("config field 'schedule' must be a list of events or null")
        kwargs["schedule"] = _schedule_from_config(obj["schedule"], windows)

    try:
        return RunConfig(train_cfg=train_cfg, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def resolve_config(args) -> RunConfig:
    """Config file, then --seed/--out-dir flags, then --override pairs."""
    obj = load_config_file(args.config) if args.config else {}
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.out_dir is not None:
        obj["out_dir"] = str(args.out_dir)
    for text in args.override or ():
        key, value = parse_override(text)
        obj[key] = value
    config = config_from_dict(obj)
    log.debug("resolved config: %s", config)
    return config


def cmd_run(args) -> int:
    config = resolve_config(args)
    log.info(
        "running %d method(s), %d parties, %d windows, seed %d",
        len(config.methods), config.parties, config.windows, config.seed,
    )
    result = run_experiment(config)
    paths = write_run(config.out_dir, result)
    for path in paths:
        print(path)
    return 0


def cmd_calibrate(args) -> int:
    config = resolve_config(args)
    log.info("calibrating thresholds at p=%g, seed %d", config.p_value, config.seed)
    summary = calibration_summary(config)
    print(f"delta_cov {summary['delta_cov']:.6g}")
    print(f"delta_label {summary['delta_label']:.6g}")
    for channel in ("delta_cov", "delta_label"):
        stats = summary["null"][channel]
        print(
            f"null {channel}: mean {stats['mean']:.6g} "
            f"std {stats['std']:.6g} max {stats['max']:.6g}"
        )
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "thresholds.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(path)
    return 0


def cmd_gap(args) -> int:
    path = Path(args.corpus)
    if not path.is_file():
        raise ConfigError(f"corpus file not found: {path}")
    try:
        corpus = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"corpus parse error in {path} at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(corpus, list):
        raise ConfigError("corpus root must be a JSON list of problems")

    gaps = []
    skipped = 0
    for i, obj in enumerate(corpus):
        try:
            problem = problem_from_json(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"corpus[{i}]: {exc}") from exc
        try:
            exact = solve_exact(problem)
        except ValueError as exc:
            # instances beyond the enumeration envelope are reported, not fatal
            print(f"instance {i}: skipped ({exc})")
            skipped += 1
            continue
        greedy = solve_greedy(problem)
        if exact.objective > 0:
            gap = greedy.objective / exact.objective
        else:
            gap = 1.0 if greedy.objective <= 1e-12 else float("inf")
        gaps.append(gap)
        print(
            f"instance {i}: exact {exact.objective:.6f} "
            f"greedy {greedy.objective:.6f} gap {gap:.4f}"
        )

    if not gaps:
        print(f"0 instances ({skipped} skipped)" if skipped else "0 instances")
        return 0
    print(
        f"{len(gaps)} instances ({skipped} skipped): "
        f"mean gap {sum(gaps) / len(gaps):.4f} max gap {max(gaps):.4f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftex",
        description="Deterministic federated-learning lab for streaming distribution shift.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--seed", type=int, metavar="INT", help="override the run seed")
        p.add_argument("--out-dir", metavar="PATH", help="override the output directory")
        p.add_argument(
            "--override",
            action="append",
            metavar="K=V",
            help="override one config field (repeatable); values parse as JSON",
        )

    run = sub.add_parser("run", help="run the full experiment and write metrics")
    add_config_flags(run)
    run.set_defaults(func=cmd_run)

    cal = sub.add_parser("calibrate", help="bootstrap only; report and write thresholds")
    add_config_flags(cal)
    cal.set_defaults(func=cmd_calibrate)

    gap = sub.add_parser("gap", help="exact-vs-greedy audit over a problem corpus")
    gap.add_argument("corpus", metavar="PATH", help="JSON list of serialized problems")
    gap.set_defaults(func=cmd_gap)

    return parser


def _setup_logging() -> None:
    raw = os.environ.get("SHIFTEX_LOG", "error").lower()
    if raw not in _LOG_LEVELS:
        raise ConfigError(
            f"SHIFTEX_LOG must be one of {sorted(_LOG_LEVELS)}, got {raw!r}"
        )
    logging.basicConfig(
        level=_LOG_LEVELS[raw],
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure after a valid config
        log.error("run failed: %s", exc, exc_info=log.isEnabledFor(logging.DEBUG))
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
