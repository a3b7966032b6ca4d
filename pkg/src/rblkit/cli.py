"""Command-line interface.

Subcommands:

- ``rbl run <config.json> [--out DIR] [--workers N] [--seed S]``:
  execute the experiment and write trials.csv / summary.json / plotdata.
- ``rbl validate <config.json>``: check the config and list every
  violation.
- ``rbl crlb <config.json>``: print the pose-parameter CRLB per noise
  level as JSON, without running any trials.

Exit codes: 0 success, 2 validation failure, 1 I/O failure.
``RBL_WORKERS`` is the fallback for ``--workers``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .crlb import crlb_numeric
from .exceptions import ConfigValidationError, RblError
from .harness import ExperimentConfig, emit_outputs, load_config, run_experiment

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rbl", description="Rigid-body localization experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a Monte Carlo experiment")
    run_p.add_argument("config", help="experiment config JSON")
    run_p.add_argument("--out", default=None, help="output directory (overrides config)")
    run_p.add_argument("--workers", type=int, default=None, help="worker processes")
    run_p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")

    val_p = sub.add_parser("validate", help="validate a config without running")
    val_p.add_argument("config", help="experiment config JSON")

    crlb_p = sub.add_parser("crlb", help="evaluate the CRLB only")
    crlb_p.add_argument("config", help="experiment config JSON")
    return parser


def _load(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise OSError(f"config file not found: {path}")
    return load_config(path)


def _resolve_workers(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("RBL_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _with_seed(config: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return config
    from dataclasses import replace

    return replace(config, master_seed=seed)


def _cmd_run(args) -> int:
    config = _with_seed(_load(args.config), args.seed)
    out_dir = args.out or config.output_dir or "out"
    workers = _resolve_workers(args.workers)
    results, stats = run_experiment(config, workers=workers)
    written = emit_outputs(results, stats, out_dir, emit_timing=config.emit_timing)
    n_conv = sum(r.converged for r in results)
    print(f"ran {len(results)} trials ({n_conv} converged); outputs in {out_dir}")
    for name in ("trials", "summary"):
        print(f"  {written[name]}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    _load(args.config)
    print("config OK")
    return EXIT_OK


def _cmd_crlb(args) -> int:
    config = _load(args.config)
    n_angles = 1 if config.scenario.anchors.dim == 2 else 3
    entries = []
    for sigma in config.sigmas:
        if sigma <= 0:
            continue
        for b, (tpl, pose) in enumerate(
            zip(config.scenario.templates, config.scenario.true_poses)
        ):
            try:
                bound = crlb_numeric(
                    pose,
                    tpl,
                    config.scenario.anchors,
                    config.modality,
                    sigma,
                    rssi_params=config.rssi_model,
                )
            except RblError as exc:
                entries.append({"sigma": sigma, "body": b, "error": str(exc)})
                continue
            entries.append(
                {
                    "sigma": sigma,
                    "body": b,
                    "angle_rmse": float(
                        np.sqrt(np.trace(bound[:n_angles, :n_angles]) / n_angles)
                    ),
                    "trans_rmse": float(np.sqrt(np.trace(bound[n_angles:, n_angles:]))),
                    "covariance": bound.tolist(),
                }
            )
    print(json.dumps({"label": config.label, "modality": config.modality, "bounds": entries}, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "validate":
            return _cmd_validate(args)
        return _cmd_crlb(args)
    except ConfigValidationError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
