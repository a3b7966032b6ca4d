"""Declarative Monte Carlo experiments with deterministic outputs.

An :class:`ExperimentConfig` (a versioned JSON document) names a
scenario (templates, true poses, anchors, optional soft constraints),
a measurement modality, a noise grid, the estimators to run, and a
trial count. :func:`run_experiment` executes every
(estimator, sigma, trial) cell with a seed derived by a stable hash of
``(master_seed, estimator, sigma_index, trial_index)``, so any single
trial can be replayed externally and results never depend on execution
order or worker count. :func:`emit_outputs` writes ``trials.csv``,
``summary.json`` (per-cell statistics with bootstrap intervals and a
CRLB overlay where defined), and per-estimator ``plotdata/*.csv``
series ready for any plotting tool.

Wall-clock time is recorded per trial in memory; by default the
emitted ``wall_s`` column holds a fixed 0.0 placeholder so output
bytes depend only on ``(config, master_seed)``. Set
``"emit_timing": true`` in the config to write measured times at the
cost of byte-reproducibility.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .crlb import crlb_numeric
from .estimators import (
    EstimationResult,
    doa_rbl_estimate,
    point_ls_locate,
    range_rbl_cwls,
)
from .exceptions import ConfigValidationError, RblError
from .geometry import (
    Pose,
    RigidBodyTemplate,
    angle_difference,
    apply_pose,
    procrustes_align,
    template_from_dict,
)
from .measurements import AnchorSet, NoiseSpec, RssiModelParams, gen_doa, gen_range, gen_rssi
from .rng import derive_rng, stable_hash64
from .softbodies import SoftConstraint, joint_estimate_soft

__all__ = [
    "ESTIMATOR_NAMES",
    "ScenarioSpec",
    "ExperimentConfig",
    "TrialResult",
    "SummaryStats",
    "load_config",
    "run_experiment",
    "emit_outputs",
]

ESTIMATOR_NAMES = ("point_ls", "doa_rbl", "range_cwls", "joint_soft")

_MODALITY_COMPAT = {
    "point_ls": {"range", "doa", "rssi"},
    "doa_rbl": {"doa"},
    "range_cwls": {"range"},
    "joint_soft": {"range", "doa", "rssi"},
}

# Estimators whose pose parameters crlb_numeric bounds directly.
_CRLB_ESTIMATORS = {"doa_rbl", "range_cwls"}

_TRIALS_HEADER = "estimator,sigma,trial,angle_err,trans_err,node_rmse,objective,converged,wall_s"


@dataclass(frozen=True)
class ScenarioSpec:
    """Ground truth for one experiment: bodies, poses, anchors, couplings."""

    templates: tuple[RigidBodyTemplate, ...]
    true_poses: tuple[Pose, ...]
    anchors: AnchorSet
    soft_constraints: tuple[SoftConstraint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        object.__setattr__(self, "true_poses", tuple(self.true_poses))
        object.__setattr__(self, "soft_constraints", tuple(self.soft_constraints))


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully declarative description of one Monte Carlo study."""

    modality: str
    sigmas: tuple[float, ...]
    trials: int
    master_seed: int
    estimators: tuple[str, ...]
    scenario: ScenarioSpec
    label: str = "experiment"
    nlos_prob: float = 0.0
    nlos_bias: float = 0.0
    rssi_model: RssiModelParams | None = None
    output_dir: str | None = None
    emit_timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "estimators", tuple(self.estimators))

    def noise_for(self, sigma: float) -> NoiseSpec:
        return NoiseSpec(sigma=sigma, nlos_prob=self.nlos_prob, nlos_bias=self.nlos_bias)


@dataclass
class TrialResult:
    """Metrics of one (estimator, sigma, trial) cell."""

    estimator: str
    sigma: float
    sigma_index: int
    trial: int
    angle_err: float
    trans_err: float
    node_rmse: float
    objective: float
    converged: bool
    wall_s: float


@dataclass
class SummaryStats:
    """Per-cell aggregate statistics with bootstrap intervals."""

    label: str
    master_seed: int
    trials_per_cell: int
    cells: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "master_seed": self.master_seed,
            "trials_per_cell": self.trials_per_cell,
            "cells": self.cells,
        }


# ---------------------------------------------------------------------------
# Config parsing and validation
# ---------------------------------------------------------------------------


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Parse and validate a config document.

    Raises:
        ConfigValidationError: Listing every violation found, not just
            the first.
    """
    violations: list[str] = []

    def check(cond, message):
        if not cond:
            violations.append(message)
        return cond

    if not check(isinstance(doc, dict), "config must be a JSON object"):
        raise ConfigValidationError(violations)

    check(doc.get("schema") == 1, f"schema must be 1, got {doc.get('schema')!r}")

    modality = doc.get("modality")
    check(modality in ("range", "doa", "rssi"), f"modality must be range|doa|rssi, got {modality!r}")

    sigmas = doc.get("sigmas")
    if check(isinstance(sigmas, list) and len(sigmas) >= 1, "sigmas must be a non-empty list"):
        for s in sigmas:
            check(isinstance(s, (int, float)) and s >= 0, f"sigma values must be >= 0, got {s!r}")
    else:
        sigmas = []

    trials = doc.get("trials")
    check(isinstance(trials, int) and trials >= 1, f"trials must be an integer >= 1, got {trials!r}")

    master_seed = doc.get("master_seed")
    check(isinstance(master_seed, int), f"master_seed must be an integer, got {master_seed!r}")

    estimators = doc.get("estimators")
    if check(
        isinstance(estimators, list) and len(estimators) >= 1,
        "estimators must be a non-empty list",
    ):
        for name in estimators:
            if not check(name in ESTIMATOR_NAMES, f"unknown estimator {name!r} (known: {ESTIMATOR_NAMES})"):
                continue
            if modality in ("range", "doa", "rssi"):
                check(
                    modality in _MODALITY_COMPAT[name],
                    f"estimator {name!r} does not support modality {modality!r}",
                )
    else:
        estimators = []

    scenario_doc = doc.get("scenario")
    templates: list[RigidBodyTemplate] = []
    poses: list[Pose] = []
    anchors = None
    constraints: list[SoftConstraint] = []
    if check(isinstance(scenario_doc, dict), "scenario must be an object"):
        tpl_docs = scenario_doc.get("templates")
        if check(isinstance(tpl_docs, list) and len(tpl_docs) >= 1, "scenario.templates must be a non-empty list"):
            for idx, tdoc in enumerate(tpl_docs):
                try:
                    templates.append(template_from_dict(tdoc))
                except (RblError, KeyError, TypeError, ValueError) as exc:
                    violations.append(f"scenario.templates[{idx}]: {exc}")
        pose_docs = scenario_doc.get("true_poses")
        if check(isinstance(pose_docs, list), "scenario.true_poses must be a list"):
            for idx, pdoc in enumerate(pose_docs):
                try:
                    poses.append(Pose(tuple(pdoc["angles"]), np.asarray(pdoc["translation"], dtype=float)))
                except (RblError, KeyError, TypeError, ValueError) as exc:
                    violations.append(f"scenario.true_poses[{idx}]: {exc}")
        if templates and poses and len(templates) != len(poses):
            violations.append(
                f"{len(templates)} templates but {len(poses)} true_poses"
            )
        try:
            anchors = AnchorSet(positions=np.asarray(scenario_doc.get("anchors", []), dtype=float).T)
        except (RblError, TypeError, ValueError) as exc:
            violations.append(f"scenario.anchors: {exc}")
        for idx, cdoc in enumerate(scenario_doc.get("soft_constraints", []) or []):
            try:
                constraints.append(
                    SoftConstraint(
                        kind=cdoc["kind"],
                        body_pair=tuple(cdoc["body_pair"]),
                        lower=float(cdoc["lower"]),
                        upper=float(cdoc["upper"]),
                        weight=float(cdoc["weight"]),
                        reference_points=(
                            tuple(cdoc["reference_points"])
                            if cdoc.get("reference_points") is not None
                            else None
                        ),
                    )
                )
            except (RblError, KeyError, TypeError, ValueError) as exc:
                violations.append(f"scenario.soft_constraints[{idx}]: {exc}")
        for idx, c in enumerate(constraints):
            i, j = c.body_pair
            if templates and not (0 <= i < len(templates) and 0 <= j < len(templates)):
                violations.append(
                    f"scenario.soft_constraints[{idx}] references bodies {c.body_pair} "
                    f"but only {len(templates)} exist"
                )

    if templates and poses and anchors is not None:
        dims = {t.dim for t in templates} | {p.dim for p in poses} | {anchors.dim}
        if len(dims) != 1:
            violations.append(f"inconsistent dimensions in scenario: {dims}")
        if modality == "doa" and anchors.dim != 2:
            violations.append("doa modality requires a 2D scenario")

    rssi_model = None
    if modality == "rssi":
        rdoc = doc.get("rssi_model")
        if check(isinstance(rdoc, dict), "rssi modality requires an rssi_model object"):
            try:
                rssi_model = RssiModelParams(
                    p0=float(rdoc["p0"]), d0=float(rdoc["d0"]), eta=float(rdoc["eta"])
                )
            except (RblError, KeyError, TypeError, ValueError) as exc:
                violations.append(f"rssi_model: {exc}")

    nlos_prob = doc.get("nlos_prob", 0.0)
    nlos_bias = doc.get("nlos_bias", 0.0)
    check(
        isinstance(nlos_prob, (int, float)) and 0.0 <= nlos_prob <= 1.0,
        f"nlos_prob must be in [0, 1], got {nlos_prob!r}",
    )
    check(
        isinstance(nlos_bias, (int, float)) and nlos_bias >= 0.0,
        f"nlos_bias must be >= 0, got {nlos_bias!r}",
    )

    if "joint_soft" in (estimators or []) and not constraints:
        violations.append("joint_soft estimator requires scenario.soft_constraints")

    if violations:
        raise ConfigValidationError(violations)

    scenario = ScenarioSpec(
        templates=tuple(templates),
        true_poses=tuple(poses),
        anchors=anchors,
        soft_constraints=tuple(constraints),
    )
    return ExperimentConfig(
        modality=modality,
        sigmas=tuple(float(s) for s in sigmas),
        trials=int(trials),
        master_seed=int(master_seed),
        estimators=tuple(estimators),
        scenario=scenario,
        label=str(doc.get("label", "experiment")),
        nlos_prob=float(nlos_prob),
        nlos_bias=float(nlos_bias),
        rssi_model=rssi_model,
        output_dir=doc.get("output", {}).get("dir") if isinstance(doc.get("output"), dict) else None,
        emit_timing=bool(doc.get("emit_timing", False)),
    )


def load_config(path) -> ExperimentConfig:
    """Load and validate a JSON experiment config from disk."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigValidationError([f"not valid JSON: {exc}"]) from exc
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# Trial execution
# ---------------------------------------------------------------------------


def trial_seed(master_seed: int, estimator: str, sigma_index: int, trial: int) -> int:
    """Stable per-trial seed; documented so external tools can replay."""
    return stable_hash64(master_seed, estimator, sigma_index, trial)


def _generate_observations(config: ExperimentConfig, sigma: float, seed: int):
    """One observation set per body, seeded per (trial seed, body index)."""
    noise = config.noise_for(sigma)
    out = []
    for b, (tpl, pose) in enumerate(
        zip(config.scenario.templates, config.scenario.true_poses)
    ):
        body = apply_pose(tpl, pose)
        body_seed = stable_hash64(seed, b)
        if config.modality == "range":
            out.append(gen_range(body, config.scenario.anchors, noise, body_seed))
        elif config.modality == "doa":
            out.append(gen_doa(body, config.scenario.anchors, noise, body_seed))
        else:
            out.append(gen_rssi(body, config.scenario.anchors, config.rssi_model, noise, body_seed))
    return out


def _pose_errors(estimate: EstimationResult, truth: Pose, template: RigidBodyTemplate):
    """(angle_err, trans_err) of an estimate; point estimates get the
    pose implied by Procrustes-fitting their node positions."""
    pose = estimate.pose
    if pose is None:
        pose, _ = procrustes_align(template, estimate.node_positions)
    angle_err = float(
        np.mean(np.abs(angle_difference(pose.rotation.angles, truth.rotation.angles)))
    )
    trans_err = float(np.linalg.norm(pose.translation - truth.translation))
    return angle_err, trans_err


def run_trial(config: ExperimentConfig, estimator: str, sigma_index: int, trial: int) -> TrialResult:
    """Execute one cell: derive the seed, generate data, estimate, score."""
    sigma = config.sigmas[sigma_index]
    seed = trial_seed(config.master_seed, estimator, sigma_index, trial)
    scenario = config.scenario
    start_time = time.perf_counter()
    try:
        obs_list = _generate_observations(config, sigma, seed)
        if estimator == "joint_soft":
            results, _ = joint_estimate_soft(
                obs_list,
                scenario.anchors,
                list(scenario.templates),
                list(scenario.soft_constraints),
                rssi_params=config.rssi_model,
            )
        else:
            results = []
            for obs, tpl in zip(obs_list, scenario.templates):
                if estimator == "point_ls":
                    results.append(
                        point_ls_locate(obs, scenario.anchors, rssi_params=config.rssi_model)
                    )
                elif estimator == "doa_rbl":
                    results.append(doa_rbl_estimate(obs, scenario.anchors, tpl))
                else:
                    results.append(range_rbl_cwls(obs, scenario.anchors, tpl))

        angle_errs, trans_errs, sq_node_errs, objective = [], [], [], 0.0
        converged = True
        for res, tpl, truth in zip(results, scenario.templates, scenario.true_poses):
            a_err, t_err = _pose_errors(res, truth, tpl)
            angle_errs.append(a_err)
            trans_errs.append(t_err)
            true_nodes = apply_pose(tpl, truth)
            sq_node_errs.extend(((res.node_positions - true_nodes) ** 2).sum(axis=0).tolist())
            objective += res.objective
            converged = converged and res.converged
        wall = time.perf_counter() - start_time
        return TrialResult(
            estimator=estimator,
            sigma=sigma,
            sigma_index=sigma_index,
            trial=trial,
            angle_err=float(np.mean(angle_errs)),
            trans_err=float(np.mean(trans_errs)),
            node_rmse=float(np.sqrt(np.mean(sq_node_errs))),
            objective=float(objective),
            converged=bool(converged),
            wall_s=wall,
        )
    except RblError:
        # A failed trial is data, not a crash: record and move on.
        wall = time.perf_counter() - start_time
        return TrialResult(
            estimator=estimator,
            sigma=sigma,
            sigma_index=sigma_index,
            trial=trial,
            angle_err=float("nan"),
            trans_err=float("nan"),
            node_rmse=float("nan"),
            objective=float("nan"),
            converged=False,
            wall_s=wall,
        )


_WORKER_CONFIG: ExperimentConfig | None = None


def _init_worker(config: ExperimentConfig) -> None:
    global _WORKER_CONFIG
    _WORKER_CONFIG = config


def _worker_task(task: tuple[str, int, int]) -> TrialResult:
    estimator, sigma_index, trial = task
    return run_trial(_WORKER_CONFIG, estimator, sigma_index, trial)


def run_experiment(
    config: ExperimentConfig, workers: int = 1
) -> tuple[list[TrialResult], SummaryStats]:
    """Run every (estimator, sigma, trial) cell and summarize.

    Results are sorted into deterministic order before returning, so
    the worker count never changes them (each trial is a pure function
    of its derived seed).
    """
    tasks = [
        (estimator, sigma_index, trial)
        for estimator in config.estimators
        for sigma_index in range(len(config.sigmas))
        for trial in range(config.trials)
    ]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(config,)
        ) as pool:
            results = list(pool.map(_worker_task, tasks, chunksize=16))
    else:
        results = [run_trial(config, *task) for task in tasks]

    order = {name: i for i, name in enumerate(config.estimators)}
    results.sort(key=lambda r: (order[r.estimator], r.sigma_index, r.trial))
    return results, summarize(results, config)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def _bootstrap_ci(values: np.ndarray, statistic, rng, n_resamples: int = 1000):
    point = float(statistic(values))
    n = values.size
    stats = np.empty(n_resamples)
    for i in range(n_resamples):
        sample = values[rng.integers(0, n, size=n)]
        stats[i] = statistic(sample)
    lo, hi = np.percentile(stats, [2.5, 97.5])
    # Percentile intervals must bracket the point estimate they describe.
    return point, float(min(lo, point)), float(max(hi, point))


def _metric_summary(values: np.ndarray, rng) -> dict:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return {"n": 0, "mean": None, "median": None, "rmse": None}
    mean, mean_lo, mean_hi = _bootstrap_ci(finite, np.mean, rng)
    med, med_lo, med_hi = _bootstrap_ci(finite, np.median, rng)
    rmse_fn = lambda v: float(np.sqrt(np.mean(v**2)))
    rmse, rmse_lo, rmse_hi = _bootstrap_ci(finite, rmse_fn, rng)
    return {
        "n": int(finite.size),
        "mean": mean,
        "mean_ci": [mean_lo, mean_hi],
        "median": med,
        "median_ci": [med_lo, med_hi],
        "rmse": rmse,
        "rmse_ci": [rmse_lo, rmse_hi],
    }


def _cell_crlb(config: ExperimentConfig, estimator: str, sigma: float):
    """Pose-RMSE lower bounds for the cell, or None where undefined."""
    if estimator not in _CRLB_ESTIMATORS or sigma <= 0:
        return None
    n_angles = 1 if config.scenario.anchors.dim == 2 else 3
    angle_vars, trans_traces = [], []
    try:
        for tpl, pose in zip(config.scenario.templates, config.scenario.true_poses):
            bound = crlb_numeric(
                pose, tpl, config.scenario.anchors, config.modality, sigma,
                rssi_params=config.rssi_model,
            )
            angle_vars.append(float(np.trace(bound[:n_angles, :n_angles]) / n_angles))
            trans_traces.append(float(np.trace(bound[n_angles:, n_angles:])))
    except RblError:
        return None
    return {
        "angle_rmse": float(np.sqrt(np.mean(angle_vars))),
        "trans_rmse": float(np.sqrt(np.mean(trans_traces))),
    }


def summarize(results: list[TrialResult], config: ExperimentConfig) -> SummaryStats:
    """Per-cell mean/median/RMSE with 95% bootstrap intervals (1000
    resamples, deterministically seeded), plus the CRLB overlay."""
    summary = SummaryStats(
        label=config.label, master_seed=config.master_seed, trials_per_cell=config.trials
    )
    for estimator in config.estimators:
        for sigma_index, sigma in enumerate(config.sigmas):
            cell_rows = [
                r
                for r in results
                if r.estimator == estimator and r.sigma_index == sigma_index
            ]
            rng = derive_rng(config.master_seed, "bootstrap", estimator, sigma_index)
            metrics = {
                name: _metric_summary(
                    np.array([getattr(r, name) for r in cell_rows], dtype=float), rng
                )
                for name in ("angle_err", "trans_err", "node_rmse")
            }
            summary.cells.append(
                {
                    "estimator": estimator,
                    "sigma": sigma,
                    "trials": len(cell_rows),
                    "converged": int(sum(r.converged for r in cell_rows)),
                    "metrics": metrics,
                    "crlb": _cell_crlb(config, estimator, sigma),
                }
            )
    return summary


# ---------------------------------------------------------------------------
# Output emission
# ---------------------------------------------------------------------------


def _atomic_write(path: str, content: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(content)
    os.replace(tmp, path)


def _fmt(value: float) -> str:
    return repr(float(value))


def emit_outputs(
    results: list[TrialResult],
    stats: SummaryStats,
    out_dir: str,
    emit_timing: bool = False,
) -> dict:
    """Write trials.csv, summary.json, and plotdata/*.csv under ``out_dir``.

    Files are written atomically (temp file + rename), and the summary
    content is fully built before any byte of it reaches disk.

    Returns:
        Mapping of logical names to the paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    plot_dir = os.path.join(out_dir, "plotdata")
    os.makedirs(plot_dir, exist_ok=True)

    lines = [_TRIALS_HEADER]
    for r in results:
        wall = r.wall_s if emit_timing else 0.0
        lines.append(
            ",".join(
                [
                    r.estimator,
                    _fmt(r.sigma),
                    str(r.trial),
                    _fmt(r.angle_err),
                    _fmt(r.trans_err),
                    _fmt(r.node_rmse),
                    _fmt(r.objective),
                    "1" if r.converged else "0",
                    _fmt(wall),
                ]
            )
        )
    trials_csv = "\n".join(lines) + "\n"

    summary_json = json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n"

    plot_files = {}
    by_estimator: dict[str, list[dict]] = {}
    for cell in stats.cells:
        by_estimator.setdefault(cell["estimator"], []).append(cell)
    for estimator, cells in by_estimator.items():
        rows = [
            "sigma,node_rmse,node_rmse_lo,node_rmse_hi,trans_rmse,angle_rmse,"
            "crlb_trans_rmse,crlb_angle_rmse"
        ]
        for cell in cells:
            node = cell["metrics"]["node_rmse"]
            trans = cell["metrics"]["trans_err"]
            angle = cell["metrics"]["angle_err"]
            crlb = cell["crlb"]
            if node["n"] == 0:
                values = [_fmt(cell["sigma"]), "", "", "", "", "", "", ""]
            else:
                values = [
                    _fmt(cell["sigma"]),
                    _fmt(node["rmse"]),
                    _fmt(node["rmse_ci"][0]),
                    _fmt(node["rmse_ci"][1]),
                    _fmt(trans["rmse"]),
                    _fmt(angle["rmse"]),
                    _fmt(crlb["trans_rmse"]) if crlb else "",
                    _fmt(crlb["angle_rmse"]) if crlb else "",
                ]
            rows.append(",".join(values))
        plot_files[estimator] = "\n".join(rows) + "\n"

    trials_path = os.path.join(out_dir, "trials.csv")
    summary_path = os.path.join(out_dir, "summary.json")
    _atomic_write(trials_path, trials_csv)
    _atomic_write(summary_path, summary_json)
    written = {"trials": trials_path, "summary": summary_path}
    for estimator, content in plot_files.items():
        path = os.path.join(plot_dir, f"{estimator}.csv")
        _atomic_write(path, content)
        written[f"plotdata/{estimator}"] = path
    return written
