"""Point-based baselines and rigid-body-constrained pose estimators.

Two families:

- :func:`point_ls_locate` estimates each node independently by
  Gauss-Newton on the raw measurement residuals (no rigidity), for any
  modality. This is the "standard" point-positioning baseline.
- :func:`doa_rbl_estimate` and :func:`range_rbl_cwls` estimate a single
  pose (rotation angles + translation) for the whole body, exploiting
  the known template so all nodes are constrained jointly.

The range estimator is a two-stage constrained weighted least squares:
a closed-form linear solve on squared ranges with the rotation relaxed
to a free matrix block, followed by SVD projection onto proper
rotations and Gauss-Newton refinement on the raw range residuals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    IdentifiabilityError,
    InvalidParameterError,
    RankDeficiencyError,
)
from .geometry import (
    Pose,
    RigidBodyTemplate,
    RotationParam,
    apply_pose,
    procrustes_align,
    rotation_angles_from_matrix,
    rotation_matrix,
    rotation_matrix_derivative,
    wrap_angle,
)
from .measurements import AnchorSet, ObservationSet, RssiModelParams
from .solvers import GaussNewtonResult, gauss_newton

__all__ = [
    "EstimationResult",
    "CwlsSystem",
    "pose_measurement_function",
    "pose_measurement_jacobian",
    "pose_residual_builder",
    "point_ls_locate",
    "doa_rbl_estimate",
    "build_range_cwls_system",
    "range_rbl_cwls",
]

_LOG10 = math.log(10.0)


@dataclass
class EstimationResult:
    """Outcome of one estimation run.

    Attributes:
        pose: Estimated pose, or None for point-based estimators.
        node_positions: ``(d, K)`` estimated node positions (consistent
            with ``pose`` via the forward transform when pose is set).
        objective: Final sum-of-squares cost.
        iterations: Gauss-Newton iterations spent (max across nodes for
            the point baseline).
        converged: Whether the declared tolerances were met.
        covariance_est: Optional parameter-covariance estimate
            ``sigma^2 (J^T J)^{-1}`` at the solution.
        diagnostics: Extra solver metadata (objective trace, stage
            flags, per-node details).
    """

    pose: Pose | None
    node_positions: np.ndarray
    objective: float
    iterations: int
    converged: bool
    covariance_est: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """JSON-ready summary (pose, node positions, trace length, flags)."""
        pose_doc = None
        if self.pose is not None:
            pose_doc = {
                "angles": list(self.pose.rotation.angles),
                "translation": self.pose.translation.tolist(),
            }
        trace = self.diagnostics.get("objective_trace", [])
        return {
            "pose": pose_doc,
            "node_positions": self.node_positions.T.tolist(),
            "objective": float(self.objective),
            "objective_trace_len": len(trace),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


# ---------------------------------------------------------------------------
# Measurement prediction and residuals
# ---------------------------------------------------------------------------


def _predict(modality, body, anchor_pos, rssi_params):
    """Noiseless forward model, ``(M, K)``. ``body`` is ``(d, K)``."""
    delta = body[:, None, :] - anchor_pos[:, :, None]  # (d, M, K)
    if modality == "doa":
        return np.arctan2(delta[1], delta[0])
    rho = np.sqrt((delta**2).sum(axis=0))
    if modality == "range":
        return rho
    if modality == "rssi":
        return rssi_params.p0 - 10.0 * rssi_params.eta * np.log10(rho / rssi_params.d0)
    raise InvalidParameterError(f"unknown modality {modality!r}")


def _prediction_position_grad(modality, body, anchor_pos, rssi_params):
    """d(prediction)/d(node position), shape ``(d, M, K)``."""
    delta = body[:, None, :] - anchor_pos[:, :, None]
    rho2 = (delta**2).sum(axis=0)
    rho2 = np.maximum(rho2, 1e-24)
    if modality == "doa":
        return np.stack([-delta[1] / rho2, delta[0] / rho2])
    rho = np.sqrt(rho2)
    if modality == "range":
        return delta / rho
    if modality == "rssi":
        return -(10.0 * rssi_params.eta / _LOG10) * delta / rho2
    raise InvalidParameterError(f"unknown modality {modality!r}")


def pose_measurement_function(
    template: RigidBodyTemplate,
    anchors: AnchorSet,
    modality: str,
    params: np.ndarray,
    rssi_params: RssiModelParams | None = None,
) -> np.ndarray:
    """Noiseless measurements at pose ``params``, flattened anchor-major."""
    d = template.dim
    n_angles = 1 if d == 2 else 3
    rot = RotationParam(tuple(params[:n_angles]))
    body = rotation_matrix(rot) @ template.nodes + params[n_angles:, None]
    return _predict(modality, body, anchors.positions, rssi_params).reshape(-1)


def pose_measurement_jacobian(
    template: RigidBodyTemplate,
    anchors: AnchorSet,
    modality: str,
    params: np.ndarray,
    rssi_params: RssiModelParams | None = None,
) -> np.ndarray:
    """Analytic ``d(measurement)/d(pose params)``, shape ``(M*K, n)``.

    Chains the measurement gradient w.r.t. node positions with the
    rotation-matrix angle derivatives (``ds_k/dangle_i = dQ_i c_k``,
    ``ds_k/dt = I``).
    """
    d = template.dim
    n_angles = 1 if d == 2 else 3
    rot = RotationParam(tuple(params[:n_angles]))
    body = rotation_matrix(rot) @ template.nodes + params[n_angles:, None]
    grad_s = _prediction_position_grad(modality, body, anchors.positions, rssi_params)
    m_count, k_count = grad_s.shape[1], grad_s.shape[2]
    jac = np.empty((m_count * k_count, n_angles + d))
    for i in range(n_angles):
        ds = rotation_matrix_derivative(rot, i) @ template.nodes  # (d, K)
        jac[:, i] = np.einsum("dmk,dk->mk", grad_s, ds).reshape(-1)
    for j in range(d):
        jac[:, n_angles + j] = grad_s[j].reshape(-1)
    return jac


def pose_residual_builder(
    obs: ObservationSet,
    anchors: AnchorSet,
    template: RigidBodyTemplate,
    rssi_params: RssiModelParams | None = None,
):
    """Residual and Jacobian closures over pose parameters.

    Parameters are the flat vector ``[angles..., t...]``. Residuals are
    ``observed - predicted`` flattened anchor-major, with DoA residuals
    wrapped to ``(-pi, pi]``.

    Returns:
        ``(residual_fn, jacobian_fn)``.
    """
    if obs.modality == "rssi" and rssi_params is None:
        raise InvalidParameterError("rssi residuals need RssiModelParams")
    if obs.values.shape != (anchors.num_anchors, template.num_nodes):
        raise DimensionMismatchError(
            f"values shape {obs.values.shape} != (M={anchors.num_anchors}, K={template.num_nodes})"
        )
    values = obs.values.reshape(-1)
    modality = obs.modality

    def residual_fn(params):
        res = values - pose_measurement_function(
            template, anchors, modality, params, rssi_params
        )
        if modality == "doa":
            res = wrap_angle(res)
        return res

    def jacobian_fn(params):
        return -pose_measurement_jacobian(template, anchors, modality, params, rssi_params)

    return residual_fn, jacobian_fn


def _point_residual_builder(values_col, anchor_pos, modality, rssi_params):
    """Residual/Jacobian closures over a single node position."""

    def residual_fn(p):
        pred = _predict(modality, p[:, None], anchor_pos, rssi_params)[:, 0]
        res = values_col - pred
        if modality == "doa":
            res = wrap_angle(res)
        return res

    def jacobian_fn(p):
        grad_s = _prediction_position_grad(modality, p[:, None], anchor_pos, rssi_params)
        return -grad_s[:, :, 0].T  # (M, d)

    return residual_fn, jacobian_fn


# ---------------------------------------------------------------------------
# Initialization helpers
# ---------------------------------------------------------------------------


def _bearing_lines_ls(bearings, anchor_pos):
    """LS intersection of bearing rays; None if rays are near-parallel.

    Each bearing from anchor ``a`` constrains the target to the line
    ``-sin(theta) (x - a_x) + cos(theta) (y - a_y) = 0``.
    """
    bearings = np.asarray(bearings, dtype=float).reshape(-1)
    normals = np.stack([-np.sin(bearings), np.cos(bearings)], axis=1)  # (n, 2)
    rhs = np.einsum("nd,dn->n", normals, anchor_pos)
    _, sv, _ = np.linalg.svd(normals, full_matrices=False)
    if sv[-1] < 1e-8 * max(sv[0], 1.0):
        return None
    sol, *_ = np.linalg.lstsq(normals, rhs, rcond=None)
    return sol


def _lateration_init(ranges, anchor_pos):
    """Linear multilateration from squared ranges; centroid on failure."""
    d, m_count = anchor_pos.shape
    if m_count < d + 1:
        return anchor_pos.mean(axis=1)
    a0 = anchor_pos[:, 0]
    design = 2.0 * (anchor_pos[:, 1:] - a0[:, None]).T
    rhs = (
        (anchor_pos[:, 1:] ** 2).sum(axis=0)
        - (a0**2).sum()
        - ranges[1:] ** 2
        + ranges[0] ** 2
    )
    sol, _, rank, _ = np.linalg.lstsq(design, rhs, rcond=None)
    if rank < d or not np.all(np.isfinite(sol)):
        return anchor_pos.mean(axis=1)
    return sol


def _rssi_to_ranges(values_col, params: RssiModelParams):
    return params.d0 * 10.0 ** ((params.p0 - values_col) / (10.0 * params.eta))


# ---------------------------------------------------------------------------
# Point-based baseline
# ---------------------------------------------------------------------------


def point_ls_locate(
    obs: ObservationSet,
    anchors: AnchorSet,
    init: np.ndarray | None = None,
    rssi_params: RssiModelParams | None = None,
    grad_tol: float = 1e-10,
    step_tol: float = 1e-12,
    max_iter: int = 200,
) -> EstimationResult:
    """Locate each node independently by nonlinear least squares.

    No rigidity constraint: node k is estimated from column k of the
    observations alone. The returned result has ``pose=None``.

    Args:
        obs: Measurements of any modality.
        anchors: Anchor positions.
        init: Optional starting position used for every node; when
            absent, bearings are triangulated and ranges multilaterated
            linearly (RSSI values are inverted to distances first).
        rssi_params: Path-loss parameters (required for RSSI).

    Raises:
        IdentifiabilityError: Too few anchors for the modality (DoA
            needs M >= 2; range and RSSI need M >= d + 1).
    """
    d = anchors.dim
    m_count = anchors.num_anchors
    if obs.modality == "doa":
        if m_count < 2:
            raise IdentifiabilityError(
                "bearing-only point localization needs at least 2 anchors: a "
                "single bearing leaves the whole ray feasible"
            )
    elif m_count < d + 1:
        raise IdentifiabilityError(
            f"{obs.modality} point localization needs at least {d + 1} anchors, got {m_count}"
        )
    if obs.modality == "rssi" and rssi_params is None:
        raise InvalidParameterError("rssi localization needs RssiModelParams")

    anchor_pos = anchors.positions
    k_count = obs.num_nodes
    positions = np.empty((d, k_count))
    per_node = []
    total_obj = 0.0
    iterations = 0
    converged = True

    for k in range(k_count):
        col = obs.values[:, k]
        if init is not None:
            start = np.asarray(init, dtype=float).reshape(d)
        elif obs.modality == "doa":
            start = _bearing_lines_ls(col, anchor_pos)
            if start is None:
                start = anchor_pos.mean(axis=1)
        else:
            ranges = col if obs.modality == "range" else _rssi_to_ranges(col, rssi_params)
            start = _lateration_init(ranges, anchor_pos)

        res_fn, jac_fn = _point_residual_builder(col, anchor_pos, obs.modality, rssi_params)
        gn = gauss_newton(
            res_fn, jac_fn, start, grad_tol=grad_tol, step_tol=step_tol, max_iter=max_iter
        )
        positions[:, k] = gn.x
        total_obj += gn.objective
        iterations = max(iterations, gn.iterations)
        converged = converged and gn.converged
        per_node.append(
            {
                "objective": gn.objective,
                "iterations": gn.iterations,
                "converged": gn.converged,
                "grad_norm": gn.grad_norm,
                "message": gn.message,
            }
        )

    return EstimationResult(
        pose=None,
        node_positions=positions,
        objective=total_obj,
        iterations=iterations,
        converged=converged,
        diagnostics={"per_node": per_node},
    )


# ---------------------------------------------------------------------------
# DoA rigid-body estimator
# ---------------------------------------------------------------------------


def _pick_best(candidates: list[GaussNewtonResult], tie_tol: float = 1e-12):
    """Lowest objective; ties broken by smallest |angle|, then lexicographic t."""
    best_obj = min(c.objective for c in candidates)
    tied = [c for c in candidates if c.objective <= best_obj + tie_tol]
    return min(
        tied,
        key=lambda c: (abs(wrap_angle(c.x[0])),) + tuple(c.x[1:]),
    )


def doa_rbl_estimate(
    obs: ObservationSet,
    anchors: AnchorSet,
    template: RigidBodyTemplate,
    init: Pose | None = None,
    n_starts: int = 8,
    grad_tol: float = 1e-10,
    step_tol: float = 1e-12,
    max_iter: int = 200,
) -> EstimationResult:
    """Estimate a 2D pose from bearing observations.

    Minimizes the sum of squared angle-wrapped bearing residuals over
    ``(alpha, t_x, t_y)`` by Gauss-Newton. When no initial pose is
    given, the solver multi-starts from ``n_starts`` evenly spaced
    rotation angles (translation seeded by a least-squares ray
    intersection) plus, when every node can be triangulated
    individually, a Procrustes fit to the triangulated nodes.

    Raises:
        IdentifiabilityError: If ``M * K < 3`` (fewer measurements than
            pose parameters; a single anchor-node pair constrains
            nothing but a ray).
    """
    if obs.modality != "doa":
        raise InvalidParameterError(f"expected doa observations, got {obs.modality!r}")
    if template.dim != 2:
        raise DimensionMismatchError("DoA rigid-body estimation is 2D only")
    m_count, k_count = anchors.num_anchors, template.num_nodes
    if m_count * k_count < 3:
        raise IdentifiabilityError(
            f"{m_count} anchor(s) x {k_count} node(s) give {m_count * k_count} bearings; "
            "at least 3 are needed for (alpha, t_x, t_y)"
        )

    res_fn, jac_fn = pose_residual_builder(obs, anchors, template)

    starts = []
    if init is not None:
        starts.append(init.as_params())
    else:
        rays = _bearing_lines_ls(
            obs.values.reshape(-1),
            np.repeat(anchors.positions, k_count, axis=1),
        )
        t0 = rays if rays is not None else anchors.positions.mean(axis=1)
        for i in range(n_starts):
            alpha = -math.pi + 2.0 * math.pi * i / n_starts
            starts.append(np.concatenate([[alpha], t0]))
        tri = _triangulation_start(obs, anchors, template)
        if tri is not None:
            starts.insert(0, tri)

    runs = [
        gauss_newton(res_fn, jac_fn, s, grad_tol=grad_tol, step_tol=step_tol, max_iter=max_iter)
        for s in starts
    ]
    best = _pick_best(runs)

    pose = Pose.from_params(best.x, dim=2)
    return EstimationResult(
        pose=pose,
        node_positions=apply_pose(template, pose),
        objective=best.objective,
        iterations=best.iterations,
        converged=best.converged,
        covariance_est=_gn_covariance(jac_fn, best.x, obs.noise.sigma),
        diagnostics={
            "n_starts": len(starts),
            "message": best.message,
            "grad_norm": best.grad_norm,
            "objective_trace": best.objective_trace,
        },
    )


def _triangulation_start(obs, anchors, template):
    """Procrustes pose from per-node ray intersections, if available."""
    if anchors.num_anchors < 2:
        return None
    points = np.empty((2, template.num_nodes))
    for k in range(template.num_nodes):
        p = _bearing_lines_ls(obs.values[:, k], anchors.positions)
        if p is None:
            return None
        points[:, k] = p
    try:
        pose, _ = procrustes_align(template, points)
    except RankDeficiencyError:
        return None
    return pose.as_params()


def _gn_covariance(jac_fn, x, sigma):
    if not (np.isfinite(sigma) and sigma > 0):
        return None
    jac = jac_fn(x)
    normal = jac.T @ jac
    try:
        return sigma**2 * np.linalg.inv(normal)
    except np.linalg.LinAlgError:
        return None


# ---------------------------------------------------------------------------
# Range rigid-body estimator (CWLS + refinement)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CwlsSystem:
    """Linear system ``min_y (G y - h)^T W (G y - h)`` for squared ranges.

    The unknown vector stacks a relaxed (unconstrained) rotation block
    ``vec(Q)`` row-major, the translation, and one auxiliary
    ``||s_k||^2`` term per node; ``unknown_layout`` names the slices.
    """

    design: np.ndarray
    target: np.ndarray
    weights: np.ndarray
    unknown_layout: dict

    def solve(self) -> np.ndarray:
        """Weighted normal-equation solve.

        Raises:
            RankDeficiencyError: Singular normal matrix; the error
                carries the near-null directions of ``G^T W G``.
        """
        gtw = self.design.T @ self.weights
        normal = gtw @ self.design
        rhs = gtw @ self.target
        u, sv, vt = np.linalg.svd(normal)
        if sv[-1] < 1e-12 * sv[0]:
            deficient = vt[sv < 1e-12 * sv[0]].T
            raise RankDeficiencyError(
                "CWLS normal matrix is singular: the measurement geometry does "
                f"not determine {deficient.shape[1]} direction(s) of the unknowns",
                rank=int((sv >= 1e-12 * sv[0]).sum()),
                required=normal.shape[0],
                null_directions=deficient,
            )
        return vt.T @ ((u.T @ rhs) / sv)


def build_range_cwls_system(
    obs: ObservationSet,
    anchors: AnchorSet,
    template: RigidBodyTemplate,
    weights: np.ndarray | None = None,
) -> CwlsSystem:
    """Assemble the squared-range CWLS system for a rigid body.

    Squaring ``r_mk = ||s_k - a_m||`` and substituting
    ``s_k = Q c_k + t`` gives, per measurement,
    ``2 a_m . s_k - ||s_k||^2 = ||a_m||^2 - r_mk^2``, linear in
    ``vec(Q)``, ``t``, and the auxiliaries ``u_k = ||s_k||^2``.

    Args:
        weights: Optional ``(MK, MK)`` PSD weighting; defaults to the
            identity scaled by ``1 / sigma^2`` (plain identity when the
            observation noise is zero).
    """
    d, k_count = template.dim, template.num_nodes
    m_count = anchors.num_anchors
    n_unknowns = d * d + d + k_count
    n_rows = m_count * k_count
    if n_rows < n_unknowns:
        raise IdentifiabilityError(
            f"{n_rows} squared-range rows cannot determine {n_unknowns} unknowns "
            f"(rotation block {d * d}, translation {d}, {k_count} auxiliaries)"
        )

    design = np.zeros((n_rows, n_unknowns))
    target = np.empty(n_rows)
    row = 0
    for m in range(m_count):
        a = anchors.positions[:, m]
        a_sq = float(a @ a)
        for k in range(k_count):
            x = template.nodes[:, k]
            design[row, : d * d] = 2.0 * np.kron(a, x)
            design[row, d * d : d * d + d] = 2.0 * a
            design[row, d * d + d + k] = -1.0
            target[row] = a_sq - obs.values[m, k] ** 2
            row += 1

    if weights is None:
        sigma = obs.noise.sigma
        scale = 1.0 / sigma**2 if sigma > 0 else 1.0
        weights = scale * np.eye(n_rows)
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (n_rows, n_rows):
            raise DimensionMismatchError(
                f"weights must be ({n_rows}, {n_rows}), got {weights.shape}"
            )

    layout = {
        "rotation": slice(0, d * d),
        "translation": slice(d * d, d * d + d),
        "aux": slice(d * d + d, n_unknowns),
    }
    return CwlsSystem(design=design, target=target, weights=weights, unknown_layout=layout)


def _nearest_rotation(free_block: np.ndarray) -> np.ndarray:
    """Project a square matrix onto SO(d) (proper rotation)."""
    u, _, vt = np.linalg.svd(free_block)
    signs = np.ones(free_block.shape[0])
    signs[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag(signs) @ vt


def range_rbl_cwls(
    obs: ObservationSet,
    anchors: AnchorSet,
    template: RigidBodyTemplate,
    weights: np.ndarray | None = None,
    refine: bool = True,
    grad_tol: float = 1e-10,
    step_tol: float = 1e-12,
    max_iter: int = 200,
) -> EstimationResult:
    """Two-stage rigid-body pose estimation from ranges.

    Stage 1 solves the closed-form weighted LS of
    :func:`build_range_cwls_system` and projects the relaxed rotation
    block onto the nearest proper rotation. Stage 2 refines
    ``(angles, t)`` by Gauss-Newton on the raw range residuals. If the
    refinement stalls, the stage-1 pose is returned with
    ``diagnostics["refined"] = False``.
    """
    if obs.modality != "range":
        raise InvalidParameterError(f"expected range observations, got {obs.modality!r}")
    system = build_range_cwls_system(obs, anchors, template, weights=weights)
    y = system.solve()

    d = template.dim
    q = _nearest_rotation(y[system.unknown_layout["rotation"]].reshape(d, d))
    t = y[system.unknown_layout["translation"]]
    stage1 = Pose(RotationParam(rotation_angles_from_matrix(q)), t)

    res_fn, jac_fn = pose_residual_builder(obs, anchors, template)
    stage1_params = stage1.as_params()
    stage1_obj = float(np.sum(res_fn(stage1_params) ** 2))
    residual_gy = system.design @ y - system.target
    cwls_obj = float(residual_gy @ system.weights @ residual_gy)

    refined = False
    best_params = stage1_params
    objective = stage1_obj
    iterations = 0
    converged = True
    message = "stage 1 only"
    trace = [stage1_obj]

    if refine:
        gn = gauss_newton(
            res_fn,
            jac_fn,
            stage1_params,
            grad_tol=grad_tol,
            step_tol=step_tol,
            max_iter=max_iter,
        )
        if gn.objective <= stage1_obj and np.all(np.isfinite(gn.x)):
            refined = True
            best_params = gn.x
            objective = gn.objective
            iterations = gn.iterations
            converged = gn.converged
            message = gn.message
            trace = gn.objective_trace
        else:
            converged = False
            message = "refinement diverged; stage-1 pose kept"

    pose = Pose.from_params(best_params, dim=d)
    return EstimationResult(
        pose=pose,
        node_positions=apply_pose(template, pose),
        objective=objective,
        iterations=iterations,
        converged=converged,
        covariance_est=_gn_covariance(jac_fn, best_params, obs.noise.sigma),
        diagnostics={
            "refined": refined,
            "message": message,
            "cwls_objective": cwls_obj,
            "stage1_objective": stage1_obj,
            "objective_trace": trace,
        },
    )
