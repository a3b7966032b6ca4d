"""Soft-connected multi-body estimation and tracking.

Several rigid bodies are estimated jointly: intra-body structure stays
hard (each body keeps its exact template distances), while inter-body
relations are soft, bounded constraints. A constraint bounds either the
distance between reference points of two bodies (centroids by default,
or specific nodes) or the wrapped difference of their rotation angles.

Violations are penalized with squared hinges whose weights are ramped
geometrically across outer rounds (an exterior penalty method), so the
bounds turn effectively hard in the limit while the objective stays
smooth for Gauss-Newton. Setting every weight to zero recovers fully
independent per-body estimation.

Tracking reuses the same machinery: the frames of one body over time
are treated as soft-connected copies of the same template with
per-step motion bounds between consecutive frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import (
    EstimationResult,
    doa_rbl_estimate,
    point_ls_locate,
    pose_residual_builder,
    range_rbl_cwls,
)
from .exceptions import (
    DimensionMismatchError,
    InvalidParameterError,
    RblError,
)
from .geometry import (
    Pose,
    RigidBodyTemplate,
    RotationParam,
    apply_pose,
    procrustes_align,
    rotation_matrix,
    rotation_matrix_derivative,
    wrap_angle,
)
from .measurements import AnchorSet, ObservationSet, RssiModelParams
from .solvers import gauss_newton

__all__ = [
    "MultiBodyModel",
    "SoftConstraint",
    "TrackingSequence",
    "apply_multi_pose",
    "constraint_value",
    "penalty",
    "joint_estimate_soft",
    "track_sequence",
]

_CONSTRAINT_KINDS = ("inter_body_distance", "relative_angle")


@dataclass(frozen=True)
class MultiBodyModel:
    """A group of rigid bodies with their poses.

    Attributes:
        bodies: One template per body (consistent dimension).
        poses: One pose per body.
    """

    bodies: tuple[RigidBodyTemplate, ...]
    poses: tuple[Pose, ...]

    def __post_init__(self):
        bodies = tuple(self.bodies)
        poses = tuple(self.poses)
        if len(bodies) < 1:
            raise InvalidParameterError("need at least one body")
        if len(bodies) != len(poses):
            raise DimensionMismatchError(
                f"{len(bodies)} bodies but {len(poses)} poses"
            )
        dims = {b.dim for b in bodies} | {p.dim for p in poses}
        if len(dims) != 1:
            raise DimensionMismatchError(f"inconsistent dimensions across bodies: {dims}")
        object.__setattr__(self, "bodies", bodies)
        object.__setattr__(self, "poses", poses)

    @property
    def dim(self) -> int:
        return self.bodies[0].dim

    @property
    def num_bodies(self) -> int:
        return len(self.bodies)


@dataclass(frozen=True)
class SoftConstraint:
    """A bounded inter-body relation with a penalty weight.

    Attributes:
        kind: ``"inter_body_distance"`` (meters) or ``"relative_angle"``
            (radians, wrapped difference ``angle_j - angle_i``, 2D).
        body_pair: Indices ``(i, j)`` of the two coupled bodies.
        lower: Lower bound (inclusive).
        upper: Upper bound (inclusive).
        weight: Penalty weight, >= 0 (0 disables the constraint).
        reference_points: For distances: node indices ``(node_i,
            node_j)`` into the two bodies, or None for centroids.
    """

    kind: str
    body_pair: tuple[int, int]
    lower: float
    upper: float
    weight: float
    reference_points: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in _CONSTRAINT_KINDS:
            raise InvalidParameterError(
                f"kind must be one of {_CONSTRAINT_KINDS}, got {self.kind!r}"
            )
        if len(self.body_pair) != 2:
            raise InvalidParameterError("body_pair must be a pair of indices")
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise InvalidParameterError("bounds must be finite")
        if self.lower > self.upper:
            raise InvalidParameterError(
                f"lower bound {self.lower} exceeds upper bound {self.upper}"
            )
        if not (np.isfinite(self.weight) and self.weight >= 0):
            raise InvalidParameterError(f"weight must be >= 0, got {self.weight}")
        object.__setattr__(self, "body_pair", (int(self.body_pair[0]), int(self.body_pair[1])))
        if self.reference_points is not None:
            object.__setattr__(
                self,
                "reference_points",
                (int(self.reference_points[0]), int(self.reference_points[1])),
            )


@dataclass(frozen=True)
class TrackingSequence:
    """Observations of one body over consecutive time frames.

    Attributes:
        frames: T observation sets, time-ordered.
        max_translation: Per-step translation bound in meters, >= 0.
        max_rotation: Per-step rotation bound in radians, >= 0.
    """

    frames: tuple[ObservationSet, ...]
    max_translation: float
    max_rotation: float

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 1:
            raise InvalidParameterError("need at least one frame")
        if not (np.isfinite(self.max_translation) and self.max_translation >= 0):
            raise InvalidParameterError("max_translation must be >= 0")
        if not (np.isfinite(self.max_rotation) and self.max_rotation >= 0):
            raise InvalidParameterError("max_rotation must be >= 0")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def apply_multi_pose(model: MultiBodyModel) -> np.ndarray:
    """World-frame positions of all bodies, columns concatenated in order.

    Equivalent to the single block transform
    ``[Q_1|...|Q_B] blockdiag(C_1..C_B) + [t_1|...|t_B] selector``:
    each body's columns are its own pose applied to its own template.
    """
    return np.hstack([apply_pose(c, p) for c, p in zip(model.bodies, model.poses)])


def _check_constraints(constraints, bodies):
    for c in constraints:
        i, j = c.body_pair
        if not (0 <= i < len(bodies) and 0 <= j < len(bodies)):
            raise InvalidParameterError(
                f"constraint references bodies {c.body_pair} but only "
                f"{len(bodies)} bodies exist"
            )
        if i == j:
            raise InvalidParameterError("constraint must couple two distinct bodies")
        if c.kind == "relative_angle" and bodies[i].dim != 2:
            raise InvalidParameterError("relative_angle constraints are 2D only")
        if c.reference_points is not None:
            ni, nj = c.reference_points
            if not (0 <= ni < bodies[i].num_nodes and 0 <= nj < bodies[j].num_nodes):
                raise InvalidParameterError(
                    f"reference_points {c.reference_points} out of range for "
                    f"bodies with {bodies[i].num_nodes} and {bodies[j].num_nodes} nodes"
                )


def _reference_point(template, pose, node_index):
    source = template.centroid() if node_index is None else template.nodes[:, node_index]
    return rotation_matrix(pose.rotation) @ source + pose.translation


def constraint_value(constraint: SoftConstraint, model: MultiBodyModel) -> float:
    """The constrained quantity at the model's current poses."""
    i, j = constraint.body_pair
    if constraint.kind == "relative_angle":
        return wrap_angle(
            model.poses[j].rotation.angles[0] - model.poses[i].rotation.angles[0]
        )
    ni, nj = constraint.reference_points or (None, None)
    pi = _reference_point(model.bodies[i], model.poses[i], ni)
    pj = _reference_point(model.bodies[j], model.poses[j], nj)
    return float(np.linalg.norm(pj - pi))


def _signed_violation(value: float, lower: float, upper: float) -> float:
    if value > upper:
        return value - upper
    if value < lower:
        return value - lower
    return 0.0


def penalty(model: MultiBodyModel, constraints: list[SoftConstraint]) -> float:
    """Total squared-hinge penalty: zero iff every constraint is satisfied.

    Each constraint contributes ``weight * violation^2`` where the
    violation is the distance of the constrained quantity to its
    ``[lower, upper]`` interval (bounds inclusive).
    """
    _check_constraints(constraints, model.bodies)
    total = 0.0
    for c in constraints:
        violation = _signed_violation(constraint_value(c, model), c.lower, c.upper)
        total += c.weight * violation**2
    return total


# ---------------------------------------------------------------------------
# Joint estimation
# ---------------------------------------------------------------------------


def _independent_estimate(obs, anchors, template, rssi_params):
    """Single-body estimate used for initialization and fallbacks."""
    if obs.modality == "range":
        return range_rbl_cwls(obs, anchors, template)
    if obs.modality == "doa":
        return doa_rbl_estimate(obs, anchors, template)
    # RSSI: per-node point fit, then snap to the template and refine.
    point = point_ls_locate(obs, anchors, rssi_params=rssi_params)
    pose, _ = procrustes_align(template, point.node_positions)
    res_fn, jac_fn = pose_residual_builder(obs, anchors, template, rssi_params)
    gn = gauss_newton(res_fn, jac_fn, pose.as_params())
    refined = Pose.from_params(gn.x, dim=template.dim)
    return EstimationResult(
        pose=refined,
        node_positions=apply_pose(template, refined),
        objective=gn.objective,
        iterations=gn.iterations,
        converged=gn.converged,
        diagnostics={"objective_trace": gn.objective_trace},
    )


class _JointProblem:
    """Stacked residuals over all body poses plus penalty terms."""

    def __init__(self, obs_list, anchors, templates, constraints, rssi_params):
        self.templates = templates
        self.dim = templates[0].dim
        self.n_angles = 1 if self.dim == 2 else 3
        self.block = self.n_angles + self.dim
        self.constraints = constraints
        self.meas = [
            pose_residual_builder(obs, anchors, tpl, rssi_params)
            for obs, tpl in zip(obs_list, templates)
        ]

    def split(self, params):
        return [
            params[b * self.block : (b + 1) * self.block]
            for b in range(len(self.templates))
        ]

    def poses(self, params):
        return [Pose.from_params(p, dim=self.dim) for p in self.split(params)]

    def _constraint_geometry(self, params, c):
        """Value and per-body parameter gradients of one constraint."""
        blocks = self.split(params)
        i, j = c.body_pair
        if c.kind == "relative_angle":
            value = wrap_angle(blocks[j][0] - blocks[i][0])
            gi = np.zeros(self.block)
            gj = np.zeros(self.block)
            gi[0] = -1.0
            gj[0] = 1.0
            return value, gi, gj
        ni, nj = c.reference_points or (None, None)
        pts = []
        grads = []
        for body_idx, node_idx in ((i, ni), (j, nj)):
            tpl = self.templates[body_idx]
            blk = blocks[body_idx]
            rot = RotationParam(tuple(blk[: self.n_angles]))
            ref = tpl.centroid() if node_idx is None else tpl.nodes[:, node_idx]
            pt = rotation_matrix(rot) @ ref + blk[self.n_angles :]
            dp = np.zeros((self.dim, self.block))
            for a in range(self.n_angles):
                dp[:, a] = rotation_matrix_derivative(rot, a) @ ref
            dp[:, self.n_angles :] = np.eye(self.dim)
            pts.append(pt)
            grads.append(dp)
        diff = pts[1] - pts[0]
        value = float(np.linalg.norm(diff))
        direction = diff / max(value, 1e-12)
        gi = -direction @ grads[0]
        gj = direction @ grads[1]
        return value, gi, gj

    def residual_fn(self, params, weight_scale):
        parts = [fn(blk) for (fn, _), blk in zip(self.meas, self.split(params))]
        for c in self.constraints:
            w = c.weight * weight_scale
            if w == 0.0:
                parts.append(np.zeros(1))
                continue
            value, _, _ = self._constraint_geometry(params, c)
            parts.append(
                np.array([math.sqrt(w) * _signed_violation(value, c.lower, c.upper)])
            )
        return np.concatenate(parts)

    def jacobian_fn(self, params, weight_scale):
        blocks = self.split(params)
        n_bodies = len(self.templates)
        n_params = n_bodies * self.block
        rows = []
        jac_blocks = []
        for b, ((_, jac_fn), blk) in enumerate(zip(self.meas, blocks)):
            jb = jac_fn(blk)
            full = np.zeros((jb.shape[0], n_params))
            full[:, b * self.block : (b + 1) * self.block] = jb
            jac_blocks.append(full)
        for c in self.constraints:
            row = np.zeros((1, n_params))
            w = c.weight * weight_scale
            if w > 0.0:
                value, gi, gj = self._constraint_geometry(params, c)
                active = _signed_violation(value, c.lower, c.upper) != 0.0
                if active:
                    i, j = c.body_pair
                    row[0, i * self.block : (i + 1) * self.block] = math.sqrt(w) * gi
                    row[0, j * self.block : (j + 1) * self.block] = math.sqrt(w) * gj
            jac_blocks.append(row)
        return np.vstack(jac_blocks)

    def measurement_objectives(self, params):
        return [
            float(np.sum(fn(blk) ** 2))
            for (fn, _), blk in zip(self.meas, self.split(params))
        ]


def joint_estimate_soft(
    obs_list: list[ObservationSet],
    anchors: AnchorSet,
    templates: list[RigidBodyTemplate],
    constraints: list[SoftConstraint],
    init_poses: list[Pose] | None = None,
    rssi_params: RssiModelParams | None = None,
    rounds: int = 5,
    ramp: float = 10.0,
    grad_tol: float = 1e-10,
    step_tol: float = 1e-12,
    max_iter: int = 200,
) -> tuple[list[EstimationResult], dict]:
    """Jointly estimate the poses of soft-connected bodies.

    Minimizes the sum of all bodies' measurement costs plus the squared
    hinge penalty over the stacked pose parameters. Penalty weights are
    ramped by ``ramp`` per outer round for ``rounds`` rounds, so the
    final solution honors the bounds up to the residual softness.

    When ``init_poses`` is absent each body is first estimated
    independently; bodies whose independent estimation fails (e.g. from
    unidentifiable geometry) start from a coarse multi-start and rely on
    the coupling to become identifiable. If the joint solve itself
    diverges, the independent results are returned flagged with
    ``diagnostics["joint_fallback"] = True``.

    Returns:
        ``(results, coupling_report)``. The report lists, per
        constraint, the final value, violation, and penalty.
    """
    n_bodies = len(templates)
    if len(obs_list) != n_bodies:
        raise DimensionMismatchError(
            f"{len(obs_list)} observation sets but {n_bodies} templates"
        )
    _check_constraints(constraints, templates)
    problem = _JointProblem(obs_list, anchors, templates, constraints, rssi_params)

    independent: list[EstimationResult | None] = []
    failed = []
    if init_poses is not None:
        if len(init_poses) != n_bodies:
            raise DimensionMismatchError("init_poses length mismatch")
        start = np.concatenate([p.as_params() for p in init_poses])
        independent = [None] * n_bodies
    else:
        start_blocks = []
        for b in range(n_bodies):
            try:
                res = _independent_estimate(obs_list[b], anchors, templates[b], rssi_params)
                independent.append(res)
                start_blocks.append(res.pose.as_params())
            except RblError:
                independent.append(None)
                failed.append(b)
                fallback = np.zeros(problem.block)
                fallback[problem.n_angles :] = anchors.positions.mean(axis=1)
                start_blocks.append(fallback)
        start = np.concatenate(start_blocks)

    starts = [start]
    if failed:
        # Sweep the unidentifiable bodies' angles; coupling picks the winner.
        for angle in np.linspace(-math.pi, math.pi, 8, endpoint=False):
            variant = start.copy()
            for b in failed:
                variant[b * problem.block] = angle
            starts.append(variant)

    best = None
    total_iterations = 0
    for candidate in starts:
        params = candidate.copy()
        iters = 0
        gn = None
        for rnd in range(rounds):
            scale = ramp**rnd
            gn = gauss_newton(
                lambda p, s=scale: problem.residual_fn(p, s),
                lambda p, s=scale: problem.jacobian_fn(p, s),
                params,
                grad_tol=grad_tol,
                step_tol=step_tol,
                max_iter=max_iter,
            )
            params = gn.x
            iters += gn.iterations
        final_scale = ramp ** (rounds - 1)
        objective = float(np.sum(problem.residual_fn(params, final_scale) ** 2))
        if np.all(np.isfinite(params)) and (best is None or objective < best[1]):
            best = (params, objective, gn, iters)
        total_iterations += iters

    if best is None:
        # Joint solve produced nothing usable; fall back per body.
        results = []
        for b in range(n_bodies):
            res = independent[b]
            if res is None:
                res = EstimationResult(
                    pose=Pose.identity(problem.dim),
                    node_positions=apply_pose(templates[b], Pose.identity(problem.dim)),
                    objective=float("inf"),
                    iterations=0,
                    converged=False,
                    diagnostics={"joint_fallback": True, "independent_failed": True},
                )
            else:
                res.diagnostics["joint_fallback"] = True
            results.append(res)
        return results, {"constraints": [], "total_penalty": float("nan"), "fallback": True}

    params, _, gn_last, iters = best
    poses = problem.poses(params)
    meas_objs = problem.measurement_objectives(params)
    model = MultiBodyModel(bodies=tuple(templates), poses=tuple(poses))

    final_scale = ramp ** (rounds - 1)
    report_rows = []
    total_pen = 0.0
    for c in constraints:
        value = constraint_value(c, model)
        violation = _signed_violation(value, c.lower, c.upper)
        pen = c.weight * final_scale * violation**2
        total_pen += pen
        report_rows.append(
            {
                "kind": c.kind,
                "body_pair": list(c.body_pair),
                "lower": c.lower,
                "upper": c.upper,
                "weight": c.weight,
                "value": value,
                "violation": abs(violation),
                "penalty": pen,
            }
        )
    report = {
        "constraints": report_rows,
        "total_penalty": total_pen,
        "rounds": rounds,
        "final_weight_multiplier": final_scale,
        "fallback": False,
    }

    results = []
    for b, pose in enumerate(poses):
        results.append(
            EstimationResult(
                pose=pose,
                node_positions=apply_pose(templates[b], pose),
                objective=meas_objs[b],
                iterations=iters,
                converged=bool(gn_last.converged),
                diagnostics={
                    "joint": True,
                    "independent_failed": b in failed,
                    "penalty": total_pen,
                    "message": gn_last.message,
                },
            )
        )
    return results, report


def track_sequence(
    seq: TrackingSequence,
    anchors: AnchorSet,
    template: RigidBodyTemplate,
    rssi_params: RssiModelParams | None = None,
    constraint_weight: float | None = None,
    rounds: int = 5,
    ramp: float = 10.0,
) -> list[Pose]:
    """Estimate a body's pose in every frame with motion-bound smoothing.

    The T frames are treated as T soft-connected copies of the same
    template; consecutive frames are coupled by a centroid-distance
    bound ``[0, max_translation]`` and (in 2D) a relative-angle bound
    ``[-max_rotation, max_rotation]``.

    Args:
        constraint_weight: Penalty weight for the motion bounds;
            defaults to ``max(1 / sigma^2, 1)`` from the first frame's
            noise so smoothing is commensurate with the data misfit.

    Returns:
        One pose per frame, in time order.
    """
    frames = seq.frames
    if len(frames) == 1:
        return [
            _independent_estimate(frames[0], anchors, template, rssi_params).pose
        ]
    if constraint_weight is None:
        sigma = frames[0].noise.sigma
        constraint_weight = max(1.0 / sigma**2, 1.0) if sigma > 0 else 1.0

    constraints = []
    for t in range(len(frames) - 1):
        constraints.append(
            SoftConstraint(
                kind="inter_body_distance",
                body_pair=(t, t + 1),
                lower=0.0,
                upper=seq.max_translation,
                weight=constraint_weight,
            )
        )
        if template.dim == 2:
            constraints.append(
                SoftConstraint(
                    kind="relative_angle",
                    body_pair=(t, t + 1),
                    lower=-seq.max_rotation,
                    upper=seq.max_rotation,
                    weight=constraint_weight,
                )
            )
    results, _ = joint_estimate_soft(
        list(frames),
        anchors,
        [template] * len(frames),
        constraints,
        rssi_params=rssi_params,
        rounds=rounds,
        ramp=ramp,
    )
    return [r.pose for r in results]
