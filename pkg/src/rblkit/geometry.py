"""Rigid-body geometry: templates, poses, rotations, and alignment.

Conventions used throughout the toolkit:

- Bodies are ``(d, K)`` arrays: one column per node, ``d`` in {2, 3}.
- A body's reference coordinates live in a :class:`RigidBodyTemplate`;
  a world-frame placement is described by a :class:`Pose` (rotation
  angles plus translation) and realized by :func:`apply_pose`, which
  computes ``Q @ C + t`` column-wise.
- 2D rotations use a single angle; 3D rotations use three Z-Y-X
  intrinsic angles (yaw, pitch, roll). Angles are always normalized to
  ``(-pi, pi]``.
- Transformed positions and distance matrices are plain numpy arrays.

The module also provides classical-MDS recovery of a template from its
inter-node distance matrix and closed-form (Kabsch/Procrustes) rigid
alignment, both of which downstream estimators build on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    EmbeddingError,
    InvalidParameterError,
    RankDeficiencyError,
)

__all__ = [
    "wrap_angle",
    "angle_difference",
    "RotationParam",
    "Pose",
    "RigidBodyTemplate",
    "rotation_matrix",
    "rotation_matrix_derivative",
    "rotation_angles_from_matrix",
    "apply_pose",
    "distance_matrix",
    "recover_template_mds",
    "mirror_template",
    "procrustes_align",
    "template_to_dict",
    "template_from_dict",
    "save_template",
    "load_template",
]

_TWO_PI = 2.0 * math.pi


def wrap_angle(angle):
    """Normalize an angle (or array of angles) to the interval ``(-pi, pi]``."""
    a = np.asarray(angle, dtype=float)
    wrapped = np.mod(a + np.pi, _TWO_PI) - np.pi
    wrapped = np.where(wrapped <= -np.pi, np.pi, wrapped)
    if np.ndim(angle) == 0:
        return float(wrapped)
    return wrapped


def angle_difference(a, b):
    """Signed difference ``a - b`` wrapped to ``(-pi, pi]``."""
    return wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class RotationParam:
    """Rotation angles in radians: ``[alpha]`` in 2D, ``[alpha, beta, gamma]``
    (Z-Y-X intrinsic: yaw, pitch, roll) in 3D.

    Angles are wrapped to ``(-pi, pi]`` on construction.
    """

    angles: tuple[float, ...]

    def __post_init__(self):
        angles = tuple(float(a) for a in np.atleast_1d(self.angles))
        if len(angles) not in (1, 3):
            raise InvalidParameterError(
                f"expected 1 (2D) or 3 (3D) rotation angles, got {len(angles)}"
            )
        if not all(math.isfinite(a) for a in angles):
            raise InvalidParameterError(f"non-finite rotation angle in {angles}")
        object.__setattr__(self, "angles", tuple(wrap_angle(a) for a in angles))

    @property
    def dim(self) -> int:
        return 2 if len(self.angles) == 1 else 3


@dataclass(frozen=True)
class Pose:
    """A rigid transform: rotation angles plus a translation vector (meters)."""

    rotation: RotationParam
    translation: np.ndarray

    def __post_init__(self):
        if not isinstance(self.rotation, RotationParam):
            object.__setattr__(self, "rotation", RotationParam(tuple(np.atleast_1d(self.rotation))))
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if not np.all(np.isfinite(t)):
            raise InvalidParameterError(f"non-finite translation {t}")
        if t.size != self.rotation.dim:
            raise DimensionMismatchError(
                f"translation has length {t.size} but rotation is {self.rotation.dim}D"
            )
        object.__setattr__(self, "translation", _readonly(t))

    @property
    def dim(self) -> int:
        return self.rotation.dim

    @classmethod
    def identity(cls, dim: int) -> "Pose":
        return cls(RotationParam((0.0,) * (1 if dim == 2 else 3)), np.zeros(dim))

    @classmethod
    def from_params(cls, params: np.ndarray, dim: int) -> "Pose":
        """Build a pose from a flat parameter vector ``[angles..., t...]``."""
        params = np.asarray(params, dtype=float).reshape(-1)
        n_ang = 1 if dim == 2 else 3
        if params.size != n_ang + dim:
            raise DimensionMismatchError(
                f"expected {n_ang + dim} pose parameters for {dim}D, got {params.size}"
            )
        return cls(RotationParam(tuple(params[:n_ang])), params[n_ang:])

    def as_params(self) -> np.ndarray:
        """Flat parameter vector ``[angles..., t...]`` (angles wrapped)."""
        return np.concatenate([np.asarray(self.rotation.angles), self.translation])


@dataclass(frozen=True)
class RigidBodyTemplate:
    """Reference coordinates of a rigid body's nodes.

    Attributes:
        dim: Spatial dimension, 2 or 3.
        nodes: ``(dim, K)`` array, one column per node, in meters.
        label: Identifier string.
    """

    dim: int
    nodes: np.ndarray
    label: str = ""

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise InvalidParameterError(f"dim must be 2 or 3, got {self.dim}")
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[0] != self.dim:
            raise DimensionMismatchError(
                f"nodes must have shape ({self.dim}, K), got {nodes.shape}"
            )
        if nodes.shape[1] < 1:
            raise InvalidParameterError("a rigid body needs at least one node")
        if not np.all(np.isfinite(nodes)):
            raise InvalidParameterError("node coordinates must be finite")
        if nodes.shape[1] >= 2:
            diffs = nodes[:, :, None] - nodes[:, None, :]
            dist = np.sqrt((diffs**2).sum(axis=0))
            np.fill_diagonal(dist, np.inf)
            if dist.min() == 0.0:
                i, j = np.unravel_index(np.argmin(dist), dist.shape)
                raise InvalidParameterError(f"nodes {i} and {j} coincide")
        object.__setattr__(self, "nodes", _readonly(nodes))

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[1]

    def centroid(self) -> np.ndarray:
        return self.nodes.mean(axis=1)


def rotation_matrix(param: RotationParam) -> np.ndarray:
    """Rotation matrix for the given angles.

    2D: ``[[cos a, -sin a], [sin a, cos a]]``. 3D: ``Rz(alpha) @ Ry(beta)
    @ Rx(gamma)`` (Z-Y-X intrinsic). The result is orthonormal with
    determinant +1.
    """
    if not isinstance(param, RotationParam):
        param = RotationParam(tuple(np.atleast_1d(param)))
    if param.dim == 2:
        (a,) = param.angles
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s], [s, c]])
    a, b, g = param.angles
    return _rz(a) @ _ry(b) @ _rx(g)


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _drz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def _dry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def rotation_matrix_derivative(param: RotationParam, index: int) -> np.ndarray:
    """Partial derivative of :func:`rotation_matrix` w.r.t. angle ``index``."""
    if param.dim == 2:
        if index != 0:
            raise InvalidParameterError("2D rotation has a single angle (index 0)")
        (a,) = param.angles
        c, s = math.cos(a), math.sin(a)
        return np.array([[-s, -c], [c, -s]])
    a, b, g = param.angles
    if index == 0:
        return _drz(a) @ _ry(b) @ _rx(g)
    if index == 1:
        return _rz(a) @ _dry(b) @ _rx(g)
    if index == 2:
        return _rz(a) @ _ry(b) @ _drx(g)
    raise InvalidParameterError(f"angle index {index} out of range for 3D")


def apply_pose(template: RigidBodyTemplate, pose: Pose) -> np.ndarray:
    """Place a template in the world frame: ``Q @ C + t`` per column.

    Args:
        template: Body reference coordinates.
        pose: Rotation and translation to apply.

    Returns:
        ``(d, K)`` array of world-frame node positions. Pairwise node
        distances are preserved (rigidity).
    """
    if template.dim != pose.dim:
        raise DimensionMismatchError(
            f"template is {template.dim}D but pose is {pose.dim}D"
        )
    q = rotation_matrix(pose.rotation)
    return q @ template.nodes + pose.translation[:, None]


def distance_matrix(body: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances between the columns of ``body``.

    Args:
        body: ``(d, K)`` node positions.

    Returns:
        ``(K, K)`` symmetric matrix with zero diagonal.
    """
    body = np.asarray(body, dtype=float)
    if body.ndim != 2:
        raise DimensionMismatchError(f"body must be a (d, K) matrix, got {body.shape}")
    if not np.all(np.isfinite(body)):
        raise InvalidParameterError("body coordinates must be finite")
    diffs = body[:, :, None] - body[:, None, :]
    dm = np.sqrt((diffs**2).sum(axis=0))
    dm = 0.5 * (dm + dm.T)
    np.fill_diagonal(dm, 0.0)
    return dm


def recover_template_mds(
    dm: np.ndarray,
    dim: int,
    label: str = "recovered",
    neg_eig_tol: float = 1e-8,
) -> RigidBodyTemplate:
    """Recover node coordinates from a distance matrix by classical MDS.

    Double-centers the squared-distance matrix into a Gram matrix, takes
    the top-``dim`` eigenpairs, and scales eigenvectors by the square
    roots of their eigenvalues. The recovered configuration is centered
    at the origin and unique only up to rotation/reflection/translation;
    compare against a reference via :func:`procrustes_align`, trying
    both the result and its :func:`mirror_template` (distances cannot
    distinguish handedness).

    Args:
        dm: ``(K, K)`` symmetric distance matrix with zero diagonal.
        dim: Target embedding dimension (2 or 3).
        label: Label for the recovered template.
        neg_eig_tol: Relative tolerance on negative Gram eigenvalues;
            deficits beyond ``neg_eig_tol * max_eigenvalue`` mean the
            distances are not embeddable in ``dim`` dimensions.

    Raises:
        EmbeddingError: If the Gram spectrum has a negative eigenvalue
            beyond tolerance (reports the deficit).
    """
    dm = np.asarray(dm, dtype=float)
    k = dm.shape[0]
    if dm.ndim != 2 or dm.shape != (k, k):
        raise DimensionMismatchError(f"distance matrix must be square, got {dm.shape}")
    if not np.all(np.isfinite(dm)):
        raise InvalidParameterError("distance matrix must be finite")
    if np.any(dm < 0):
        raise InvalidParameterError("distances must be nonnegative")
    if not np.allclose(dm, dm.T, atol=1e-12):
        raise InvalidParameterError("distance matrix must be symmetric")

    centering = np.eye(k) - np.ones((k, k)) / k
    gram = -0.5 * centering @ (dm**2) @ centering
    gram = 0.5 * (gram + gram.T)

    eigvals, eigvecs = np.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]

    max_eig = max(eigvals[0], 0.0)
    deficit = -eigvals.min()
    if deficit > neg_eig_tol * max(max_eig, 1.0):
        raise EmbeddingError(
            f"distances not embeddable in {dim}D: Gram eigenvalue deficit "
            f"{deficit:.3e} exceeds tolerance {neg_eig_tol:.1e} * {max_eig:.3e}",
            deficit=deficit,
            eigenvalues=eigvals,
        )

    top = np.clip(eigvals[:dim], 0.0, None)
    vecs = eigvecs[:, :dim]
    # Fix eigenvector signs (largest-magnitude entry positive) so the
    # embedding is deterministic; handedness stays arbitrary regardless.
    for col in range(dim):
        pivot = np.argmax(np.abs(vecs[:, col]))
        if vecs[pivot, col] < 0:
            vecs[:, col] = -vecs[:, col]
    coords = (vecs * np.sqrt(top)).T  # (dim, K)
    coords = coords - coords.mean(axis=1, keepdims=True)
    return RigidBodyTemplate(dim=dim, nodes=coords, label=label)


def mirror_template(template: RigidBodyTemplate) -> RigidBodyTemplate:
    """The opposite-handedness copy of a template (first axis negated).

    Distance matrices are reflection-invariant, so
    :func:`recover_template_mds` cannot tell a configuration from its
    mirror; compare a recovered template against a reference by taking
    the better :func:`procrustes_align` residual of the template and
    its mirror.
    """
    flipped = template.nodes.copy()
    flipped[0] = -flipped[0]
    return RigidBodyTemplate(dim=template.dim, nodes=flipped, label=template.label)


def procrustes_align(
    template: RigidBodyTemplate, observed: np.ndarray
) -> tuple[Pose, float]:
    """Best-fit rigid transform from a template onto observed positions.

    Solves ``min_{Q, t} || Q @ C + t - S ||_F`` over proper rotations via
    SVD of the centered cross-covariance (Kabsch), with a sign correction
    on the last singular vector to keep ``det Q = +1`` (no reflections).

    Args:
        template: Reference coordinates ``C``.
        observed: ``(d, K)`` observed positions ``S`` (same node order).

    Returns:
        ``(pose, residual)`` where ``residual`` is the attained Frobenius
        norm in meters. For 3D, angles are reported on the principal
        Euler branch (pitch in ``[-pi/2, pi/2]``).

    Raises:
        RankDeficiencyError: If the template is degenerate (all nodes
            coincident, or collinear in 3D), so rotation is not fixed.
    """
    observed = np.asarray(observed, dtype=float)
    d, k = template.dim, template.num_nodes
    if observed.shape != (d, k):
        raise DimensionMismatchError(
            f"observed must have shape ({d}, {k}), got {observed.shape}"
        )
    required_rank = d - 1
    centered_c = template.nodes - template.nodes.mean(axis=1, keepdims=True)
    rank = np.linalg.matrix_rank(centered_c, tol=1e-10)
    if rank < required_rank:
        raise RankDeficiencyError(
            f"template rank {rank} < {required_rank}: rotation is not determined "
            f"({'coincident nodes' if rank == 0 else 'collinear nodes'})",
            rank=rank,
            required=required_rank,
        )

    centered_s = observed - observed.mean(axis=1, keepdims=True)
    cross = centered_s @ centered_c.T
    u, _, vt = np.linalg.svd(cross)
    signs = np.ones(d)
    signs[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    q = u @ np.diag(signs) @ vt

    t = observed.mean(axis=1) - q @ template.nodes.mean(axis=1)
    pose = Pose(RotationParam(rotation_angles_from_matrix(q)), t)
    residual = float(np.linalg.norm(apply_pose(template, pose) - observed))
    return pose, residual


def rotation_angles_from_matrix(q: np.ndarray) -> tuple[float, ...]:
    """Extract rotation angles from an orthonormal matrix.

    3D extraction uses the Z-Y-X intrinsic convention with pitch on the
    principal branch ``[-pi/2, pi/2]``; at gimbal lock only the yaw/roll
    combination is determined and roll is fixed to zero.
    """
    if q.shape == (2, 2):
        return (math.atan2(q[1, 0], q[0, 0]),)
    sin_b = -q[2, 0]
    sin_b = min(1.0, max(-1.0, sin_b))
    b = math.asin(sin_b)
    if abs(sin_b) < 1.0 - 1e-12:
        a = math.atan2(q[1, 0], q[0, 0])
        g = math.atan2(q[2, 1], q[2, 2])
    else:
        a = math.atan2(-q[0, 1], q[1, 1])
        g = 0.0
    return (a, b, g)


def template_to_dict(template: RigidBodyTemplate) -> dict:
    """JSON-ready dict: ``{"dim", "nodes" (row per node), "label"}``."""
    return {
        "dim": template.dim,
        "nodes": template.nodes.T.tolist(),
        "label": template.label,
    }


def template_from_dict(doc: dict) -> RigidBodyTemplate:
    """Inverse of :func:`template_to_dict`."""
    nodes = np.asarray(doc["nodes"], dtype=float)
    if nodes.ndim != 2:
        raise InvalidParameterError("'nodes' must be a list of coordinate rows")
    return RigidBodyTemplate(
        dim=int(doc["dim"]), nodes=nodes.T, label=str(doc.get("label", ""))
    )


def save_template(template: RigidBodyTemplate, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(template_to_dict(template), fh, indent=2)
        fh.write("\n")


def load_template(path) -> RigidBodyTemplate:
    with open(path, "r", encoding="utf-8") as fh:
        return template_from_dict(json.load(fh))
