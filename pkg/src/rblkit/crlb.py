"""Numeric Cramer-Rao lower bound for rigid-body pose estimation.

Under iid Gaussian measurement noise the Fisher information of the pose
parameters ``eta = (angles, t)`` is

    J = (1 / sigma^2) * sum_i grad mu_i(eta) grad mu_i(eta)^T

where ``mu_i`` is the noiseless measurement function. The Jacobian is
computed analytically and cross-checked against central finite
differences before inversion; ``J^{-1}`` lower-bounds the covariance of
any unbiased estimator.
"""

from __future__ import annotations

import numpy as np

from .estimators import pose_measurement_function, pose_measurement_jacobian
from .exceptions import (
    DimensionMismatchError,
    IdentifiabilityError,
    InvalidParameterError,
    RblError,
)
from .geometry import Pose, RigidBodyTemplate, wrap_angle
from .measurements import AnchorSet, RssiModelParams

__all__ = ["crlb_numeric"]


def crlb_numeric(
    truth: Pose,
    template: RigidBodyTemplate,
    anchors: AnchorSet,
    modality: str,
    sigma: float,
    rssi_params: RssiModelParams | None = None,
    fd_step: float = 1e-6,
    fd_rel_tol: float = 1e-4,
) -> np.ndarray:
    """Pose-parameter covariance lower bound at the true pose.

    Args:
        truth: True pose the bound is evaluated at.
        template: Body reference coordinates.
        anchors: Anchor positions.
        modality: ``"range"``, ``"doa"``, or ``"rssi"``.
        sigma: Gaussian noise standard deviation, > 0.
        rssi_params: Path-loss parameters (required for RSSI).
        fd_step: Central finite-difference step for the Jacobian check.
        fd_rel_tol: Maximum relative disagreement tolerated between the
            analytic and finite-difference Jacobians.

    Returns:
        ``(n, n)`` symmetric PSD matrix, ``n = len(angles) + d``.

    Raises:
        IdentifiabilityError: If the Fisher information is singular;
            the error carries an orthonormal basis of the unidentifiable
            directions (``null_space``, one column each).
        RblError: If the analytic Jacobian fails the finite-difference
            cross-check.
    """
    if not (np.isfinite(sigma) and sigma > 0):
        raise InvalidParameterError(f"sigma must be > 0 for a CRLB, got {sigma}")
    if modality == "doa" and template.dim != 2:
        raise DimensionMismatchError("DoA bounds are 2D only")
    if modality == "rssi" and rssi_params is None:
        raise InvalidParameterError("rssi bounds need RssiModelParams")
    if truth.dim != template.dim:
        raise DimensionMismatchError("pose and template dimensions disagree")

    params = truth.as_params()
    jac = pose_measurement_jacobian(template, anchors, modality, params, rssi_params)
    fd = _fd_jacobian(template, anchors, modality, params, rssi_params, fd_step)
    denom = max(float(np.linalg.norm(jac)), 1e-12)
    rel_err = float(np.linalg.norm(fd - jac)) / denom
    if rel_err > fd_rel_tol:
        raise RblError(
            f"analytic measurement Jacobian disagrees with central finite "
            f"differences (relative error {rel_err:.2e} > {fd_rel_tol:.0e})"
        )

    fisher = (jac.T @ jac) / sigma**2
    eigvals, eigvecs = np.linalg.eigh(fisher)
    max_eig = max(float(eigvals[-1]), 0.0)
    null_mask = eigvals < 1e-10 * max(max_eig, 1e-300)
    if max_eig == 0.0 or np.any(null_mask):
        null_space = eigvecs[:, null_mask] if max_eig > 0 else eigvecs
        raise IdentifiabilityError(
            f"Fisher information is singular: {null_space.shape[1]} parameter "
            f"direction(s) are unidentifiable from this geometry",
            null_space=null_space,
        )
    inv = (eigvecs / eigvals) @ eigvecs.T
    return 0.5 * (inv + inv.T)


def _fd_jacobian(template, anchors, modality, params, rssi_params, step):
    n = params.size
    base_plus = []
    base_minus = []
    for i in range(n):
        shift = np.zeros(n)
        shift[i] = step
        base_plus.append(
            pose_measurement_function(template, anchors, modality, params + shift, rssi_params)
        )
        base_minus.append(
            pose_measurement_function(template, anchors, modality, params - shift, rssi_params)
        )
    cols = []
    for plus, minus in zip(base_plus, base_minus):
        diff = plus - minus
        if modality == "doa":
            diff = wrap_angle(diff)
        cols.append(diff / (2.0 * step))
    return np.stack(cols, axis=1)
