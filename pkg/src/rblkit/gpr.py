"""Gaussian process regression mapping RSSI vectors to coordinates.

The kernel over two RSSI vectors ``p`` and ``q`` is

    phi(p, q) = amp * exp(-0.5 * (p - q)^T B^{-1} (p - q))
                + lin * p^T q + noise_var * delta

with ``B = diag(length_scales)`` (one positive scale per sensor) and
``delta`` equal to 1 only for a training point paired with itself.
Output coordinates are modeled as independent GPs sharing one
hyperparameter set; hyperparameters are trained by gradient ascent on
the Gaussian marginal log-likelihood in log-parameter space.

:func:`gpr_rbl_project` snaps raw per-node GPR estimates onto a rigid
template by Procrustes alignment, restoring the fixed inter-node
distances the independent predictions ignore.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import EstimationResult
from .exceptions import ConditioningError, DimensionMismatchError, InvalidParameterError
from .geometry import Pose, RigidBodyTemplate, RotationParam, apply_pose, procrustes_align

__all__ = [
    "GprModel",
    "gpr_kernel",
    "log_marginal_likelihood",
    "gpr_train",
    "gpr_predict",
    "gpr_rbl_project",
]

_JITTERS = (0.0, 1e-8, 1e-6, 1e-4)
_PARAM_FLOOR = 1e-12


@dataclass(frozen=True)
class GprModel:
    """Trained (or fixed) GPR hyperparameters plus the training set.

    Attributes:
        amp: Signal amplitude of the exponential term, > 0.
        length_scales: ``(M,)`` positive diagonal of ``B``.
        lin: Linear-kernel weight, >= 0.
        noise_var: Observation noise variance, >= 0.
        training_inputs: ``(N, M)`` RSSI vectors.
        training_targets: ``(N, d)`` coordinates.
        train_info: Optional optimizer metadata from :func:`gpr_train`.
    """

    amp: float
    length_scales: np.ndarray
    lin: float
    noise_var: float
    training_inputs: np.ndarray
    training_targets: np.ndarray
    train_info: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (np.isfinite(self.amp) and self.amp > 0):
            raise InvalidParameterError(f"amp must be > 0, got {self.amp}")
        ls = np.asarray(self.length_scales, dtype=float).reshape(-1)
        if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise InvalidParameterError("length_scales must all be > 0")
        if not (np.isfinite(self.lin) and self.lin >= 0):
            raise InvalidParameterError(f"lin must be >= 0, got {self.lin}")
        if not (np.isfinite(self.noise_var) and self.noise_var >= 0):
            raise InvalidParameterError(f"noise_var must be >= 0, got {self.noise_var}")
        inputs = np.asarray(self.training_inputs, dtype=float)
        targets = np.asarray(self.training_targets, dtype=float)
        if inputs.ndim != 2 or inputs.shape[1] != ls.size:
            raise DimensionMismatchError(
                f"training_inputs must be (N, {ls.size}), got {inputs.shape}"
            )
        if targets.ndim != 2 or targets.shape[0] != inputs.shape[0]:
            raise DimensionMismatchError(
                f"training_targets must be (N={inputs.shape[0]}, d), got {targets.shape}"
            )
        object.__setattr__(self, "length_scales", ls)
        object.__setattr__(self, "training_inputs", inputs)
        object.__setattr__(self, "training_targets", targets)

    @property
    def num_sensors(self) -> int:
        return self.length_scales.size

    @property
    def num_training(self) -> int:
        return self.training_inputs.shape[0]


def gpr_kernel(p, q, amp, length_scales, lin, noise_var=0.0, same_index=False):
    """Evaluate the covariance of two RSSI vectors directly.

    ``same_index=True`` adds the ``noise_var`` delta term (a training
    point paired with itself).
    """
    p = np.asarray(p, dtype=float).reshape(-1)
    q = np.asarray(q, dtype=float).reshape(-1)
    ls = np.asarray(length_scales, dtype=float).reshape(-1)
    diff = p - q
    value = amp * math.exp(-0.5 * float(diff @ (diff / ls))) + lin * float(p @ q)
    if same_index:
        value += noise_var
    return value


def _sq_dists_per_dim(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Per-dimension squared differences, shape ``(M, Na, Nb)``."""
    return (pa.T[:, :, None] - pb.T[:, None, :]) ** 2


def _exp_term(pa, pb, length_scales):
    d2 = _sq_dists_per_dim(pa, pb) / length_scales[:, None, None]
    return np.exp(-0.5 * d2.sum(axis=0))


def _cross_kernel(pa, pb, amp, length_scales, lin):
    return amp * _exp_term(pa, pb, length_scales) + lin * (pa @ pb.T)


def _training_kernel(inputs, amp, length_scales, lin, noise_var):
    k = _cross_kernel(inputs, inputs, amp, length_scales, lin)
    return k + noise_var * np.eye(inputs.shape[0])


def _chol_with_jitter(kmat: np.ndarray) -> tuple[np.ndarray, float]:
    for jitter in _JITTERS:
        try:
            chol = np.linalg.cholesky(kmat + jitter * np.eye(kmat.shape[0]))
            return chol, jitter
        except np.linalg.LinAlgError:
            continue
    raise ConditioningError(
        f"kernel matrix not invertible after jitter escalation up to {_JITTERS[-1]:.0e}"
    )


def _solve_lower(chol, b):
    # Forward/back substitution via numpy solves on the triangular factor.
    z = np.linalg.solve(chol, b)
    return np.linalg.solve(chol.T, z)


def log_marginal_likelihood(
    log_params: np.ndarray, inputs: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Marginal log-likelihood and its gradient in log-parameter space.

    Args:
        log_params: ``log([amp, beta_1..beta_M, lin, noise_var])``.
        inputs: ``(N, M)`` training RSSI vectors.
        targets: ``(N, d)`` training coordinates.

    Returns:
        ``(lml, grad)`` where ``grad`` matches ``log_params``.
    """
    m_count = inputs.shape[1]
    amp = math.exp(log_params[0])
    betas = np.exp(log_params[1 : 1 + m_count])
    lin = math.exp(log_params[1 + m_count])
    noise_var = math.exp(log_params[2 + m_count])

    n = inputs.shape[0]
    d_out = targets.shape[1]
    exp_term = _exp_term(inputs, inputs, betas)
    lin_term = inputs @ inputs.T
    kmat = amp * exp_term + lin * lin_term + noise_var * np.eye(n)

    chol, _ = _chol_with_jitter(kmat)
    alpha = _solve_lower(chol, targets)  # (N, d)
    kinv = _solve_lower(chol, np.eye(n))

    log_det = 2.0 * np.log(np.diag(chol)).sum()
    lml = float(
        -0.5 * np.sum(targets * alpha)
        - 0.5 * d_out * log_det
        - 0.5 * d_out * n * math.log(2.0 * math.pi)
    )

    sq = _sq_dists_per_dim(inputs, inputs)
    grads = np.empty(log_params.size)
    dk_stack = [amp * exp_term]
    for m in range(m_count):
        dk_stack.append(amp * exp_term * (0.5 * sq[m] / betas[m]))
    dk_stack.append(lin * lin_term)
    dk_stack.append(noise_var * np.eye(n))
    for j, dk in enumerate(dk_stack):
        quad = float(np.sum((alpha.T @ dk) * alpha.T))
        grads[j] = 0.5 * quad - 0.5 * d_out * float(np.sum(kinv * dk))
    return lml, grads


def gpr_train(
    inputs: np.ndarray,
    targets: np.ndarray,
    init: GprModel | None = None,
    grad_tol: float = 1e-6,
    max_iter: int = 500,
) -> GprModel:
    """Fit hyperparameters by maximizing the marginal log-likelihood.

    Plain gradient ascent in log-parameter space with an adaptive step
    and backtracking; stops when the gradient norm drops below
    ``grad_tol`` or after ``max_iter`` iterations.

    Args:
        inputs: ``(N, M)`` training RSSI vectors, N >= 2.
        targets: ``(N, d)`` training coordinates.
        init: Optional hyperparameter seeds (its training data fields
            are ignored); data-driven defaults otherwise.

    Raises:
        ConditioningError: If the kernel matrix stays non-invertible
            after jitter escalation.
    """
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] < 2:
        raise InvalidParameterError("need at least 2 training points, shape (N, M)")
    if targets.ndim != 2 or targets.shape[0] != inputs.shape[0]:
        raise DimensionMismatchError(
            f"targets must be (N={inputs.shape[0]}, d), got {targets.shape}"
        )
    m_count = inputs.shape[1]

    if init is not None:
        theta0 = np.concatenate(
            [[init.amp], np.asarray(init.length_scales, dtype=float), [init.lin, init.noise_var]]
        )
    else:
        target_var = max(float(targets.var(axis=0).mean()), 1e-2)
        input_var = np.maximum(inputs.var(axis=0), 1e-2)
        theta0 = np.concatenate([[target_var], input_var, [1e-2, 1e-2 * target_var]])
    z = np.log(np.maximum(theta0, _PARAM_FLOOR))

    lml, grad = log_marginal_likelihood(z, inputs, targets)
    step = 0.1
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        if np.linalg.norm(grad) < grad_tol:
            converged = True
            break
        improved = False
        while step >= 1e-12:
            z_new = z + step * grad
            try:
                lml_new, grad_new = log_marginal_likelihood(z_new, inputs, targets)
            except (ConditioningError, FloatingPointError, OverflowError):
                lml_new = -np.inf
                grad_new = None
            if np.isfinite(lml_new) and lml_new > lml:
                z, lml, grad = z_new, lml_new, grad_new
                step = min(step * 1.5, 1.0)
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    else:
        iterations = max_iter

    theta = np.exp(z)
    return GprModel(
        amp=float(theta[0]),
        length_scales=theta[1 : 1 + m_count],
        lin=float(theta[1 + m_count]),
        noise_var=float(theta[2 + m_count]),
        training_inputs=inputs,
        training_targets=targets,
        train_info={
            "lml": lml,
            "grad_norm": float(np.linalg.norm(grad)),
            "iterations": iterations,
            "converged": converged,
        },
    )


def gpr_predict(model: GprModel, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the coordinates for one RSSI vector.

    Returns:
        ``(mean, var)``: ``(d,)`` posterior means and the (shared)
        predictive variance per coordinate, clamped at zero.
    """
    query = np.asarray(query, dtype=float).reshape(-1)
    if not np.all(np.isfinite(query)):
        raise InvalidParameterError("query RSSI vector must be finite")
    if query.size != model.num_sensors:
        raise DimensionMismatchError(
            f"query length {query.size} != {model.num_sensors} sensors"
        )
    kmat = _training_kernel(
        model.training_inputs, model.amp, model.length_scales, model.lin, model.noise_var
    )
    chol, _ = _chol_with_jitter(kmat)
    kstar = _cross_kernel(
        query[None, :], model.training_inputs, model.amp, model.length_scales, model.lin
    )[0]
    alpha = _solve_lower(chol, model.training_targets)
    mean = kstar @ alpha

    self_cov = model.amp + model.lin * float(query @ query) + model.noise_var
    var = self_cov - float(kstar @ _solve_lower(chol, kstar))
    var = max(var, 0.0)
    return mean, np.full(model.training_targets.shape[1], var)


def gpr_rbl_project(
    per_node_estimates: np.ndarray, template: RigidBodyTemplate
) -> EstimationResult:
    """Snap independent per-node estimates onto the rigid template.

    Finds the pose whose forward transform best matches the estimates
    (Procrustes) and returns the rigidity-consistent node positions.
    With a single node only the translation is determined; the result
    then carries ``diagnostics["rotation_indeterminate"] = True``.
    """
    estimates = np.asarray(per_node_estimates, dtype=float)
    d, k = template.dim, template.num_nodes
    if estimates.shape != (d, k):
        raise DimensionMismatchError(
            f"estimates must have shape ({d}, {k}), got {estimates.shape}"
        )
    if k == 1:
        t = estimates[:, 0] - template.nodes[:, 0]
        pose = Pose(RotationParam((0.0,) * (1 if d == 2 else 3)), t)
        return EstimationResult(
            pose=pose,
            node_positions=apply_pose(template, pose),
            objective=0.0,
            iterations=0,
            converged=True,
            diagnostics={"rotation_indeterminate": True, "procrustes_residual": 0.0},
        )
    pose, residual = procrustes_align(template, estimates)
    return EstimationResult(
        pose=pose,
        node_positions=apply_pose(template, pose),
        objective=residual**2,
        iterations=0,
        converged=True,
        diagnostics={"rotation_indeterminate": False, "procrustes_residual": residual},
    )
