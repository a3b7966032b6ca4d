"""Rigid-body localization toolkit.

Estimate the pose (rotation + translation) of multi-node rigid bodies
from wireless measurements: point-based baselines, rigid-constrained
DoA and range estimators, a GPR RSSI localizer with rigid projection,
soft-connected multi-body joint estimation and tracking, a numeric
Cramer-Rao bound, and a deterministic Monte Carlo harness.
"""

from .crlb import crlb_numeric
from .estimators import (
    CwlsSystem,
    EstimationResult,
    build_range_cwls_system,
    doa_rbl_estimate,
    point_ls_locate,
    range_rbl_cwls,
)
from .exceptions import (
    ConditioningError,
    ConfigValidationError,
    DimensionMismatchError,
    EmbeddingError,
    IdentifiabilityError,
    InvalidParameterError,
    RankDeficiencyError,
    RblError,
    SingularityError,
    UndefinedBearingError,
)
from .geometry import (
    Pose,
    RigidBodyTemplate,
    RotationParam,
    angle_difference,
    apply_pose,
    distance_matrix,
    load_template,
    mirror_template,
    procrustes_align,
    recover_template_mds,
    rotation_matrix,
    save_template,
    wrap_angle,
)
from .gpr import GprModel, gpr_kernel, gpr_predict, gpr_rbl_project, gpr_train
from .harness import (
    ExperimentConfig,
    ScenarioSpec,
    SummaryStats,
    TrialResult,
    emit_outputs,
    load_config,
    run_experiment,
)
from .measurements import (
    AnchorSet,
    NoiseSpec,
    ObservationSet,
    RssiModelParams,
    gen_doa,
    gen_range,
    gen_rssi,
)
from .softbodies import (
    MultiBodyModel,
    SoftConstraint,
    TrackingSequence,
    apply_multi_pose,
    joint_estimate_soft,
    penalty,
    track_sequence,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "ConditioningError",
    "ConfigValidationError",
    "CwlsSystem",
    "DimensionMismatchError",
    "EmbeddingError",
    "EstimationResult",
    "ExperimentConfig",
    "GprModel",
    "IdentifiabilityError",
    "InvalidParameterError",
    "MultiBodyModel",
    "NoiseSpec",
    "ObservationSet",
    "Pose",
    "RankDeficiencyError",
    "RblError",
    "RigidBodyTemplate",
    "RotationParam",
    "RssiModelParams",
    "ScenarioSpec",
    "SingularityError",
    "SoftConstraint",
    "SummaryStats",
    "TrackingSequence",
    "TrialResult",
    "UndefinedBearingError",
    "angle_difference",
    "apply_multi_pose",
    "apply_pose",
    "build_range_cwls_system",
    "crlb_numeric",
    "distance_matrix",
    "doa_rbl_estimate",
    "emit_outputs",
    "gen_doa",
    "gen_range",
    "gen_rssi",
    "gpr_kernel",
    "gpr_predict",
    "gpr_rbl_project",
    "gpr_train",
    "joint_estimate_soft",
    "load_config",
    "load_template",
    "mirror_template",
    "penalty",
    "point_ls_locate",
    "procrustes_align",
    "range_rbl_cwls",
    "recover_template_mds",
    "rotation_matrix",
    "run_experiment",
    "save_template",
    "track_sequence",
    "wrap_angle",
]
