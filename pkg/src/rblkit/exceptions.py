"""Exception types raised across the toolkit.

All toolkit errors derive from :class:`RblError` so callers can catch one
base class. Several carry diagnostic payloads (rank found, eigenvalue
deficit, null-space basis, validation violations).
"""


class RblError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameterError(RblError, ValueError):
    """A scalar or array argument violates its documented constraints."""


class DimensionMismatchError(RblError, ValueError):
    """Array shapes or spatial dimensions do not agree."""


class EmbeddingError(RblError):
    """A distance matrix is not embeddable in the requested dimension.

    Attributes:
        deficit: Magnitude of the most negative Gram eigenvalue beyond
            tolerance (the eigenvalue deficit).
        eigenvalues: Full Gram-matrix spectrum, descending.
    """

    def __init__(self, message, deficit, eigenvalues):
        super().__init__(message)
        self.deficit = float(deficit)
        self.eigenvalues = eigenvalues


class RankDeficiencyError(RblError):
    """A point set or design matrix has lower rank than the problem needs.

    Attributes:
        rank: The rank actually found.
        required: The rank the operation requires.
        null_directions: Optional basis of the deficient directions,
            one column per direction (None when not computed).
    """

    def __init__(self, message, rank, required, null_directions=None):
        super().__init__(message)
        self.rank = int(rank)
        self.required = int(required)
        self.null_directions = null_directions


class IdentifiabilityError(RblError):
    """The measurement geometry cannot determine the unknowns.

    Attributes:
        null_space: Optional basis of unidentifiable parameter directions,
            one column per direction (None when not computed).
    """

    def __init__(self, message, null_space=None):
        super().__init__(message)
        self.null_space = null_space


class UndefinedBearingError(RblError):
    """An anchor coincides with a node, so its bearing is undefined.

    Attributes:
        anchor_index: Index m of the offending anchor.
        node_index: Index k of the offending node.
    """

    def __init__(self, message, anchor_index, node_index):
        super().__init__(message)
        self.anchor_index = int(anchor_index)
        self.node_index = int(node_index)


class SingularityError(RblError):
    """A measurement model was evaluated at a singular configuration."""


class ConditioningError(RblError):
    """A kernel or normal matrix stayed non-invertible after jitter escalation."""


class ConfigValidationError(RblError):
    """An experiment configuration is invalid.

    Attributes:
        violations: List of human-readable violation strings (every
            violation found, not just the first).
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(
            "invalid experiment config (%d violation%s):\n  - %s"
            % (
                len(self.violations),
                "" if len(self.violations) == 1 else "s",
                "\n  - ".join(self.violations),
            )
        )
