"""Exception types raised across the pipeline."""


class WSCError(Exception):
    """Base class for all package errors."""


class ConfigError(WSCError, ValueError):
    """An invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ArgumentError(WSCError, ValueError):
    pass


class DegenerateLabelsError(WSCError, ValueError):
    pass


class NoOverlapError(WSCError):
    """Common-support trimming or matching left nothing to work with."""


class MatchingError(WSCError):
    """A control school could not be matched in strict mode."""

    def __init__(self, school_id, n_candidates, message=None):
        self.school_id = school_id
        self.n_candidates = n_candidates
        super().__init__(
            message
            or f"no match for school {school_id} ({n_candidates} candidates within caliper)"
        )


class MatrixError(WSCError, ValueError):
    def __init__(self, message, eigenvalue=None):
        self.eigenvalue = eigenvalue
        if eigenvalue is not None:
            message = f"{message} (smallest eigenvalue {eigenvalue:.6g})"
        super().__init__(message)


class ConvergenceError(WSCError):
    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class RankDeficientError(WSCError, ValueError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"rank-deficient design; collinear columns: {', '.join(self.columns)}")
