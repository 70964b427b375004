"""Exception types shared across the package."""


class LrrsegError(Exception):
    """Base class for all package errors."""


class GeometryError(LrrsegError):
    """Invalid or mismatched voxel grid geometry."""


class ShapeError(LrrsegError):
    """Tensor shapes incompatible with the requested operation."""


class ValidationError(LrrsegError, ValueError):
    """Input violates a documented precondition."""


class DegenerateInputError(LrrsegError):
    """Input is technically valid but degenerate (zero variance, empty mask)."""


class GenerationError(LrrsegError):
    """Phantom parameters produced an unusable case."""


class ConfigError(LrrsegError):
    """Experiment configuration is inconsistent or incomplete."""


class InternalError(LrrsegError):
    """Invariant violated at runtime, e.g. a determinism re-check mismatch."""
