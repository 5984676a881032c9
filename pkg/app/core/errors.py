"""Error types shared by every layer.

Pipeline-level errors carry the process exit code the CLI reports for them.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EVAL_MISMATCH = 3
EXIT_INVARIANT = 4


class PoseStreamerError(Exception):
    exit_code: int = EXIT_CONFIG


class DegenerateDepth(PoseStreamerError):
    pass


class TriangulationError(PoseStreamerError):
    pass


class NonPositiveDisparity(TriangulationError):
    pass


class DisparityTooSmall(TriangulationError):
    pass


class PyramidTooDeep(PoseStreamerError):
    pass


class GeometryMismatch(PoseStreamerError):
    pass


class InsufficientPoints(PoseStreamerError):
    pass


class InsufficientObservations(PoseStreamerError):
    pass


class NotScored(PoseStreamerError):
    pass


class OutOfRange(PoseStreamerError):
    pass


class EmptyModel(PoseStreamerError):
    pass


class EmptySequence(PoseStreamerError):
    pass


class ConfigError(PoseStreamerError):
    exit_code = EXIT_CONFIG


class DatasetError(PoseStreamerError):
    exit_code = EXIT_CONFIG

    def __init__(self, message: str, path=None):
        self.path = path
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)


class EvaluationMismatch(PoseStreamerError):
    exit_code = EXIT_EVAL_MISMATCH


class InvariantViolation(PoseStreamerError):
    exit_code = EXIT_INVARIANT
