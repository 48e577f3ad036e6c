class IoreduxError(Exception):
    """Base class for errors raised by this package."""


class DegenerateSnapshotError(IoreduxError, ValueError):
    pass


class SparseGridTooLarge(IoreduxError, ValueError):
    pass


class IntegrationError(IoreduxError, RuntimeError):
    """Raised when the ODE integration leaves the admissible state space."""


class ModelEvaluationError(IoreduxError, RuntimeError):
    def __init__(self, message: str, point_id: str | None = None, index: int | None = None):
        super().__init__(message)
        self.point_id = point_id
        self.index = index


class CubeViolationError(IoreduxError, ValueError):
    pass


class ProvenanceError(IoreduxError):
    """An artifact hash does not match what a downstream step recorded."""


class ReachabilityWarning(UserWarning):
    pass


class RankDeficiencyWarning(UserWarning):
    pass
