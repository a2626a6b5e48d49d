class _Error(Exception):
    ...


class LossError(_Error):
    ...


class DomainError(LossError):
    index: int

    def __init__(self, message: str, index: int = -1):
        super().__init__(message)
        self.index = index


class ModelError(_Error):
    ...


class UnsupportedOperationError(ModelError):
    ...


class SolverError(_Error):
    ...


class SingularSystemError(SolverError):
    ...


class IndefiniteSystemError(SolverError):
    ...


class OptimizerError(_Error):
    ...


class ProblemError(_Error):
    ...


class ExperimentError(_Error):
    ...


class TraceError(_Error):
    ...
