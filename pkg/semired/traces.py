import csv
from enum import Enum
import math
import pathlib
import typing as t

from pydantic import BaseModel, ConfigDict, ValidationError

from semired.constants import FLOAT_FORMAT, TRACE_COLUMNS
from semired.errors import TraceError

# CSV column -> IterationRecord field
_FIELDS = {
    "iter": "iteration",
    "f": "f",
    "proj_grad_norm": "proj_grad_norm",
    "lambda": "damping",
    "step_exp": "step_exponent",
    "backtracks": "backtracks",
    "inner_iters": "inner_iterations",
    "cpu_ms": "cpu_ms",
    "active_count": "active_count",
    "armijo_bound": "armijo_bound",
    "trial_f": "trial_f",
}


class RunStatus(str, Enum):
    CONVERGED = "converged"
    ITERATION_CAP = "iteration-cap"
    LINE_SEARCH_FAILURE = "line-search-failure"


class IterationRecord(BaseModel):
    """One row per iterate; row 0 is the starting point.

    Row k > 0 carries the step that produced x^k: its step exponent, the
    Armijo right-hand side it satisfied and the objective at the
    unadjusted trial point.
    """

    model_config = ConfigDict(frozen=True)

    iteration: int
    f: float
    proj_grad_norm: float
    damping: float
    step_exponent: int = 0
    backtracks: int = 0
    inner_iterations: int = 0
    cpu_ms: float = 0.0
    active_count: int = 0
    armijo_bound: float = math.nan
    trial_f: float = math.nan


class RunTrace(BaseModel):
    records: t.List[IterationRecord]
    status: RunStatus
    tau: float
    function_evaluations: int = 0

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]


def _format(value) -> str:
    if isinstance(value, float):
        return FLOAT_FORMAT.format(value)
    return str(value)


def write_trace_csv(
    records: t.Iterable[IterationRecord], path: t.Union[str, pathlib.Path]
):
    with open(path, "w", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(TRACE_COLUMNS)
        for record in records:
            writer.writerow(
                _format(getattr(record, _FIELDS[column]))
                for column in TRACE_COLUMNS
            )


def read_trace_csv(
    path: t.Union[str, pathlib.Path]
) -> t.List[IterationRecord]:
    with open(path, newline="") as file:
        reader = csv.DictReader(file)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise TraceError(
                f"{path}: expected columns {', '.join(TRACE_COLUMNS)},"
                f" got {reader.fieldnames}."
            )
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                records.append(
                    IterationRecord(
                        **{_FIELDS[key]: val for key, val in row.items()}
                    )
                )
            except ValidationError as error:
                raise TraceError(f"{path}:{line}: {error}") from error
    return records


def check_trace(
    records: t.Sequence[IterationRecord], tolerance: float = 0.0
) -> t.List[str]:
    """Violations of descent, the Armijo bound and trial-point safety."""
    violations = []
    for previous, record in zip(records, records[1:]):
        k = record.iteration
        decrease = record.f - previous.f
        if decrease > tolerance:
            violations.append(
                f"iteration {k}: f increased from {previous.f!r}"
                f" to {record.f!r}."
            )
        if not math.isnan(record.armijo_bound) and (
            decrease > record.armijo_bound + tolerance
        ):
            violations.append(
                f"iteration {k}: decrease {decrease!r} violates the"
                f" Armijo bound {record.armijo_bound!r}."
            )
        if not math.isnan(record.trial_f) and (
            record.f > record.trial_f + tolerance
        ):
            violations.append(
                f"iteration {k}: adjusted f {record.f!r} exceeds the"
                f" trial f {record.trial_f!r}."
            )
    return violations
