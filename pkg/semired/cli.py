import argparse
from concurrent.futures import ProcessPoolExecutor
import json
import logging
import pathlib
import sys
import typing as t

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    model_validator,
)

from semired.errors import (
    ExperimentError,
    TraceError,
    _Error,
)
from semired.loss import LossKind
from semired.optimizer import LinearSolver, OptimizerConfig, run
from semired.problems import (
    DeconvConfig,
    ExpSumConfig,
    ToyConfig,
    gen_expsum,
    generate,
)
from semired.traces import check_trace, read_trace_csv, write_trace_csv
from semired.varpro import (
    GAUSS_NEWTON,
    GP,
    REDUCED,
    SEMI_REDUCED_SIMPLIFIED,
    equivalence_run,
)

_log = logging.getLogger(__name__)

Problem = t.Literal["expsum", "deconv", "toy"]

_SOLVERS = {
    # problem: (elimination on, elimination off)
    "expsum": (LinearSolver.BLOCKDIAG_QR, LinearSolver.FULL_QR),
    "deconv": (LinearSolver.MIXED_CG_DIRECT, LinearSolver.FULL_CG),
    "toy": (LinearSolver.BLOCK_QR, LinearSolver.FULL_QR),
}
_OPERATOR_SOLVERS = (LinearSolver.MIXED_CG_DIRECT, LinearSolver.FULL_CG)
_EXPSUM_LOSSES = (
    LossKind.POISSON,
    LossKind.WEIGHTED_LEAST_SQUARES,
    LossKind.LEAST_SQUARES,
)


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    problem: Problem
    preset: t.Literal["desk", "paper"] = "desk"
    elimination: bool = True
    adjust: bool = False
    solver: t.Optional[LinearSolver] = None
    loss: t.Optional[LossKind] = None
    seeds: t.List[int] = Field(default_factory=lambda: [1])
    out: pathlib.Path = pathlib.Path("runs")
    k_max: t.Optional[int] = Field(None, ge=0)
    adjust_k_max: t.Optional[int] = Field(None, ge=1)
    rho: float = Field(1e-6, gt=0, le=1)
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_modes(self) -> "ExperimentSpec":
        if not self.seeds:
            raise ValueError("At least one seed is required.")
        solver = self.linear_solver
        if (self.problem == "deconv") != (solver in _OPERATOR_SOLVERS):
            raise ValueError(
                f"Solver {solver.value} is not available for the"
                f" {self.problem} problem."
            )
        if self.loss is not None:
            if self.problem != "expsum" or self.loss not in _EXPSUM_LOSSES:
                raise ValueError(
                    f"Loss {self.loss.value} is not available for the"
                    f" {self.problem} problem."
                )
        return self

    @property
    def linear_solver(self) -> LinearSolver:
        if self.solver is not None:
            return self.solver
        on, off = _SOLVERS[self.problem]
        return on if self.elimination else off

    @property
    def tag(self) -> str:
        parts = [self.problem, self.linear_solver.value]
        if self.loss is not None:
            parts.append(self.loss.value)
        parts.append("adjust" if self.adjust else "plain")
        return "-".join(parts)

    def problem_config(self, seed: int):
        if self.problem == "expsum":
            cfg = ExpSumConfig
        elif self.problem == "deconv":
            cfg = DeconvConfig
        else:
            return ToyConfig(rho=self.rho)
        preset = cfg.desk if self.preset == "desk" else cfg.paper
        return preset(seed=seed)

    def optimizer_config(self) -> OptimizerConfig:
        settings: t.Dict[str, t.Any] = dict(
            linear_solver=self.linear_solver
        )
        if self.problem == "toy":
            # effectively undamped; the valley gradient scales with rho^2
            settings.update(
                lambda0=1e-20, lambda_min=1e-20, tau=1e-30, k_max_outer=50
            )
        if self.k_max is not None:
            settings["k_max_outer"] = self.k_max
        if self.adjust:
            # toy: solve the z-subproblem, not just one step into it
            default = 10 if self.problem == "toy" else 3
            settings["adjust_k_max"] = self.adjust_k_max or default
        return OptimizerConfig(**settings)


class RunSummary(BaseModel):
    seed: int
    status: t.Optional[str] = None
    iterations: int = 0
    function_evaluations: int = 0
    f: t.Optional[float] = None
    proj_grad_norm: t.Optional[float] = None
    y_final: t.List[float] = Field(default_factory=list)
    y_true: t.List[float] = Field(default_factory=list)
    x_error: t.Optional[float] = None
    trace: t.Optional[str] = None
    error: t.Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


class ExperimentSummary(BaseModel):
    spec: ExperimentSpec
    runs: t.List[RunSummary]
    rate_median: t.List[float] = Field(default_factory=list)
    rate_mad: t.List[float] = Field(default_factory=list)
    median_abs_rate_error: t.Optional[float] = None

    @property
    def all_failed(self) -> bool:
        return all(r.failed for r in self.runs)


def run_seed(spec: ExperimentSpec, seed: int) -> RunSummary:
    trace_path = spec.out / f"{spec.tag}-seed{seed}.csv"
    try:
        instance = generate(spec.problem_config(seed))
        problem = instance.problem(spec.loss)
        x, trace = run(
            problem, instance.box(), instance.x0, spec.optimizer_config()
        )
    except _Error as error:
        _log.error("Seed %d failed: %s", seed, error)
        return RunSummary(
            seed=seed, error=f"{type(error).__name__}: {error}"
        )

    write_trace_csv(trace.records, trace_path)
    n_y = problem.n_y
    return RunSummary(
        seed=seed,
        status=trace.status.value,
        iterations=trace.iterations,
        function_evaluations=trace.function_evaluations,
        f=trace.final.f,
        proj_grad_norm=trace.final.proj_grad_norm,
        y_final=x[:n_y].tolist(),
        y_true=instance.x_true[:n_y].tolist(),
        x_error=float(np.linalg.norm(x - instance.x_true)),
        trace=str(trace_path),
    )


def _rate_statistics(summary: ExperimentSummary) -> ExperimentSummary:
    finished = [r for r in summary.runs if not r.failed]
    if summary.spec.problem != "expsum" or not finished:
        return summary
    rates = np.array([r.y_final for r in finished])
    truth = np.array(finished[0].y_true)
    median = np.median(rates, axis=0)
    return summary.model_copy(
        update=dict(
            rate_median=median.tolist(),
            rate_mad=np.median(np.abs(rates - median), axis=0).tolist(),
            median_abs_rate_error=float(np.median(np.abs(rates - truth))),
        )
    )


def run_experiment(spec: ExperimentSpec) -> ExperimentSummary:
    spec.out.mkdir(parents=True, exist_ok=True)
    if spec.workers > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            runs = list(
                pool.map(run_seed, [spec] * len(spec.seeds), spec.seeds)
            )
    else:
        runs = [run_seed(spec, seed) for seed in spec.seeds]

    summary = _rate_statistics(ExperimentSummary(spec=spec, runs=runs))
    path = spec.out / f"summary-{spec.tag}.json"
    path.write_text(summary.model_dump_json(indent=2))
    _log.info("Wrote %s", path)
    return summary


class VarproReport(BaseModel):
    seed: int
    n_iter: int
    discrepancy: t.Dict[str, float] = Field(default_factory=dict)
    failures: t.Dict[str, str] = Field(default_factory=dict)

    @property
    def max_discrepancy(self) -> float:
        if self.failures or not self.discrepancy:
            return float("inf")
        return max(self.discrepancy.values())


def verify_varpro(
    out: pathlib.Path, seed: int = 1, n_iter: int = 10
) -> VarproReport:
    """Reduced vs simplified semi-reduced iterates on a two-rate LS fit."""
    instance = gen_expsum(
        ExpSumConfig(c=2, rates_true=(1.0, 3.0), m=50, n=1, seed=seed)
    )
    problem = instance.problem(LossKind.LEAST_SQUARES)
    y0 = np.array([0.5, 2.5])
    report = VarproReport(seed=seed, n_iter=n_iter)
    for hessian in (GAUSS_NEWTON, GP):
        try:
            reduced = equivalence_run(
                problem, y0, REDUCED, hessian, n_iter
            )
            semi = equivalence_run(
                problem, y0, SEMI_REDUCED_SIMPLIFIED, hessian, n_iter
            )
        except _Error as error:
            _log.warning("%s equivalence run failed: %s", hessian, error)
            report.failures[hessian] = str(error)
            continue
        # a converged run may stop one line search earlier in either mode
        report.discrepancy[hessian] = max(
            float(np.linalg.norm(a - b) / np.linalg.norm(a))
            for a, b in zip(reduced, semi)
        )
    out.mkdir(parents=True, exist_ok=True)
    (out / "varpro.json").write_text(report.model_dump_json(indent=2))
    return report


def parse_seeds(text: str) -> t.List[int]:
    try:
        if ".." in text:
            first, last = (int(part) for part in text.split(".."))
            if last < first:
                raise ValueError(text)
            return list(range(first, last + 1))
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as error:
        raise argparse.ArgumentTypeError(
            f"Seeds must look like 1..20 or 1,2,5, got {text!r}."
        ) from error


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(
            f"Expected on or off, got {text!r}."
        )
    return text == "on"


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semired",
        description="Semi-reduced Newton-type experiments on separable"
        " inverse problems.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    commands = parser.add_subparsers(dest="command", required=True)

    runner = commands.add_parser(
        "run",
        help="Run an experiment over one or more seeds.",
        argument_default=argparse.SUPPRESS,
    )
    runner.add_argument("--config", type=pathlib.Path)
    runner.add_argument("--problem", choices=["expsum", "deconv", "toy"])
    runner.add_argument("--preset", choices=["desk", "paper"])
    runner.add_argument("--elimination", type=_on_off)
    runner.add_argument("--adjust", type=_on_off)
    runner.add_argument("--solver", choices=[s.value for s in LinearSolver])
    runner.add_argument(
        "--loss", choices=[k.value for k in _EXPSUM_LOSSES]
    )
    runner.add_argument("--seeds", type=parse_seeds)
    runner.add_argument("--out", type=pathlib.Path)
    runner.add_argument("--k-max", dest="k_max", type=int)
    runner.add_argument("--adjust-k-max", dest="adjust_k_max", type=int)
    runner.add_argument("--rho", type=float, help="Toy problem ratio.")
    runner.add_argument("--workers", type=int)

    verify = commands.add_parser(
        "verify-varpro",
        help="Check reduced and semi-reduced iterates agree.",
    )
    verify.add_argument(
        "--out", type=pathlib.Path, default=pathlib.Path("runs")
    )
    verify.add_argument("--seed", type=int, default=1)
    verify.add_argument("--iterations", type=int, default=10)

    checker = commands.add_parser(
        "check-trace", help="Validate a trace CSV file."
    )
    checker.add_argument("trace", type=pathlib.Path)
    return parser


def _load_spec(options: t.Dict[str, t.Any]) -> ExperimentSpec:
    settings: t.Dict[str, t.Any] = {}
    config = options.pop("config", None)
    if config is not None:
        try:
            settings.update(json.loads(config.read_text()))
        except (OSError, json.JSONDecodeError) as error:
            raise ExperimentError(f"{config}: {error}") from error
    settings.update(options)
    return ExperimentSpec.model_validate(settings)


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    levels = [logging.WARNING, logging.INFO, logging.DEBUG]
    logging.basicConfig(
        level=levels[min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )

    if args.command == "check-trace":
        try:
            violations = check_trace(read_trace_csv(args.trace))
        except (OSError, TraceError) as error:
            print(f"semired: {error}", file=sys.stderr)
            return 2
        for violation in violations:
            print(f"{args.trace}: {violation}")
        return 1 if violations else 0

    if args.command == "verify-varpro":
        report = verify_varpro(args.out, args.seed, args.iterations)
        for hessian, value in report.discrepancy.items():
            print(f"{hessian}: max relative discrepancy {value:.3e}")
        for hessian, message in report.failures.items():
            print(f"{hessian}: failed: {message}")
        return 0 if report.max_discrepancy < 1e-8 else 1

    options = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "verbose")
    }
    try:
        spec = _load_spec(options)
    except (ValidationError, ExperimentError) as error:
        message = str(error).splitlines()
        print(
            f"semired: invalid experiment: {' '.join(message)}",
            file=sys.stderr,
        )
        return 2

    summary = run_experiment(spec)
    for r in summary.runs:
        if r.failed:
            print(f"seed {r.seed}: {r.error}")
        else:
            print(
                f"seed {r.seed}: {r.status} after {r.iterations}"
                f" iterations, f = {r.f:.10e}"
            )
    return 1 if summary.all_failed else 0


if __name__ == "__main__":
    sys.exit(main())
