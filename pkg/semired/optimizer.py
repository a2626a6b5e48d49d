from dataclasses import dataclass
from enum import Enum
import logging
import time
import typing as t

import numpy as np
import scipy.linalg as sl
from pydantic import BaseModel, ConfigDict, Field, model_validator

from semired.blocksolve import (
    BlockNormalSystem,
    solve_block_qr,
    solve_block_qr_blockdiag,
    solve_full_cg,
    solve_full_qr,
    solve_mixed_cg_direct,
)
from semired.constants import (
    ALPHA,
    DELTA,
    EPSILON0,
    FULL_CG_MAX,
    FULL_CG_SCALE,
    FULL_CG_TOL,
    INNER_CG_MAX,
    INNER_CG_TOL,
    J_MAX,
    K_MAX_OUTER,
    LAMBDA0,
    LAMBDA_MAX,
    LAMBDA_MIN,
    LAMBDA_RETRY_FLOOR,
    RHO_BAD,
    RHO_GOOD,
    TAU_FLOOR,
    TAU_REDUCTION,
)
from semired.errors import (
    DomainError,
    IndefiniteSystemError,
    LossError,
    OptimizerError,
    SingularSystemError,
    SolverError,
    UnsupportedOperationError,
)
from semired.model import (
    ObjectiveEval,
    SeparableProblem,
    gauss_newton_operator,
    jacobian_blocks,
)
from semired.traces import IterationRecord, RunStatus, RunTrace

_log = logging.getLogger(__name__)

Vector = np.ndarray
Index = np.ndarray


class LinearSolver(str, Enum):
    FULL_QR = "full-qr"
    BLOCK_QR = "block-qr"
    BLOCKDIAG_QR = "blockdiag-qr"
    MIXED_CG_DIRECT = "mixed-cg-direct"
    FULL_CG = "full-cg"

    @property
    def dense(self) -> bool:
        return self in (
            LinearSolver.FULL_QR,
            LinearSolver.BLOCK_QR,
            LinearSolver.BLOCKDIAG_QR,
        )


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    delta: float = Field(DELTA, gt=0, lt=0.5)
    alpha: float = Field(ALPHA, gt=0, lt=1)
    lambda_min: float = Field(LAMBDA_MIN, ge=0)
    lambda_max: float = Field(LAMBDA_MAX, ge=0)
    lambda0: float = Field(LAMBDA0, ge=0)
    rho_good: float = Field(RHO_GOOD, le=1)
    rho_bad: float = Field(RHO_BAD, ge=0)
    epsilon0: float = Field(EPSILON0, gt=0)
    tau: t.Optional[float] = Field(None, gt=0)
    k_max_outer: int = Field(K_MAX_OUTER, ge=0)
    j_max: int = Field(J_MAX, ge=0)
    adjust_k_max: int = Field(0, ge=0)
    adjust_tau: t.Optional[float] = Field(None, gt=0)
    linear_solver: LinearSolver = LinearSolver.FULL_QR
    cg_tol: float = Field(INNER_CG_TOL, gt=0)
    cg_max: int = Field(INNER_CG_MAX, ge=1)
    full_cg_tol: float = Field(FULL_CG_TOL, gt=0)
    full_cg_max: int = Field(FULL_CG_MAX, ge=1)
    full_cg_scale: float = Field(FULL_CG_SCALE, gt=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "OptimizerConfig":
        if not self.lambda_min <= self.lambda0 <= self.lambda_max:
            raise ValueError(
                "Damping must satisfy lambda_min <= lambda0 <= lambda_max."
            )
        if not self.rho_bad < self.rho_good:
            raise ValueError("rho_bad must be smaller than rho_good.")
        return self


@dataclass(frozen=True)
class BoundBox:
    lo: Vector
    up: Vector

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        up = np.asarray(self.up, dtype=float)
        if lo.shape != up.shape or lo.ndim != 1:
            raise OptimizerError(
                f"Bounds must be vectors of one length, got {lo.shape}"
                f" and {up.shape}."
            )
        if np.any(lo > up):
            index = int(np.argmax(lo > up))
            raise OptimizerError(
                f"Empty box: lo[{index}] = {lo[index]:g} exceeds"
                f" up[{index}] = {up[index]:g}."
            )
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "up", up)

    @classmethod
    def unbounded(cls, size: int) -> "BoundBox":
        return cls(np.full(size, -np.inf), np.full(size, np.inf))

    @property
    def size(self) -> int:
        return self.lo.size

    def contains(self, x: Vector) -> bool:
        return bool(np.all((self.lo <= x) & (x <= self.up)))

    def sub(self, index: t.Union[slice, Index]) -> "BoundBox":
        return BoundBox(self.lo[index], self.up[index])


def project(x: Vector, box: BoundBox) -> Vector:
    return np.minimum(np.maximum(x, box.lo), box.up)


def active_set(x: Vector, g: Vector, box: BoundBox, eps: float) -> Index:
    if eps < 0:
        raise ValueError("The active-set band eps must be nonnegative.")
    at_lo = (g > 0) & (x <= box.lo + eps)
    at_up = (g < 0) & (x >= box.up - eps)
    return np.flatnonzero(at_lo | at_up)


class SearchDirection(t.NamedTuple):
    dx: Vector
    cg_iterations: int = 0


def _free_columns(
    problem: SeparableProblem, inactive: Index
) -> t.Tuple[Index, Index]:
    n_y = problem.n_y
    return inactive[inactive < n_y], inactive[inactive >= n_y] - n_y


def _qr_system(
    problem: SeparableProblem,
    y: Vector,
    z: Vector,
    ev: ObjectiveEval,
    free_y: Index,
    free_z: Index,
    lam: float,
    solver: LinearSolver,
) -> BlockNormalSystem:
    model = problem.model
    j_y, j_z_blocks = jacobian_blocks(model, y, z, ev.bundle.w)
    free = np.zeros(model.n_z, dtype=bool)
    free[free_z] = True
    free_blocks = free.reshape(model.n_blocks, model.c)
    blocks = [blk[:, keep] for blk, keep in zip(j_z_blocks, free_blocks)]
    if solver == LinearSolver.BLOCK_QR and len(blocks) > 1:
        blocks = [sl.block_diag(*blocks)]
    gradient = np.concatenate([ev.g_y[free_y], ev.g_z[free_z]])
    return BlockNormalSystem(
        j_y=j_y[:, free_y],
        j_z_blocks=blocks,
        r=ev.bundle.r,
        lam=lam,
        gradient=gradient,
    )


def search_direction(
    problem: SeparableProblem,
    x: Vector,
    ev: ObjectiveEval,
    inactive: Index,
    active: Index,
    lam: float,
    cfg: OptimizerConfig,
) -> SearchDirection:
    """Solve (B_II + lam I) dx_I = -g_I and set dx_A = -g_A.

    B is the Gauss-Newton model built from the curvature weights of the
    loss. Solver failures propagate so the caller can raise lam.
    """
    g = ev.gradient
    dx = -g.copy()
    if inactive.size == 0:
        return SearchDirection(dx)

    y, z = problem.split(x)
    free_y, free_z = _free_columns(problem, inactive)
    solver = cfg.linear_solver
    cg_iterations = 0
    if solver.dense and not problem.model.has_dense:
        raise UnsupportedOperationError(
            f"The {solver.value} solver needs a dense A(y); use"
            " mixed-cg-direct or full-cg for operator models."
        )

    if solver.dense:
        system = _qr_system(problem, y, z, ev, free_y, free_z, lam, solver)
        if solver == LinearSolver.FULL_QR:
            dy, dz = solve_full_qr(system)
        elif solver == LinearSolver.BLOCK_QR:
            dy, dz = solve_block_qr(system)
        else:
            dy, dz = solve_block_qr_blockdiag(system)
    else:
        op = gauss_newton_operator(
            problem.model, y, z, ev.bundle.w, lam
        ).restrict(free_y, free_z)
        g_y, g_z = ev.g_y[free_y], ev.g_z[free_z]
        if solver == LinearSolver.MIXED_CG_DIRECT:
            dy, dz, stats = solve_mixed_cg_direct(
                op, g_y, g_z, cfg.cg_tol, cfg.cg_max
            )
            cg_iterations = stats.cg_iterations
        else:
            dy, dz, result = solve_full_cg(
                op,
                g_y,
                g_z,
                cfg.full_cg_tol,
                cfg.full_cg_max,
                cfg.full_cg_scale,
            )
            cg_iterations = result.iterations

    dx_inactive = np.concatenate([dy, dz])
    if not g[inactive] @ dx_inactive < 0 and np.any(g[inactive]):
        _log.debug("Inexact solve gave no descent; using -g_I instead.")
        dx_inactive = -g[inactive]
    dx[inactive] = dx_inactive
    return SearchDirection(dx, cg_iterations)


def armijo_bound(
    g: Vector,
    x: Vector,
    x_trial: Vector,
    dx: Vector,
    inactive: Index,
    active: Index,
    delta: float,
    step: float,
) -> float:
    return delta * float(
        g[inactive] @ (step * dx[inactive])
        + g[active] @ (x_trial[active] - x[active])
    )


def armijo_accept(
    f_old: float,
    f_adj_trial: float,
    g: Vector,
    x: Vector,
    x_trial: Vector,
    dx: Vector,
    inactive: Index,
    active: Index,
    delta: float,
    step: float,
) -> bool:
    bound = armijo_bound(g, x, x_trial, dx, inactive, active, delta, step)
    return f_adj_trial - f_old <= bound


class _Adjusted(t.NamedTuple):
    z: Vector
    f: float
    iterations: int
    evaluations: int


def _adjust(
    problem: SeparableProblem,
    y_bar: Vector,
    z_bar: Vector,
    f_bar: float,
    box: BoundBox,
    cfg: OptimizerConfig,
) -> _Adjusted:
    if cfg.adjust_k_max == 0 or problem.n_z == 0:
        return _Adjusted(z_bar, f_bar, 0, 0)
    inner_cfg = cfg.model_copy(
        update=dict(
            k_max_outer=cfg.adjust_k_max, adjust_k_max=0, tau=cfg.adjust_tau
        )
    )
    subproblem = problem.with_fixed_y(y_bar)
    try:
        z_adj, trace = run(
            subproblem,
            box.sub(slice(problem.n_y, None)),
            z_bar,
            inner_cfg,
            log_level=logging.DEBUG,
        )
    except (LossError, SolverError, OptimizerError) as error:
        _log.debug("Trial point adjustment failed: %s", error)
        return _Adjusted(z_bar, f_bar, 0, 0)

    f_adj = trace.final.f
    if not f_adj <= f_bar:
        z_adj, f_adj = z_bar, f_bar
    return _Adjusted(
        z_adj, f_adj, trace.iterations, trace.function_evaluations
    )


def adjust_trial(
    problem: SeparableProblem,
    y_bar: Vector,
    z_bar: Vector,
    cfg: OptimizerConfig,
    box: t.Optional[BoundBox] = None,
) -> Vector:
    """A few iterations of `run` on min_z F(y_bar, z), never worsening F."""
    if box is None:
        box = BoundBox.unbounded(problem.size)
    y_bar = np.asarray(y_bar, dtype=float)
    z_bar = np.asarray(z_bar, dtype=float)
    f_bar = problem.value(problem.join(y_bar, z_bar))
    return _adjust(problem, y_bar, z_bar, f_bar, box, cfg).z


def _projected_gradient_norm(x: Vector, g: Vector, box: BoundBox) -> float:
    # P(x - g) - x without rounding g away against x
    return float(np.linalg.norm(np.clip(-g, box.lo - x, box.up - x)))


def run(
    problem: SeparableProblem,
    box: BoundBox,
    x0: Vector,
    cfg: OptimizerConfig,
    log_level: int = logging.INFO,
) -> t.Tuple[Vector, RunTrace]:
    """Damped projected Newton-type method with trial point adjustment."""
    if box.size != problem.size:
        raise OptimizerError(
            f"Box of size {box.size} does not fit {problem.size} variables."
        )
    start = time.process_time()
    n_y = problem.n_y
    adjusting = cfg.adjust_k_max > 0 and n_y > 0 and problem.n_z > 0

    x = project(np.asarray(x0, dtype=float), box)
    try:
        ev = problem.evaluate(x)
    except DomainError as error:
        raise OptimizerError(
            f"Starting point is outside the loss domain: {error}"
        ) from error
    evaluations = 1
    g = ev.gradient
    pg_norm = _projected_gradient_norm(x, g, box)
    tau = cfg.tau
    if tau is None:
        tau = max(TAU_FLOOR, pg_norm / TAU_REDUCTION)

    lam = cfg.lambda0
    eps = cfg.epsilon0
    active = active_set(x, g, box, eps)
    records = [
        IterationRecord(
            iteration=0,
            f=ev.f,
            proj_grad_norm=pg_norm,
            damping=lam,
            active_count=active.size,
            trial_f=ev.f,
        )
    ]

    k = 0
    while True:
        if pg_norm <= tau:
            status = RunStatus.CONVERGED
            break
        if k >= cfg.k_max_outer:
            status = RunStatus.ITERATION_CAP
            break

        inactive = np.setdiff1d(np.arange(problem.size), active)
        while True:
            try:
                direction = search_direction(
                    problem, x, ev, inactive, active, lam, cfg
                )
                break
            except (SingularSystemError, IndefiniteSystemError) as error:
                if lam >= cfg.lambda_max:
                    _log.warning(
                        "Damping saturated at %g and the system is still"
                        " singular; taking a gradient step.",
                        lam,
                    )
                    direction = SearchDirection(-g)
                    break
                _log.debug("Raising damping from %g: %s", lam, error)
                lam = min(max(10 * lam, LAMBDA_RETRY_FLOOR), cfg.lambda_max)
        dx = direction.dx
        x_full_step = project(x + dx, box)

        accepted = False
        inner_iterations = 0
        for j in range(cfg.j_max + 1):
            step = cfg.alpha**j
            x_trial = project(x + step * dx, box)
            bound = armijo_bound(
                g, x, x_trial, dx, inactive, active, cfg.delta, step
            )
            try:
                f_trial = problem.value(x_trial)
            except DomainError:
                evaluations += 1
                continue
            evaluations += 1

            x_new, f_new = x_trial, f_trial
            if adjusting:
                y_trial, z_trial = problem.split(x_trial)
                adjusted = _adjust(
                    problem, y_trial, z_trial, f_trial, box, cfg
                )
                inner_iterations += adjusted.iterations
                evaluations += adjusted.evaluations
                x_new = problem.join(y_trial, adjusted.z)
                f_new = adjusted.f

            if f_new - ev.f <= bound:
                accepted = True
                break

        if not accepted:
            _log.warning(
                "Line search failed after %d backtracks at iteration %d.",
                cfg.j_max,
                k,
            )
            status = RunStatus.LINE_SEARCH_FAILURE
            break

        model_decrease = -0.5 * float(g[inactive] @ dx[inactive])
        rho = (ev.f - f_new) / model_decrease if model_decrease > 0 else 0.0
        if rho > cfg.rho_good:
            lam = max(lam / 2, cfg.lambda_min)
        elif rho < cfg.rho_bad:
            lam = min(10 * lam, cfg.lambda_max)
            if lam == cfg.lambda_max:
                _log.warning("Damping saturated at lambda_max = %g.", lam)
        eps = min(cfg.epsilon0, float(np.linalg.norm(x_full_step - x)))

        x = x_new
        ev = problem.evaluate(x)
        evaluations += 1
        g = ev.gradient
        pg_norm = _projected_gradient_norm(x, g, box)
        active = active_set(x, g, box, eps)
        k += 1
        records.append(
            IterationRecord(
                iteration=k,
                f=ev.f,
                proj_grad_norm=pg_norm,
                damping=lam,
                step_exponent=j,
                backtracks=j,
                inner_iterations=inner_iterations,
                cpu_ms=1e3 * (time.process_time() - start),
                active_count=active.size,
                armijo_bound=bound,
                trial_f=f_trial,
            )
        )
        _log.debug(
            "k=%d f=%.10e |Pg|=%.3e lambda=%.3e j=%d cg=%d",
            k,
            ev.f,
            pg_norm,
            lam,
            j,
            direction.cg_iterations,
        )

    _log.log(
        log_level,
        "Stopped with status %s after %d iterations, f = %.10e.",
        status.value,
        k,
        ev.f,
    )
    trace = RunTrace(
        records=records,
        status=status,
        tau=tau,
        function_evaluations=evaluations,
    )
    return x, trace
