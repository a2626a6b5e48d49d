"""Reduced (variable projection) quantities for small dense problems.

Everything here works on a single block A(y); the optimizer and the block
solvers are the scalable path.
"""
from dataclasses import dataclass
import logging
import typing as t

import numpy as np
import scipy.linalg as sl

from semired.blocksolve import householder_qr, schur_complement
from semired.constants import LAMBDA_RETRY_FLOOR, PIVOT_TOL
from semired.errors import (
    LossError,
    ModelError,
    SingularSystemError,
    SolverError,
    UnsupportedOperationError,
)
from semired.loss import LossKind, LossModel, curvature_bundle
from semired.model import (
    SeparableModel,
    SeparableProblem,
    jacobian_blocks,
    objective,
    second_order_cross,
)
from semired.optimizer import OptimizerConfig

_log = logging.getLogger(__name__)

Vector = Matrix = np.ndarray

KAUFMAN = "kaufman"
GOLUB_PEREYRA = "golub-pereyra"


@dataclass(frozen=True)
class ReducedEval:
    y: Vector
    z_m: Vector
    f_r: float
    g_r: Vector
    jac_r: t.Optional[Matrix] = None


def _orthonormal_factor(A: Matrix, name: str) -> t.Tuple[Matrix, Matrix]:
    Q, R = householder_qr(A)
    n = A.shape[1]
    diag = np.abs(np.diag(R)) if n else np.ones(0)
    if R.shape[0] < n or (n and diag.min() <= PIVOT_TOL * diag.max()):
        raise SingularSystemError(f"{name} does not have full column rank.")
    return Q, R


def zm_least_squares(A: Matrix, b: Vector) -> Vector:
    A = np.asarray(A, dtype=float)
    Q, R = _orthonormal_factor(A, "A(y)")
    if A.shape[1] == 0:
        return np.zeros(0)
    return sl.solve_triangular(R, Q.T @ np.asarray(b, dtype=float))


def _row_weights(loss: LossModel) -> Vector:
    if loss.kind == LossKind.LEAST_SQUARES:
        if loss.scale is None:
            return np.ones(loss.size)
        return np.sqrt(loss.scale)
    if loss.kind == LossKind.WEIGHTED_LEAST_SQUARES:
        return loss.weights
    raise UnsupportedOperationError(
        f"No closed-form inner minimizer for the {loss.kind.value} loss."
    )


def inner_minimizer(problem: SeparableProblem, y: Vector) -> Vector:
    """z_m(y) = argmin_z F(y, z) for (weighted) least-squares losses."""
    model = problem.model
    d = _row_weights(problem.loss).reshape(model.n_blocks, model.m)
    b = problem.loss.data.reshape(model.n_blocks, model.m)
    A = model.dense_A(np.asarray(y, dtype=float))
    return np.concatenate(
        [
            zm_least_squares(d_k[:, None] * A, d_k * b_k)
            for d_k, b_k in zip(d, b)
        ]
    )


def _single_block(model: SeparableModel):
    if model.n_blocks != 1:
        raise ModelError(
            "Reduced Jacobians are defined for single-block models only,"
            f" got {model.n_blocks} blocks."
        )


def _weighted_blocks(
    model: SeparableModel, loss: LossModel, y: Vector, z: Vector
):
    _single_block(model)
    bundle = curvature_bundle(loss, model.apply(y, z))
    j_y, (a_bar,) = jacobian_blocks(model, y, z, bundle.w)
    return j_y, a_bar, bundle


def kaufman_jacobian(
    model: SeparableModel, loss: LossModel, y: Vector, z: Vector
) -> Matrix:
    """J_s = -(I - Q Q^T) J_y with Q an orthonormal basis of W A(y)."""
    j_y, a_bar, _ = _weighted_blocks(model, loss, y, z)
    Q, _ = _orthonormal_factor(a_bar, "W A(y)")
    return -(j_y - Q @ (Q.T @ j_y))


def golub_pereyra_jacobian(
    model: SeparableModel, loss: LossModel, y: Vector, z: Vector
) -> Matrix:
    j_y, a_bar, bundle = _weighted_blocks(model, loss, y, z)
    Q, R = _orthonormal_factor(a_bar, "W A(y)")
    j_s = -(j_y - Q @ (Q.T @ j_y))
    cross = second_order_cross(model, y, bundle.grad)
    if cross.size == 0:
        return j_s
    # (A_bar^+)^T v = Q R^{-T} v
    return j_s + Q @ sl.solve_triangular(R, cross, trans=1)


def udu_factor(
    X: Matrix, split: int
) -> t.Tuple[Matrix, Matrix, Matrix]:
    """X = U diag(X_s, X_zz) U^T with U unit upper triangular by blocks."""
    X = np.asarray(X, dtype=float)
    x_yy, x_yz = X[:split, :split], X[:split, split:]
    x_zy, x_zz = X[split:, :split], X[split:, split:]
    n = X.shape[0]
    U = np.eye(n)
    if x_zz.size == 0:
        return U, x_yy.copy(), x_zz.copy()

    lu, piv = sl.lu_factor(x_zz, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= PIVOT_TOL * max(pivots.max(), 1.0):
        raise SingularSystemError("X_zz is singular; no UDU^T factor.")
    u_yz = sl.lu_solve((lu, piv), x_yz.T, trans=1).T
    U[:split, split:] = u_yz
    return U, x_yy - u_yz @ x_zy, x_zz.copy()


def _gauss_newton_blocks(j_y: Matrix, a_bar: Matrix):
    return j_y.T @ j_y, j_y.T @ a_bar, a_bar.T @ a_bar


def gp_hessian_model(
    model: SeparableModel, loss: LossModel, y: Vector, z: Vector
) -> Matrix:
    """H = U H_hat U^T with U from the UDU^T factor of G + E."""
    j_y, a_bar, bundle = _weighted_blocks(model, loss, y, z)
    g_yy, g_yz, g_zz = _gauss_newton_blocks(j_y, a_bar)
    e_zy = second_order_cross(model, y, bundle.grad)
    n_y = model.n_y

    mixed = np.block([[g_yy, g_yz + e_zy.T], [g_yz.T + e_zy, g_zz]])
    U, _, _ = udu_factor(mixed, n_y)
    u_yz = U[:n_y, n_y:]
    g_s = schur_complement(np.block([[g_yy, g_yz], [g_yz.T, g_zz]]), n_y)
    h_s = g_s + e_zy.T @ sl.solve(g_zz, e_zy, assume_a="pos")

    h_yz = g_yz + e_zy.T
    h_yy = h_s + u_yz @ h_yz.T
    return np.block([[h_yy, h_yz], [h_yz.T, g_zz]])


def full_hessian(
    model: SeparableModel, loss: LossModel, y: Vector, z: Vector
) -> Matrix:
    """Exact Hessian G + E of F(y, z) = L(A(y) z)."""
    j_y, a_bar, bundle = _weighted_blocks(model, loss, y, z)
    g_yy, g_yz, g_zz = _gauss_newton_blocks(j_y, a_bar)
    e_zy = second_order_cross(model, y, bundle.grad)
    n_y = model.n_y
    e_yy = np.empty((n_y, n_y))
    for i in range(n_y):
        for j in range(i, n_y):
            value = bundle.grad @ model.apply_d2A(i, j, y, z)
            e_yy[i, j] = e_yy[j, i] = value
    return np.block(
        [[g_yy + e_yy, g_yz + e_zy.T], [g_yz.T + e_zy, g_zz]]
    )


def reduced_newton_hessian(problem: SeparableProblem, y: Vector) -> Matrix:
    y = np.asarray(y, dtype=float)
    z_m = inner_minimizer(problem, y)
    hessian = full_hessian(problem.model, problem.loss, y, z_m)
    _, h_s, _ = udu_factor(hessian, problem.n_y)
    return h_s


def reduced_eval(
    problem: SeparableProblem,
    y: Vector,
    jacobian: t.Optional[str] = None,
) -> ReducedEval:
    if jacobian not in (None, KAUFMAN, GOLUB_PEREYRA):
        raise ValueError(f"Unknown reduced Jacobian {jacobian!r}.")
    y = np.asarray(y, dtype=float)
    z_m = inner_minimizer(problem, y)
    ev = objective(problem.model, problem.loss, y, z_m)
    jac_r = None
    if jacobian == KAUFMAN:
        jac_r = kaufman_jacobian(problem.model, problem.loss, y, z_m)
    elif jacobian == GOLUB_PEREYRA:
        jac_r = golub_pereyra_jacobian(problem.model, problem.loss, y, z_m)
    return ReducedEval(y=y, z_m=z_m, f_r=ev.f, g_r=ev.g_y, jac_r=jac_r)


REDUCED = "reduced"
SEMI_REDUCED_SIMPLIFIED = "semi-reduced-simplified"
GAUSS_NEWTON = "gauss-newton"
GP = "gp"


class _Step(t.NamedTuple):
    f: float
    g: Vector
    dy: Vector


def _check_finite(matrix: Matrix, name: str):
    if not np.all(np.isfinite(matrix)):
        raise SingularSystemError(f"{name} has non-finite entries.")


def _reduced_step(
    problem: SeparableProblem, y: Vector, hessian: str, lam: float
) -> _Step:
    """(J_r^T J_r + lam I) dy = -g_r via QR of [J_r; sqrt(lam) I]."""
    jacobian = KAUFMAN if hessian == GAUSS_NEWTON else GOLUB_PEREYRA
    current = reduced_eval(problem, y, jacobian)
    _check_finite(current.jac_r, "Reduced Jacobian")
    augmented = np.vstack(
        [current.jac_r, np.sqrt(lam) * np.eye(problem.n_y)]
    )
    _, R = _orthonormal_factor(augmented, "Reduced Jacobian")
    dy = -sl.solve_triangular(
        R, sl.solve_triangular(R, current.g_r, trans=1)
    )
    return _Step(current.f_r, current.g_r, dy)


def _semi_reduced_step(
    problem: SeparableProblem, y: Vector, hessian: str, lam: float
) -> _Step:
    """Solve (B_s + lam I) dy = -g_y at z = z_m(y)."""
    z_m = inner_minimizer(problem, y)
    model, loss = problem.model, problem.loss
    ev = objective(model, loss, y, z_m)
    if hessian == GAUSS_NEWTON:
        j_y, a_bar, _ = _weighted_blocks(model, loss, y, z_m)
        J = np.hstack([j_y, a_bar])
        B = J.T @ J
    else:
        B = gp_hessian_model(model, loss, y, z_m)
    _check_finite(B, "Hessian model")
    b_s = schur_complement(B, problem.n_y)
    damped = 0.5 * (b_s + b_s.T) + lam * np.eye(problem.n_y)
    try:
        factor = sl.cho_factor(damped)
    except sl.LinAlgError as error:
        raise SingularSystemError(
            f"Damped B_s is not positive definite: {error}"
        ) from error
    return _Step(ev.f, ev.g_y, -sl.cho_solve(factor, ev.g_y))


def _reduced_value(problem: SeparableProblem, y: Vector) -> float:
    """F(y, z_m(y)), or inf where z_m(y) is undefined."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            value = problem.value(
                problem.join(y, inner_minimizer(problem, y))
            )
    except (SolverError, LossError, ValueError):
        return np.inf
    return value if np.isfinite(value) else np.inf


def equivalence_run(
    problem: SeparableProblem,
    y0: Vector,
    mode: str,
    hessian: str = GAUSS_NEWTON,
    n_iter: int = 10,
    cfg: t.Optional[OptimizerConfig] = None,
) -> t.List[Vector]:
    """y-iterates of the reduced method or the simplified semi-reduced one.

    Both modes damp the y-system with lam I, update lam from the same
    reduction ratio and backtrack on F(y, z_m(y)) with the same delta and
    alpha, so they take identical decisions whenever their Hessian models
    agree. Trial points where z_m(y) is undefined are rejected.
    """
    if mode not in (REDUCED, SEMI_REDUCED_SIMPLIFIED):
        raise ValueError(f"Unknown mode {mode!r}.")
    if hessian not in (GAUSS_NEWTON, GP):
        raise ValueError(f"Unknown Hessian model {hessian!r}.")
    cfg = cfg or OptimizerConfig()
    step_for = _reduced_step if mode == REDUCED else _semi_reduced_step

    y = np.asarray(y0, dtype=float)
    lam = cfg.lambda0
    iterates = [y.copy()]
    for k in range(n_iter):
        while True:
            try:
                step = step_for(problem, y, hessian, lam)
                break
            except SingularSystemError as error:
                if lam >= cfg.lambda_max:
                    raise SingularSystemError(
                        f"{mode} run: damping saturated at iteration {k}:"
                        f" {error}"
                    ) from error
                _log.debug("Raising damping from %g: %s", lam, error)
                lam = min(max(10 * lam, LAMBDA_RETRY_FLOOR), cfg.lambda_max)

        slope = float(step.g @ step.dy)
        for j in range(cfg.j_max + 1):
            y_trial = y + cfg.alpha**j * step.dy
            f_trial = _reduced_value(problem, y_trial)
            if f_trial - step.f <= cfg.delta * cfg.alpha**j * slope:
                break
        else:
            _log.warning(
                "%s run: line search failed at iteration %d.", mode, k
            )
            break

        model_decrease = -0.5 * slope
        rho = (
            (step.f - f_trial) / model_decrease
            if model_decrease > 0
            else 0.0
        )
        if rho > cfg.rho_good:
            lam = max(lam / 2, cfg.lambda_min)
        elif rho < cfg.rho_bad:
            lam = min(10 * lam, cfg.lambda_max)
        y = y_trial
        iterates.append(y.copy())
    return iterates
