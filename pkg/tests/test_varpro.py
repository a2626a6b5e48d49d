import numpy as np
import pytest
import scipy.linalg as sl

from semired.blocksolve import householder_qr, schur_complement
from semired.errors import ModelError, SingularSystemError
from semired.loss import LossKind, LossModel
from semired.model import (
    SeparableProblem,
    jacobian_blocks,
    second_order_cross,
)
from semired.optimizer import OptimizerConfig
from semired.problems import ExpSumConfig, ProblemInstance, gen_expsum
from semired.varpro import (
    GAUSS_NEWTON,
    GP,
    REDUCED,
    SEMI_REDUCED_SIMPLIFIED,
    equivalence_run,
    golub_pereyra_jacobian,
    gp_hessian_model,
    inner_minimizer,
    kaufman_jacobian,
    reduced_eval,
    reduced_newton_hessian,
    udu_factor,
    zm_least_squares,
)
from tests.conftest import DecayModel, finite_difference


def _ls(instance: ProblemInstance) -> SeparableProblem:
    return instance.problem(LossKind.LEAST_SQUARES)


def _gauss_newton(problem: SeparableProblem, y, z):
    ev = problem.evaluate(problem.join(y, z))
    j_y, (a_bar,) = jacobian_blocks(problem.model, y, z, ev.bundle.w)
    J = np.hstack([j_y, a_bar])
    return J.T @ J


def test_zm_identity():
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(zm_least_squares(np.eye(3), b), b)


def test_zm_solves_normal_equations(rng):
    # Given
    A = rng.standard_normal((10, 3))
    b = rng.standard_normal(10)

    # When
    z = zm_least_squares(A, b)

    # Then
    np.testing.assert_allclose(A.T @ A @ z, A.T @ b, atol=1e-12)


def test_zm_consistent_system_has_zero_residual(rng):
    A = rng.standard_normal((10, 3))
    b = A @ np.array([1.0, 2.0, 3.0])
    assert np.linalg.norm(A @ zm_least_squares(A, b) - b) < 1e-12


def test_zm_rank_deficient():
    A = np.ones((5, 2))
    with pytest.raises(SingularSystemError, match="full column rank"):
        zm_least_squares(A, np.ones(5))


def test_kaufman_jacobian_formula(single_expsum: ProblemInstance):
    # Given
    problem = _ls(single_expsum)
    y = np.array([1.2, 2.7])
    z = inner_minimizer(problem, y)
    A = problem.model.dense_A(y)
    P = np.eye(40) - A @ np.linalg.pinv(A)

    # When
    j_s = kaufman_jacobian(problem.model, problem.loss, y, z)

    # Then
    for j in range(2):
        dA = problem.model.derivative(j, y)
        np.testing.assert_allclose(
            j_s[:, j], -P @ dA @ z, rtol=1e-8, atol=1e-10
        )


def test_kaufman_normal_matrix_is_schur_complement(
    single_expsum: ProblemInstance,
):
    # Given
    problem = _ls(single_expsum)
    y = np.array([0.8, 3.5])
    z = inner_minimizer(problem, y)

    # When
    j_s = kaufman_jacobian(problem.model, problem.loss, y, z)
    g_s = schur_complement(_gauss_newton(problem, y, z), 2)

    # Then
    np.testing.assert_allclose(
        j_s.T @ j_s, g_s, rtol=1e-9, atol=1e-11 * np.abs(g_s).max()
    )


def test_kaufman_vanishes_when_columns_stay_in_range():
    # Given dA/dy in the range of A when A has the derivative as a column
    times = np.linspace(0.0, 1.0, 12)

    class Spanned(DecayModel):
        def __init__(self):
            super().__init__(times)
            self.c = 2

        def matrix(self, y):
            return np.column_stack(
                [np.exp(-y[0] * times), times * np.exp(-y[0] * times)]
            )

        def derivative(self, j, y):
            return np.column_stack(
                [
                    -times * np.exp(-y[0] * times),
                    -(times**2) * np.exp(-y[0] * times),
                ]
            )

    model = Spanned()
    loss = LossModel.least_squares(np.exp(-times))
    z = np.array([1.0, 0.0])

    # When
    j_s = kaufman_jacobian(model, loss, np.array([1.0]), z)

    # Then
    np.testing.assert_allclose(j_s, 0.0, atol=1e-12)


def test_golub_pereyra_equals_kaufman_at_zero_residual():
    # Given
    instance = gen_expsum(
        ExpSumConfig(c=2, rates_true=(1.0, 3.0), m=30, n=1, noiseless=True)
    )
    problem = _ls(instance)
    y, z = instance.x_true[:2], instance.x_true[2:]

    # When
    k_s = golub_pereyra_jacobian(problem.model, problem.loss, y, z)
    j_s = kaufman_jacobian(problem.model, problem.loss, y, z)

    # Then
    np.testing.assert_allclose(k_s, j_s, atol=1e-10)


def test_golub_pereyra_identities(single_expsum: ProblemInstance):
    # Given
    problem = _ls(single_expsum)
    y = np.array([1.2, 2.7])
    z = inner_minimizer(problem, y)
    model, loss = problem.model, problem.loss

    # When
    k_s = golub_pereyra_jacobian(model, loss, y, z)
    j_s = kaufman_jacobian(model, loss, y, z)
    H = gp_hessian_model(model, loss, y, z)

    # Then
    h_s = schur_complement(H, 2)
    np.testing.assert_allclose(
        k_s.T @ k_s, h_s, rtol=1e-8, atol=1e-10 * np.abs(h_s).max()
    )
    A = model.dense_A(y)
    np.testing.assert_allclose(j_s.T @ A, 0.0, atol=1e-8)


def test_gp_hessian_equals_gauss_newton_at_zero_residual():
    # Given
    instance = gen_expsum(
        ExpSumConfig(c=2, rates_true=(1.0, 3.0), m=30, n=1, noiseless=True)
    )
    problem = _ls(instance)
    y, z = instance.x_true[:2], instance.x_true[2:]

    # When
    H = gp_hessian_model(problem.model, problem.loss, y, z)

    # Then
    G = _gauss_newton(problem, y, z)
    np.testing.assert_allclose(H, G, rtol=1e-8, atol=1e-10)


def test_gp_hessian_is_symmetric_positive_definite(
    single_expsum: ProblemInstance,
):
    # Given
    problem = _ls(single_expsum)
    y = np.array([1.2, 2.7])
    z = inner_minimizer(problem, y)

    # When
    H = gp_hessian_model(problem.model, problem.loss, y, z)

    # Then
    np.testing.assert_allclose(H, H.T, rtol=1e-10, atol=1e-10)
    sl.cho_factor(H)


@pytest.mark.parametrize(
    "X, u_yz, x_s",
    [
        (np.array([[2.0, 1.0], [1.0, 1.0]]), [[1.0]], [[1.0]]),
        (np.diag([3.0, 2.0]), [[0.0]], [[3.0]]),
    ],
)
def test_udu_factor_examples(X, u_yz, x_s):
    U, X_s, X_zz = udu_factor(X, 1)
    np.testing.assert_allclose(U[:1, 1:], u_yz)
    np.testing.assert_allclose(X_s, x_s)
    np.testing.assert_allclose(X_zz, X[1:, 1:])


def test_udu_factor_reconstructs(rng):
    # Given
    X = rng.standard_normal((6, 6)) + 6 * np.eye(6)

    # When
    U, X_s, X_zz = udu_factor(X, 2)

    # Then
    D = sl.block_diag(X_s, X_zz)
    L = np.eye(6)
    L[2:, :2] = np.linalg.solve(X_zz, X[2:, :2])
    np.testing.assert_allclose(U @ D @ L, X, atol=1e-12)
    np.testing.assert_allclose(np.triu(U), U)


def test_udu_factor_singular_block():
    X = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(SingularSystemError, match="X_zz"):
        udu_factor(X, 1)


def test_reduced_gradient_matches_finite_differences(
    single_expsum: ProblemInstance,
):
    # Given
    problem = _ls(single_expsum)
    y = np.array([1.2, 2.7])

    # When
    g_r = reduced_eval(problem, y).g_r

    # Then
    fd = finite_difference(lambda v: reduced_eval(problem, v).f_r, y)
    np.testing.assert_allclose(
        g_r, fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max()
    )


def test_reduced_newton_hessian_matches_finite_differences(
    single_expsum: ProblemInstance,
):
    # Given
    problem = _ls(single_expsum)
    y = np.array([1.2, 2.7])

    # When
    H_r = reduced_newton_hessian(problem, y)

    # Then
    fd = np.column_stack(
        [
            finite_difference(
                lambda v: reduced_eval(problem, v).g_r[i], y, h=1e-5
            )
            for i in range(2)
        ]
    )
    np.testing.assert_allclose(
        H_r, fd, rtol=1e-4, atol=1e-6 * np.abs(fd).max()
    )


def test_reduced_newton_hessian_is_positive_near_minimizer():
    # Given
    times = np.linspace(0.0, 4.0, 20)
    b = 2.0 * np.exp(-1.3 * times)
    problem = SeparableProblem(
        DecayModel(times), LossModel.least_squares(b)
    )

    # Then
    assert reduced_newton_hessian(problem, np.array([1.25]))[0, 0] > 0


def test_reduced_eval_rejects_unknown_jacobian(
    single_expsum: ProblemInstance,
):
    with pytest.raises(ValueError, match="Unknown reduced Jacobian"):
        reduced_eval(_ls(single_expsum), np.ones(2), jacobian="exact")


def test_reduced_eval_checks_jacobian_before_inner_solve(
    single_expsum: ProblemInstance,
):
    # Given a loss without a closed-form inner minimizer
    problem = single_expsum.problem(LossKind.POISSON)

    # Then
    with pytest.raises(ValueError, match="Unknown reduced Jacobian"):
        reduced_eval(problem, np.ones(2), jacobian="exact")


def test_poisson_loss_has_no_closed_form(single_expsum: ProblemInstance):
    problem = single_expsum.problem(LossKind.POISSON)
    with pytest.raises(ModelError, match="closed-form"):
        inner_minimizer(problem, np.ones(2))


def test_multi_block_reduced_jacobian_is_rejected(expsum: ProblemInstance):
    problem = _ls(expsum)
    y = np.array([1.0, 3.0])
    z = inner_minimizer(problem, y)
    with pytest.raises(ModelError, match="single-block"):
        kaufman_jacobian(problem.model, problem.loss, y, z)


@pytest.mark.parametrize("hessian", [GAUSS_NEWTON, GP])
def test_reduced_and_semi_reduced_iterates_agree(
    single_expsum: ProblemInstance, hessian
):
    # Given
    problem = _ls(single_expsum)
    y0 = np.array([0.5, 2.5])

    # When
    reduced = equivalence_run(problem, y0, REDUCED, hessian, n_iter=10)
    semi = equivalence_run(
        problem, y0, SEMI_REDUCED_SIMPLIFIED, hessian, n_iter=10
    )

    # Then
    count = min(len(reduced), len(semi))
    assert count >= 4
    for a, b in zip(reduced[:count], semi[:count]):
        np.testing.assert_allclose(a, b, rtol=1e-8)


def test_equivalence_run_rejects_unknown_mode(
    single_expsum: ProblemInstance,
):
    with pytest.raises(ValueError, match="Unknown mode"):
        equivalence_run(_ls(single_expsum), np.ones(2), "full")


def _sampled_rates(count: int):
    rng = np.random.default_rng(11)
    return [
        np.array([rng.uniform(0.5, 1.5), rng.uniform(2.5, 4.0)])
        for _ in range(count)
    ]


@pytest.mark.parametrize(
    "y", _sampled_rates(20), ids=[f"point{i}" for i in range(20)]
)
def test_reduced_jacobian_gram_identities(
    single_expsum: ProblemInstance, y
):
    # Given
    problem = _ls(single_expsum)
    model, loss = problem.model, problem.loss
    z = inner_minimizer(problem, y)
    ev = problem.evaluate(problem.join(y, z))
    j_y, (a_bar,) = jacobian_blocks(model, y, z, ev.bundle.w)
    g_zz = a_bar.T @ a_bar
    e_zy = second_order_cross(model, y, ev.bundle.grad)

    # When
    j_s = kaufman_jacobian(model, loss, y, z)
    k_s = golub_pereyra_jacobian(model, loss, y, z)

    # Then
    g_s = schur_complement(_gauss_newton(problem, y, z), 2)
    h_s = g_s + e_zy.T @ np.linalg.solve(g_zz, e_zy)
    np.testing.assert_allclose(
        j_s.T @ j_s, g_s, rtol=1e-7, atol=1e-9 * np.abs(g_s).max()
    )
    np.testing.assert_allclose(
        k_s.T @ k_s, h_s, rtol=1e-7, atol=1e-9 * np.abs(h_s).max()
    )


def test_range_projector_is_idempotent(single_expsum: ProblemInstance):
    # Given
    problem = _ls(single_expsum)
    y = np.array([0.9, 3.1])
    z = inner_minimizer(problem, y)
    A = problem.model.dense_A(y)
    Q, _ = householder_qr(A)

    # When
    P = np.eye(A.shape[0]) - Q @ Q.T

    # Then
    j_s = kaufman_jacobian(problem.model, problem.loss, y, z)
    np.testing.assert_allclose(P @ P, P, atol=1e-12)
    np.testing.assert_allclose(P @ A, 0.0, atol=1e-12)
    np.testing.assert_allclose(P @ j_s, j_s, atol=1e-10)


def _zero_signal_problem() -> SeparableProblem:
    times = np.linspace(0.0, 4.0, 20)
    return SeparableProblem(
        DecayModel(times), LossModel.least_squares(np.zeros(20))
    )


@pytest.mark.parametrize("mode", [REDUCED, SEMI_REDUCED_SIMPLIFIED])
@pytest.mark.parametrize("hessian", [GAUSS_NEWTON, GP])
def test_equivalence_run_without_damping_reports_singular_system(
    mode, hessian
):
    # Given z_m = 0, so the y-columns of the Jacobian vanish
    cfg = OptimizerConfig(lambda_min=0.0, lambda0=0.0, lambda_max=0.0)

    # Then
    with pytest.raises(SingularSystemError, match="damping saturated"):
        equivalence_run(
            _zero_signal_problem(), np.ones(1), mode, hessian, 3, cfg
        )


@pytest.mark.parametrize("mode", [REDUCED, SEMI_REDUCED_SIMPLIFIED])
def test_equivalence_run_damping_handles_singular_start(mode):
    # When
    iterates = equivalence_run(
        _zero_signal_problem(), np.ones(1), mode, GAUSS_NEWTON, 3
    )

    # Then
    assert len(iterates) == 4
    for y in iterates:
        np.testing.assert_array_equal(y, [1.0])
