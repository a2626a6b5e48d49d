import typing as t

import numpy as np
import pytest

from semired.blocksolve import BlockNormalSystem
from semired.loss import LossModel
from semired.model import DenseSeparableModel, SeparableProblem
from semired.problems import ExpSumConfig, ProblemInstance, gen_expsum

Vector = Matrix = np.ndarray


class LinearModel(DenseSeparableModel):
    """A(y) = M, independent of y."""

    def __init__(self, matrix: Matrix, n_blocks: int = 1, n_y: int = 0):
        self.M = np.atleast_2d(np.asarray(matrix, dtype=float))
        super().__init__(
            n_y=n_y, m=self.M.shape[0], c=self.M.shape[1], n_blocks=n_blocks
        )

    def matrix(self, y: Vector) -> Matrix:
        return self.M

    def derivative(self, j: int, y: Vector) -> Matrix:
        return np.zeros_like(self.M)


class DecayModel(DenseSeparableModel):
    """mu(t) = z exp(-y t), one rate and one weight."""

    def __init__(self, times: Vector):
        self.times = np.asarray(times, dtype=float)
        super().__init__(n_y=1, m=self.times.size, c=1)

    def matrix(self, y: Vector) -> Matrix:
        return np.exp(-y[0] * self.times)[:, None]

    def derivative(self, j: int, y: Vector) -> Matrix:
        return (-self.times * np.exp(-y[0] * self.times))[:, None]

    def second_derivative(self, i: int, j: int, y: Vector) -> Matrix:
        return (self.times**2 * np.exp(-y[0] * self.times))[:, None]


def random_system(
    rng: np.random.Generator,
    n_blocks: int,
    m: int,
    c: int,
    n_y: int,
    lam: float = 0.0,
    with_gradient: bool = False,
) -> BlockNormalSystem:
    j_y = rng.standard_normal((n_blocks * m, n_y))
    blocks = [rng.standard_normal((m, c)) for _ in range(n_blocks)]
    r = rng.standard_normal(n_blocks * m)
    gradient = None
    if with_gradient:
        gradient = rng.standard_normal(n_y + n_blocks * c)
    return BlockNormalSystem(j_y, blocks, r, lam=lam, gradient=gradient)


def normal_equations_solution(system: BlockNormalSystem) -> Vector:
    J = system.dense()
    B = J.T @ J + system.lam * np.eye(system.size)
    rhs = (
        J.T @ system.r if system.gradient is None else system.gradient
    )
    return -np.linalg.solve(B, rhs)


def random_spd(rng: np.random.Generator, n: int, cond: float = 10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.linspace(1.0, cond, n)) @ Q.T


def finite_difference(
    fun: t.Callable[[Vector], float], x: Vector, h: float = 1e-6
) -> Vector:
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return grad


def decay_problem() -> SeparableProblem:
    times = np.linspace(0.0, 4.0, 20)
    b = 2.0 * np.exp(-1.3 * times) + 0.01 * np.sin(7 * times)
    return SeparableProblem(DecayModel(times), LossModel.least_squares(b))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture
def expsum() -> ProblemInstance:
    return gen_expsum(
        ExpSumConfig(c=2, rates_true=(1.0, 3.0), m=30, n=3, seed=7)
    )


@pytest.fixture
def single_expsum() -> ProblemInstance:
    return gen_expsum(
        ExpSumConfig(c=2, rates_true=(1.0, 3.0), m=40, n=1, seed=3)
    )
