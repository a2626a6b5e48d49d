import abc
from dataclasses import dataclass
import typing as t

import numpy as np

from semired.blocksolve import BlockHessianOperator
from semired.errors import (
    DomainError,
    ModelError,
    UnsupportedOperationError,
)
from semired.loss import (
    CurvatureBundle,
    LossModel,
    curvature_bundle,
    loss_value,
)

Vector = Matrix = np.ndarray
Count = int


class SeparableModel(abc.ABC):
    """The map (y, z) -> (I_n (x) A(y)) z with A(y) of shape m x c."""

    n_y: Count
    m: Count
    c: Count
    n_blocks: Count

    @property
    def n_z(self) -> Count:
        return self.c * self.n_blocks

    @property
    def rows(self) -> Count:
        return self.m * self.n_blocks

    @abc.abstractmethod
    def apply(self, y: Vector, z: Vector) -> Vector:
        ...

    @abc.abstractmethod
    def apply_dA(self, j: int, y: Vector, z: Vector) -> Vector:
        ...

    @abc.abstractmethod
    def apply_At(self, y: Vector, v: Vector) -> Vector:
        ...

    @abc.abstractmethod
    def apply_dAt(self, j: int, y: Vector, v: Vector) -> Vector:
        ...

    def dense_A(self, y: Vector) -> Matrix:
        raise UnsupportedOperationError(
            f"{self.__class__.__name__} has no dense A(y);"
            " use the operator (CG) solvers instead."
        )

    def apply_d2A(self, i: int, j: int, y: Vector, z: Vector) -> Vector:
        raise UnsupportedOperationError(
            f"{self.__class__.__name__} provides no second derivatives."
        )

    @property
    def has_dense(self) -> bool:
        return False


class DenseSeparableModel(SeparableModel, abc.ABC):
    """Kronecker products built from one dense A(y) and its derivatives."""

    def __init__(self, n_y: Count, m: Count, c: Count, n_blocks: Count = 1):
        if n_y < 0 or m < 1 or c < 0 or n_blocks < 1:
            raise ModelError(
                f"Invalid model dimensions n_y={n_y}, m={m}, c={c},"
                f" n_blocks={n_blocks}."
            )
        self.n_y = n_y
        self.m = m
        self.c = c
        self.n_blocks = n_blocks

    @abc.abstractmethod
    def matrix(self, y: Vector) -> Matrix:
        ...

    @abc.abstractmethod
    def derivative(self, j: int, y: Vector) -> Matrix:
        ...

    def second_derivative(self, i: int, j: int, y: Vector) -> Matrix:
        raise UnsupportedOperationError(
            f"{self.__class__.__name__} provides no second derivatives."
        )

    def _blocks_z(self, z: Vector) -> Matrix:
        return np.asarray(z, dtype=float).reshape(self.n_blocks, self.c)

    def _blocks_v(self, v: Vector) -> Matrix:
        return np.asarray(v, dtype=float).reshape(self.n_blocks, self.m)

    def _check_j(self, j: int):
        if not 0 <= j < self.n_y:
            raise ModelError(f"Parameter index {j} out of range.")

    def apply(self, y: Vector, z: Vector) -> Vector:
        return (self._blocks_z(z) @ self.matrix(y).T).ravel()

    def apply_dA(self, j: int, y: Vector, z: Vector) -> Vector:
        self._check_j(j)
        return (self._blocks_z(z) @ self.derivative(j, y).T).ravel()

    def apply_At(self, y: Vector, v: Vector) -> Vector:
        return (self._blocks_v(v) @ self.matrix(y)).ravel()

    def apply_dAt(self, j: int, y: Vector, v: Vector) -> Vector:
        self._check_j(j)
        return (self._blocks_v(v) @ self.derivative(j, y)).ravel()

    def apply_d2A(self, i: int, j: int, y: Vector, z: Vector) -> Vector:
        self._check_j(i)
        self._check_j(j)
        second = self.second_derivative(i, j, y)
        return (self._blocks_z(z) @ second.T).ravel()

    def dense_A(self, y: Vector) -> Matrix:
        return self.matrix(y)

    @property
    def has_dense(self) -> bool:
        return True


class FixedYModel(SeparableModel):
    """The z-only model A(y_bar) used by block trial point adjustment."""

    def __init__(self, base: SeparableModel, y_bar: Vector):
        self.base = base
        self.y_bar = np.array(y_bar, dtype=float)
        self.n_y = 0
        self.m = base.m
        self.c = base.c
        self.n_blocks = base.n_blocks

    def apply(self, y: Vector, z: Vector) -> Vector:
        return self.base.apply(self.y_bar, z)

    def apply_dA(self, j: int, y: Vector, z: Vector) -> Vector:
        raise ModelError("A fixed-y model has no nonlinear parameters.")

    def apply_At(self, y: Vector, v: Vector) -> Vector:
        return self.base.apply_At(self.y_bar, v)

    def apply_dAt(self, j: int, y: Vector, v: Vector) -> Vector:
        raise ModelError("A fixed-y model has no nonlinear parameters.")

    def dense_A(self, y: Vector) -> Matrix:
        return self.base.dense_A(self.y_bar)

    @property
    def has_dense(self) -> bool:
        return self.base.has_dense


@dataclass(frozen=True)
class ObjectiveEval:
    f: float
    g_y: Vector
    g_z: Vector
    bundle: CurvatureBundle
    mu: Vector

    @property
    def gradient(self) -> Vector:
        return np.concatenate([self.g_y, self.g_z])


def _check_dimensions(model: SeparableModel, y: Vector, z: Vector):
    if np.shape(y) != (model.n_y,) or np.shape(z) != (model.n_z,):
        raise ModelError(
            f"Expected y of length {model.n_y} and z of length"
            f" {model.n_z}, got {np.shape(y)} and {np.shape(z)}."
        )


def objective(
    model: SeparableModel, loss: LossModel, y: Vector, z: Vector
) -> ObjectiveEval:
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    _check_dimensions(model, y, z)
    mu = model.apply(y, z)
    try:
        f = loss_value(loss, mu)
        bundle = curvature_bundle(loss, mu)
    except DomainError as error:
        raise DomainError(
            f"Objective at component {error.index}: {error}",
            index=error.index,
        ) from error
    g_y = np.array(
        [model.apply_dA(j, y, z) @ bundle.grad for j in range(model.n_y)]
    )
    g_z = model.apply_At(y, bundle.grad)
    return ObjectiveEval(f=f, g_y=g_y, g_z=g_z, bundle=bundle, mu=mu)


def jacobian_blocks(
    model: SeparableModel, y: Vector, z: Vector, w: Vector
) -> t.Tuple[Matrix, t.List[Matrix]]:
    """Weighted Jacobian: J_y dense, J_z as its n_blocks diagonal blocks."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    _check_dimensions(model, y, z)
    A = model.dense_A(y)
    j_y = np.empty((model.rows, model.n_y))
    for j in range(model.n_y):
        j_y[:, j] = w * model.apply_dA(j, y, z)
    w_blocks = np.asarray(w, dtype=float).reshape(model.n_blocks, model.m)
    j_z_blocks = [w_k[:, None] * A for w_k in w_blocks]
    return j_y, j_z_blocks


def second_order_cross(
    model: SeparableModel, y: Vector, grad: Vector
) -> Matrix:
    """E_zy with columns (dA/dy_j)^T grad."""
    if np.shape(grad) != (model.rows,):
        raise ModelError(
            f"Expected a gradient of length {model.rows},"
            f" got {np.shape(grad)}."
        )
    cross = np.zeros((model.n_z, model.n_y))
    for j in range(model.n_y):
        cross[:, j] = model.apply_dAt(j, y, grad)
    return cross


def gauss_newton_operator(
    model: SeparableModel,
    y: Vector,
    z: Vector,
    w: Vector,
    lam: float = 0.0,
) -> BlockHessianOperator:
    """Products with the blocks of J^T J + lam * I, never forming J_z."""
    j_y = np.empty((model.rows, model.n_y))
    for j in range(model.n_y):
        j_y[:, j] = w * model.apply_dA(j, y, z)
    w_squared = w * w

    def byy(v: Vector) -> Vector:
        return j_y.T @ (j_y @ v) + lam * v

    def byz(v: Vector) -> Vector:
        return j_y.T @ (w * model.apply(y, v))

    def bzy(u: Vector) -> Vector:
        return model.apply_At(y, w * (j_y @ u))

    def bzz(v: Vector) -> Vector:
        return model.apply_At(y, w_squared * model.apply(y, v)) + lam * v

    return BlockHessianOperator(
        byy=byy, byz=byz, bzy=bzy, bzz=bzz, n_y=model.n_y, n_z=model.n_z
    )


@dataclass(frozen=True)
class SeparableProblem:
    model: SeparableModel
    loss: LossModel

    def __post_init__(self):
        if self.loss.size != self.model.rows:
            raise ModelError(
                f"Loss data of length {self.loss.size} does not match"
                f" the {self.model.rows} model rows."
            )

    @property
    def n_y(self) -> Count:
        return self.model.n_y

    @property
    def n_z(self) -> Count:
        return self.model.n_z

    @property
    def size(self) -> Count:
        return self.n_y + self.n_z

    def split(self, x: Vector) -> t.Tuple[Vector, Vector]:
        x = np.asarray(x, dtype=float)
        return x[: self.n_y], x[self.n_y :]

    def join(self, y: Vector, z: Vector) -> Vector:
        return np.concatenate([np.atleast_1d(y), np.atleast_1d(z)])

    def evaluate(self, x: Vector) -> ObjectiveEval:
        return objective(self.model, self.loss, *self.split(x))

    def value(self, x: Vector) -> float:
        y, z = self.split(x)
        return loss_value(self.loss, self.model.apply(y, z))

    def with_fixed_y(self, y: Vector) -> "SeparableProblem":
        return SeparableProblem(FixedYModel(self.model, y), self.loss)
