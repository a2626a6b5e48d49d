from enum import Enum
from dataclasses import dataclass, field
import typing as t

import numpy as np

from semired.constants import HUBER_THRESHOLD, WEIGHTED_LS_EPS
from semired.errors import DomainError, LossError

Vector = np.ndarray


class LossKind(str, Enum):
    LEAST_SQUARES = "least-squares"
    WEIGHTED_LEAST_SQUARES = "weighted-least-squares"
    POISSON = "poisson"
    HUBER = "huber"


@dataclass(frozen=True)
class CurvatureBundle:
    grad: Vector
    curv: Vector
    w: Vector
    r: Vector


@dataclass(frozen=True)
class LossModel:
    """A separable loss L(mu) = sum_i s_i * l_i(mu_i).

    Poisson values drop the log(b_i!) constant. Components with vanishing
    curvature get w_i = 0 and, by convention, r_i = 0.
    """

    kind: LossKind
    data: Vector
    eps: float = WEIGHTED_LS_EPS
    threshold: float = HUBER_THRESHOLD
    scale: t.Optional[Vector] = None
    _weights: t.Optional[Vector] = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 1:
            raise LossError("Loss data must be a vector.")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "kind", LossKind(self.kind))

        if self.scale is not None:
            scale = np.asarray(self.scale, dtype=float)
            if scale.shape != data.shape:
                raise LossError("Loss scale must match the data length.")
            if np.any(scale < 0):
                raise LossError("Loss scale must be nonnegative.")
            object.__setattr__(self, "scale", scale)

        if self.kind == LossKind.HUBER and not self.threshold > 0:
            raise LossError("Huber threshold must be positive.")
        if self.kind == LossKind.POISSON and np.any(data < 0):
            raise DomainError(
                "Poisson loss: counts must be nonnegative.",
                index=int(np.argmax(data < 0)),
            )
        if self.kind == LossKind.WEIGHTED_LEAST_SQUARES:
            object.__setattr__(
                self, "_weights", weighted_ls_weights(data, self.eps)
            )

    @classmethod
    def least_squares(
        cls, b: Vector, scale: t.Optional[Vector] = None
    ) -> "LossModel":
        return cls(LossKind.LEAST_SQUARES, b, scale=scale)

    @classmethod
    def weighted_least_squares(
        cls, b: Vector, eps: float = WEIGHTED_LS_EPS
    ) -> "LossModel":
        return cls(LossKind.WEIGHTED_LEAST_SQUARES, b, eps=eps)

    @classmethod
    def poisson(cls, b: Vector) -> "LossModel":
        return cls(LossKind.POISSON, b)

    @classmethod
    def huber(
        cls,
        b: Vector,
        threshold: float = HUBER_THRESHOLD,
        scale: t.Optional[Vector] = None,
    ) -> "LossModel":
        return cls(LossKind.HUBER, b, threshold=threshold, scale=scale)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def domain_lo(self) -> Vector:
        lo = np.full(self.size, -np.inf)
        if self.kind == LossKind.POISSON:
            lo[self.data > 0] = 0.0
        return lo

    @property
    def weights(self) -> t.Optional[Vector]:
        return self._weights


def weighted_ls_weights(b: Vector, eps: float) -> Vector:
    if not eps > 0:
        raise ValueError("The weight floor eps must be positive.")
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        index = int(np.argmax(b < 0))
        raise DomainError(
            f"Weighted least squares: b[{index}] = {b[index]:g}"
            " is negative.",
            index=index,
        )
    return 1.0 / np.maximum(np.sqrt(b), eps)


def _check(loss: LossModel, mu: Vector) -> Vector:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != loss.data.shape:
        raise LossError(
            f"Expected mu of length {loss.size}, got shape {mu.shape}."
        )
    if loss.kind == LossKind.POISSON:
        outside = (loss.data > 0) & ~(mu > 0)
        if np.any(outside):
            index = int(np.argmax(outside))
            raise DomainError(
                f"Poisson loss: mu[{index}] = {mu[index]:g} is outside"
                " the domain (mu > 0).",
                index=index,
            )
    if not np.all(np.isfinite(mu)):
        index = int(np.argmax(~np.isfinite(mu)))
        raise DomainError(f"mu[{index}] is not finite.", index=index)
    return mu


def _scaled(loss: LossModel, values: Vector) -> Vector:
    if loss.scale is None:
        return values
    return loss.scale * values


def _huber(x: Vector, threshold: float) -> Vector:
    ax = np.abs(x)
    return np.where(
        ax <= threshold, 0.5 * x * x, threshold * (ax - 0.5 * threshold)
    )


def loss_value(loss: LossModel, mu: Vector) -> float:
    mu = _check(loss, mu)
    b = loss.data
    if loss.kind == LossKind.LEAST_SQUARES:
        terms = 0.5 * (mu - b) ** 2
    elif loss.kind == LossKind.WEIGHTED_LEAST_SQUARES:
        terms = 0.5 * (loss.weights * (mu - b)) ** 2
    elif loss.kind == LossKind.POISSON:
        # b_i log(mu_i) is taken as 0 where b_i = 0
        positive = b > 0
        logs = np.zeros_like(mu)
        logs[positive] = b[positive] * np.log(mu[positive])
        terms = mu - logs
    else:
        terms = _huber(mu - b, loss.threshold)
    return float(np.sum(_scaled(loss, terms)))


def curvature_bundle(loss: LossModel, mu: Vector) -> CurvatureBundle:
    mu = _check(loss, mu)
    b = loss.data
    if loss.kind == LossKind.LEAST_SQUARES:
        grad = mu - b
        curv = np.ones_like(mu)
    elif loss.kind == LossKind.WEIGHTED_LEAST_SQUARES:
        squared = loss.weights**2
        grad = squared * (mu - b)
        curv = squared.copy()
    elif loss.kind == LossKind.POISSON:
        positive = b > 0
        grad = np.ones_like(mu)
        curv = np.zeros_like(mu)
        grad[positive] = 1.0 - b[positive] / mu[positive]
        curv[positive] = b[positive] / mu[positive] ** 2
    else:
        x = mu - b
        grad = np.clip(x, -loss.threshold, loss.threshold)
        curv = (np.abs(x) <= loss.threshold).astype(float)

    grad = _scaled(loss, grad)
    curv = _scaled(loss, curv)
    w = np.sqrt(curv)
    r = np.zeros_like(grad)
    np.divide(grad, w, out=r, where=w > 0)
    return CurvatureBundle(grad=grad, curv=curv, w=w, r=r)
