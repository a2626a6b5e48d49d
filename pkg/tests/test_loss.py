import numpy as np
import pytest

from semired.errors import DomainError, LossError
from semired.loss import (
    LossKind,
    LossModel,
    curvature_bundle,
    loss_value,
    weighted_ls_weights,
)
from tests.conftest import finite_difference


def test_least_squares_value_and_bundle():
    # Given
    loss = LossModel.least_squares(np.array([1.0, 2.0]))
    mu = np.array([2.0, 0.0])

    # When
    value = loss_value(loss, mu)
    bundle = curvature_bundle(loss, mu)

    # Then
    assert value == pytest.approx(2.5)
    np.testing.assert_allclose(bundle.grad, [1.0, -2.0])
    np.testing.assert_allclose(bundle.w, [1.0, 1.0])
    np.testing.assert_allclose(bundle.r, bundle.grad)


def test_weighted_least_squares_weights_floor():
    # Given
    b = np.array([0.0, 4.0, 0.25])

    # When
    weights = weighted_ls_weights(b, eps=1.0)

    # Then
    np.testing.assert_allclose(weights, [1.0, 0.5, 1.0])


def test_weighted_least_squares_rejects_negative_counts():
    with pytest.raises(DomainError, match=r"b\[1\]"):
        weighted_ls_weights(np.array([1.0, -2.0]), eps=1.0)


def test_weighted_least_squares_rejects_zero_floor():
    with pytest.raises(ValueError, match="eps must be positive"):
        weighted_ls_weights(np.array([1.0]), eps=0.0)


def test_poisson_value_and_bundle():
    # Given
    loss = LossModel.poisson(np.array([0.0, 3.0]))
    mu = np.array([2.0, 1.5])

    # When
    value = loss_value(loss, mu)
    bundle = curvature_bundle(loss, mu)

    # Then
    assert value == pytest.approx(3.5 - 3.0 * np.log(1.5))
    np.testing.assert_allclose(bundle.grad, [1.0, -1.0])
    np.testing.assert_allclose(bundle.curv, [0.0, 3.0 / 2.25])
    assert bundle.w[0] == 0.0
    assert bundle.r[0] == 0.0
    assert bundle.r[1] == pytest.approx(-1.0 / np.sqrt(3.0 / 2.25))


def test_poisson_outside_domain_names_component():
    # Given
    loss = LossModel.poisson(np.array([0.0, 3.0]))

    # When
    with pytest.raises(DomainError, match=r"mu\[1\]") as info:
        loss_value(loss, np.array([1.0, 0.0]))

    # Then
    assert info.value.index == 1


def test_poisson_zero_count_allows_any_mean():
    loss = LossModel.poisson(np.array([0.0, 1.0]))
    assert loss_value(loss, np.array([-1.0, 1.0])) == pytest.approx(0.0)


def test_poisson_rejects_negative_counts():
    with pytest.raises(DomainError, match="nonnegative"):
        LossModel.poisson(np.array([1.0, -1.0]))


def test_huber_regions():
    # Given
    loss = LossModel.huber(np.zeros(3), threshold=0.3)
    mu = np.array([0.1, 1.0, -2.0])

    # When
    value = loss_value(loss, mu)
    bundle = curvature_bundle(loss, mu)

    # Then
    assert value == pytest.approx(0.005 + 0.255 + 0.555)
    np.testing.assert_allclose(bundle.grad, [0.1, 0.3, -0.3])
    np.testing.assert_allclose(bundle.curv, [1.0, 0.0, 0.0])
    np.testing.assert_allclose(bundle.r, [0.1, 0.0, 0.0])


def test_scale_multiplies_components():
    # Given
    loss = LossModel.least_squares(np.zeros(2), scale=np.array([2.0, 0.0]))
    mu = np.array([1.0, 5.0])

    # When
    bundle = curvature_bundle(loss, mu)

    # Then
    assert loss_value(loss, mu) == pytest.approx(1.0)
    np.testing.assert_allclose(bundle.w, [np.sqrt(2.0), 0.0])
    np.testing.assert_allclose(bundle.r, [np.sqrt(2.0), 0.0])


@pytest.mark.parametrize(
    "loss",
    [
        LossModel.least_squares(np.array([1.0, 2.0, 0.5])),
        LossModel.weighted_least_squares(np.array([0.0, 9.0, 0.5])),
        LossModel.poisson(np.array([0.0, 3.0, 7.0])),
        LossModel.huber(np.array([0.0, 1.0, -1.0]), threshold=0.3),
        LossModel.huber(
            np.array([0.0, 1.0, -1.0]), scale=np.array([0.1, 0.9, 0.5])
        ),
    ],
    ids=lambda loss: loss.kind.value,
)
def test_bundle_matches_finite_differences(loss: LossModel):
    # Given points away from the Huber kinks and inside the Poisson domain
    mu = np.array([0.7, 2.5, 6.0]) if loss.kind == LossKind.POISSON else (
        np.array([0.1, 2.0, -0.9])
    )

    # When
    bundle = curvature_bundle(loss, mu)

    # Then
    grad = finite_difference(lambda v: loss_value(loss, v), mu)
    np.testing.assert_allclose(bundle.grad, grad, rtol=1e-6, atol=1e-8)
    curv = finite_difference(
        lambda v: curvature_bundle(loss, v).grad @ np.ones(3), mu
    )
    np.testing.assert_allclose(bundle.curv, curv, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(bundle.w**2, bundle.curv)


def test_length_mismatch():
    loss = LossModel.least_squares(np.zeros(2))
    with pytest.raises(LossError, match="length 2"):
        loss_value(loss, np.zeros(3))


def test_huber_threshold_must_be_positive():
    with pytest.raises(LossError, match="threshold"):
        LossModel.huber(np.zeros(2), threshold=0.0)


def test_non_finite_mean():
    loss = LossModel.least_squares(np.zeros(2))
    with pytest.raises(DomainError, match="not finite"):
        curvature_bundle(loss, np.array([0.0, np.nan]))


def _sampled_pairs(kind: LossKind, rng: np.random.Generator):
    if kind == LossKind.POISSON:
        b = rng.integers(0, 20, size=100).astype(float)
        mu = rng.uniform(0.5, 20.0, size=100)
    else:
        b = rng.uniform(0.0, 5.0, size=100)
        mu = b + rng.uniform(-3.0, 3.0, size=100)
    return mu, b


def _scalar_loss(kind: LossKind, b: float) -> LossModel:
    data = np.array([b])
    if kind == LossKind.LEAST_SQUARES:
        return LossModel.least_squares(data)
    if kind == LossKind.WEIGHTED_LEAST_SQUARES:
        return LossModel.weighted_least_squares(data)
    if kind == LossKind.POISSON:
        return LossModel.poisson(data)
    return LossModel.huber(data, threshold=0.3)


@pytest.mark.parametrize("kind", list(LossKind), ids=lambda k: k.value)
def test_bundle_matches_finite_differences_at_sampled_points(
    kind: LossKind, rng: np.random.Generator
):
    # Given
    mus, bs = _sampled_pairs(kind, rng)

    for mu, b in zip(mus, bs):
        loss = _scalar_loss(kind, b)
        if kind == LossKind.HUBER and abs(abs(mu - b) - 0.3) < 1e-4:
            continue
        point = np.array([mu])

        # When
        bundle = curvature_bundle(loss, point)

        # Then
        grad = finite_difference(lambda v: loss_value(loss, v), point)
        np.testing.assert_allclose(bundle.grad, grad, rtol=1e-5, atol=1e-6)
        curv = finite_difference(
            lambda v: curvature_bundle(loss, v).grad[0], point
        )
        np.testing.assert_allclose(bundle.curv, curv, rtol=1e-5, atol=1e-6)
        assert bundle.curv[0] >= 0.0


@pytest.mark.parametrize("kind", list(LossKind), ids=lambda k: k.value)
def test_loss_is_convex_along_sampled_chords(
    kind: LossKind, rng: np.random.Generator
):
    # Given
    first, bs = _sampled_pairs(kind, rng)
    second, _ = _sampled_pairs(kind, rng)
    loss = LossModel(kind, bs, threshold=0.3)

    for a, c in zip(first, second):
        # When
        mid = 0.5 * (a + c)
        value = [
            loss_value(loss, np.full(bs.size, v)) for v in (a, mid, c)
        ]

        # Then
        assert value[1] <= 0.5 * (value[0] + value[2]) + 1e-9 * abs(
            value[1]
        ) + 1e-12
