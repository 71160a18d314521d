import numpy as np
import pytest

import gradcheck
import linalg
import similarity
from errors import ConfigError, DegenerateInputError, DimensionError
from similarity import CkaConfig

CONFIGS = [CkaConfig(center=True), CkaConfig(center=False)]


def brute_force_cka(x, y, center=True):
    """Triple loops over the Frobenius sums; no matrix products."""
    x = np.array(x, dtype=float)
    y = np.array(y, dtype=float)
    if center:
        x = x - x.mean(axis=0)
        y = y - y.mean(axis=0)
    n = x.shape[0]

    def cross(a, b):
        total = 0.0
        for p in range(a.shape[1]):
            for q in range(b.shape[1]):
                s = 0.0
                for i in range(n):
                    s += a[i, p] * b[i, q]
                total += s * s
        return total

    return cross(y, x) / (np.sqrt(cross(x, x)) * np.sqrt(cross(y, y)))


def brute_force_pairwise(x, y, center=True):
    x = np.array(x, dtype=float)
    y = np.array(y, dtype=float)
    if center:
        x = x - x.mean(axis=0)
        y = y - y.mean(axis=0)
    xt = x / np.sqrt(np.linalg.norm(x @ x.T))
    yt = y / np.sqrt(np.linalg.norm(y @ y.T))
    n = x.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            d = np.dot(xt[i], xt[j]) - np.dot(yt[i], yt[j])
            total += d * d
    return total


@pytest.mark.parametrize('cfg', CONFIGS)
def test_cka_matches_brute_force(rng, cfg):
    for shape_x, shape_y in [((8, 5), (8, 7)), ((4, 10), (4, 3)), ((6, 2), (6, 2))]:
        x = rng.standard_normal(shape_x)
        y = rng.standard_normal(shape_y)
        assert similarity.cka(x, y, cfg) == pytest.approx(brute_force_cka(x, y, cfg.center), abs=1e-12)


@pytest.mark.parametrize('cfg', CONFIGS)
def test_gram_cosine_equality(rng, cfg):
    worst = 0.0
    for _ in range(500):
        x = rng.standard_normal((8, 5))
        y = rng.standard_normal((8, 7))
        worst = max(worst, abs(similarity.cka(x, y, cfg) - similarity.cka_via_gram_cosine(x, y, cfg)))
    assert worst < 1e-10


def test_identical_and_scaled_inputs(rng):
    x = rng.standard_normal((6, 4))
    assert similarity.cka(x, x) == pytest.approx(1.0, abs=1e-12)
    assert similarity.cka_via_gram_cosine(x, x) == pytest.approx(1.0, abs=1e-12)
    assert similarity.cka_via_gram_cosine(3.7 * x, x) == pytest.approx(1.0, abs=1e-10)


def test_hand_computed_value():
    # uncentered: ‖YᵀX‖² = 1, ‖XᵀX‖ = √2, ‖YᵀY‖ = 1
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([[1.0], [0.0]])
    assert similarity.cka(x, y, CkaConfig(center=False)) == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-15)


@pytest.mark.parametrize('cfg', CONFIGS)
def test_range_and_symmetry(rng, cfg):
    for _ in range(500):
        x = rng.standard_normal((8, 5))
        y = rng.standard_normal((8, 7))
        value = similarity.cka(x, y, cfg)
        assert 0.0 <= value <= 1.0 + 1e-12
        assert abs(value - similarity.cka(y, x, cfg)) < 1e-12


@pytest.mark.parametrize('cfg', CONFIGS)
def test_invariances(rng, cfg):
    for _ in range(200):
        x = rng.standard_normal((8, 5))
        y = rng.standard_normal((8, 7))
        base = similarity.cka(x, y, cfg)
        q1 = linalg.random_orthogonal(5, rng)
        q2 = linalg.random_orthogonal(7, rng)
        assert abs(similarity.cka(x @ q1, y @ q2, cfg) - base) < 1e-10
        for a in (1e-3, 1.0, 1e3):
            for b in (1e-3, 1.0, 1e3):
                assert abs(similarity.cka(a * x, b * y, cfg) - base) < 1e-10


@pytest.mark.parametrize('cfg', CONFIGS)
def test_mmd_decomposition(rng, cfg):
    for _ in range(500):
        x = rng.standard_normal((6, 4))
        y = rng.standard_normal((6, 4))
        d = similarity.mmd_decomposition(x, y, cfg)
        assert abs(d.mmd_form - 2.0 * similarity.cka(x, y, cfg)) < 1e-8
        assert d.mmd_form <= d.jensen_bound + 1e-10
        assert d.cka == pytest.approx(similarity.cka(x, y, cfg), abs=1e-12)
    x = rng.standard_normal((6, 4))
    y = rng.standard_normal((6, 4))
    d = similarity.mmd_decomposition(x, y, cfg)
    assert d.pairwise_term == pytest.approx(brute_force_pairwise(x, y, cfg.center), abs=1e-12)


def test_mmd_identical_inputs(rng):
    x = rng.standard_normal((6, 4))
    d = similarity.mmd_decomposition(x, x)
    assert d.pairwise_term == pytest.approx(0.0, abs=1e-14)
    assert d.mmd_form == pytest.approx(2.0, abs=1e-14)
    assert d.cka == pytest.approx(1.0, abs=1e-12)


def test_jensen_bound_is_two_when_centered(rng):
    # centered rows sum to zero, so both Gram sums vanish
    d = similarity.mmd_decomposition(rng.standard_normal((6, 4)), rng.standard_normal((6, 4)))
    assert d.jensen_bound == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize('cfg', CONFIGS)
def test_gradient_matches_finite_differences(rng, cfg):
    for _ in range(100):
        x = rng.standard_normal((5, 3))
        y = rng.standard_normal((5, 3))
        analytic = similarity.cka_gradient(x, y, cfg)
        numeric = gradcheck.finite_difference_gradient(lambda v: similarity.cka(v, y, cfg), x)
        assert analytic.shape == x.shape
        assert gradcheck.max_relative_error(analytic, numeric) < 1e-4


def test_gradient_wide_inputs(rng):
    x = rng.standard_normal((4, 9))
    y = rng.standard_normal((4, 2))
    analytic = similarity.cka_gradient(x, y)
    numeric = gradcheck.finite_difference_gradient(lambda v: similarity.cka(v, y), x)
    assert gradcheck.max_relative_error(analytic, numeric) < 1e-4


def test_gradient_vanishes_at_maximum(rng):
    x = rng.standard_normal((6, 4))
    np.testing.assert_allclose(similarity.cka_gradient(x, x), 0.0, atol=1e-12)
    for _ in range(20):
        d = rng.standard_normal(x.shape)
        assert abs(gradcheck.directional_derivative(lambda v: similarity.cka(v, x), x, d)) <= 1e-6


def test_gradient_direction_scale_invariant(rng):
    x = rng.standard_normal((6, 4))
    y = rng.standard_normal((6, 3))
    g1 = similarity.cka_gradient(x, y)
    g2 = similarity.cka_gradient(7.5 * x, y)
    np.testing.assert_allclose(g1 / np.linalg.norm(g1), g2 / np.linalg.norm(g2), atol=1e-8)


def test_centered_gradient_columns_sum_to_zero(rng):
    g = similarity.cka_gradient(rng.standard_normal((6, 4)), rng.standard_normal((6, 3)))
    np.testing.assert_allclose(g.sum(axis=0), 0.0, atol=1e-12)


def test_cka_loss(rng):
    x = rng.standard_normal((6, 4))
    y = rng.standard_normal((6, 3))
    value, grad = similarity.cka_loss(x, y)
    assert value == pytest.approx(1.0 - similarity.cka(x, y), abs=1e-15)
    np.testing.assert_array_equal(grad, -similarity.cka_gradient(x, y))


def test_errors(rng):
    x = rng.standard_normal((5, 3))
    with pytest.raises(DimensionError):
        similarity.cka(x, rng.standard_normal((4, 3)))
    with pytest.raises(DimensionError):
        similarity.cka(x[:1], x[:1])
    with pytest.raises(DegenerateInputError):
        similarity.cka(np.ones((5, 3)), x)
    with pytest.raises(DegenerateInputError):
        similarity.cka(np.zeros((5, 3)), x, CkaConfig(center=False))
    with pytest.raises(ConfigError):
        CkaConfig(eps=0.0)


def test_layer_cka_matrix(rng):
    layers = [rng.standard_normal((10, k)) for k in (3, 5, 8)]
    same = similarity.layer_cka_matrix(layers, layers)
    np.testing.assert_allclose(np.diag(same), 1.0, atol=1e-12)

    other = [rng.standard_normal((10, k)) for k in (2, 4, 6)]
    matrix = similarity.layer_cka_matrix(layers[:2], other)
    assert matrix.shape == (2, 3)
    for i in range(2):
        for j in range(3):
            assert matrix[i, j] == similarity.cka(layers[i], other[j])

    parallel = similarity.layer_cka_matrix(layers[:2], other, workers=4)
    np.testing.assert_array_equal(parallel, matrix)


def test_layer_cka_matrix_names_failing_pair(rng):
    layers = [rng.standard_normal((10, 3)), rng.standard_normal((9, 3))]
    with pytest.raises(DimensionError, match=r'layer pair \(0, 1\)'):
        similarity.layer_cka_matrix(layers[:1], layers)
    with pytest.raises(DimensionError):
        similarity.layer_cka_matrix([], layers)
