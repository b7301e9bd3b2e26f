import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedprune.errors import InputDomainError, ShapeError
from fedprune.masking import mask_from_scores
from fedprune.metrics import (Metric, compute_scores, feature_norms, score_magnitude, score_ria,
                              score_sparsegpt_diag, score_wanda)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_feature_norms_examples(rng):
    np.testing.assert_array_equal(feature_norms([[3.0], [4.0]]), [5.0])
    np.testing.assert_array_equal(feature_norms(np.zeros((3, 2))), [0.0, 0.0])
    X = rng.standard_normal((8, 4))
    expect = [math.sqrt(sum(X[t, j] ** 2 for t in range(8))) for j in range(4)]
    np.testing.assert_allclose(feature_norms(X), expect, rtol=1e-14)


def test_feature_norms_rejects_empty():
    with pytest.raises(InputDomainError):
        feature_norms(np.zeros((0, 3)))


def test_magnitude_examples():
    np.testing.assert_array_equal(score_magnitude([[-2.0, 1.0]]), [[2.0, 1.0]])
    assert np.all(score_magnitude(np.zeros((3, 3))) == 0)


@given(arrays(np.float64, (4, 5), elements=finite))
def test_scores_are_sign_invariant(W):
    norms = np.linspace(0.5, 2.0, 5)
    X = np.random.default_rng(0).standard_normal((9, 5))
    np.testing.assert_array_equal(score_magnitude(W), score_magnitude(-W))
    np.testing.assert_array_equal(score_wanda(W, norms), score_wanda(-W, norms))
    np.testing.assert_array_equal(score_ria(W, norms), score_ria(-W, norms))
    np.testing.assert_array_equal(score_sparsegpt_diag(W, X), score_sparsegpt_diag(-W, X))


def test_wanda_examples():
    W = [[2.0, -1.0], [0.5, 3.0]]
    np.testing.assert_array_equal(score_wanda(W, [1.0, 2.0]), [[2.0, 2.0], [0.5, 6.0]])
    np.testing.assert_array_equal(score_wanda(W, [1.0, 1.0]), score_magnitude(W))


def test_wanda_column_ranking_matches_magnitude(rng):
    W = rng.standard_normal((12, 6))
    norms = rng.random(6) + 0.1
    S = score_wanda(W, norms)
    for j in range(6):
        assert list(np.argsort(S[:, j], kind="stable")) == list(np.argsort(np.abs(W[:, j]), kind="stable"))


def test_wanda_length_mismatch():
    with pytest.raises(ShapeError):
        score_wanda(np.ones((2, 3)), [1.0, 1.0])


def test_ria_examples():
    np.testing.assert_array_equal(score_ria(np.ones((2, 2)), [1.0, 1.0]), np.ones((2, 2)))
    W = np.array([[0.0, 0.0], [1.0, 2.0]])
    S = score_ria(W, [1.0, 4.0])
    assert np.all(S[0] == 0) and np.all(np.isfinite(S))


def test_ria_matches_scalar_loop(rng):
    W = rng.standard_normal((4, 4))
    norms = rng.random(4) + 0.2
    a = np.abs(W)
    expect = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            col = sum(a[r, j] for r in range(4))
            row = sum(a[i, c] for c in range(4))
            expect[i, j] = (a[i, j] / col + a[i, j] / row) * norms[j] ** 0.5
    np.testing.assert_allclose(score_ria(W, norms), expect, rtol=1e-13)
    np.testing.assert_allclose(score_ria(W, norms, alpha=1.0),
                               expect / np.sqrt(norms) * norms, rtol=1e-13)


def gauss_jordan_inverse(A):
    n = len(A)
    M = [list(map(float, A[i])) + [1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(M[r][c]))
        M[c], M[p] = M[p], M[c]
        piv = M[c][c]
        M[c] = [v / piv for v in M[c]]
        for r in range(n):
            if r != c and M[r][c] != 0.0:
                f = M[r][c]
                M[r] = [a - f * b for a, b in zip(M[r], M[c])]
    return [row[n:] for row in M]


def test_sparsegpt_identity_hessian(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    W = rng.standard_normal((4, 3))
    np.testing.assert_allclose(score_sparsegpt_diag(W, Q, lam=1e-12), W ** 2, rtol=1e-9)


def test_sparsegpt_zero_weights(rng):
    assert np.all(score_sparsegpt_diag(np.zeros((3, 4)), rng.standard_normal((5, 4))) == 0)


def test_sparsegpt_matches_gauss_jordan(rng):
    X = rng.standard_normal((6, 3))
    W = rng.standard_normal((4, 3))
    gram = [[sum(X[t, i] * X[t, j] for t in range(6)) for j in range(3)] for i in range(3)]
    lam = 0.01 * sum(gram[i][i] for i in range(3)) / 3
    inv = gauss_jordan_inverse([[gram[i][j] + (lam if i == j else 0.0) for j in range(3)] for i in range(3)])
    expect = np.array([[W[i, j] ** 2 / inv[j][j] for j in range(3)] for i in range(4)])
    np.testing.assert_allclose(score_sparsegpt_diag(W, X), expect, rtol=1e-8)
    np.testing.assert_allclose(score_sparsegpt_diag(W, X, lam=lam), expect, rtol=1e-8)


def test_sparsegpt_default_damping_handles_rank_deficiency():
    X = np.zeros((4, 3))
    X[:, 0] = 1.0  # gram is rank one
    S = score_sparsegpt_diag(np.ones((2, 3)), X)
    assert np.all(np.isfinite(S)) and np.all(S > 0)


def test_sparsegpt_errors():
    with pytest.raises(ShapeError):
        score_sparsegpt_diag(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(InputDomainError):
        score_sparsegpt_diag(np.ones((2, 3)), np.ones((4, 3)), lam=0.0)


@settings(max_examples=50)
@given(st.floats(0.01, 100.0), st.sampled_from(["layer", "row", "column"]), st.integers(0, 10_000))
def test_uniform_activation_scaling_keeps_group_rankings(c, group, seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((6, 5))
    X = rng.standard_normal((10, 5))
    for metric in ("wanda", "ria"):
        a = mask_from_scores(compute_scores(metric, W, X), 0.5, group)
        b = mask_from_scores(compute_scores(metric, W, c * X), 0.5, group)
        np.testing.assert_array_equal(a, b)


def test_metric_names():
    assert [m.value for m in Metric] == ["magnitude", "wanda", "ria", "sparsegpt_diag"]
    assert Metric.parse("WANDA") is Metric.WANDA
    with pytest.raises(InputDomainError):
        Metric.parse("obs")
