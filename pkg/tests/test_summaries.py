import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize
from sklearn.base import clone
from sklearn.decomposition import PCA
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from vanbayes.simulators import lattice_adjacency
from vanbayes.summaries import (
    AutologisticSummary,
    FlattenCounts,
    LeastSquaresSummary,
    PCASummary,
    PriorQuantileTransform,
    RankDeficientError,
    RankToUnit,
    fit_logistic_batch,
    geary_c,
    least_squares_fit,
    order_weights,
)

# mpmath: sqrt(2) * erfinv(2 * gammainc(2, 0, 0.05 / 20, regularized=True) - 1)
GAMMA_2_20_AT_005_NORMAL_SCORE = -4.5181036813379594


class TestLeastSquares:
    def test_matches_lstsq(self, rng):
        X = rng.normal(size=(4, 30, 3))
        Y = rng.normal(size=(4, 30))
        coef, sigma = least_squares_fit(Y, X)
        for b in range(4):
            D = np.column_stack([np.ones(30), X[b]])
            ref, rss, *_ = np.linalg.lstsq(D, Y[b], rcond=None)
            np.testing.assert_allclose(coef[b], ref, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(sigma[b], np.sqrt(rss[0] / 26), rtol=1e-10)

    def test_summary_columns(self, rng):
        data = rng.normal(size=(5, 20, 4))
        Z = LeastSquaresSummary(include_coef_sd=True).fit_transform(data)
        coef, sigma = least_squares_fit(data[..., 0], data[..., 1:])
        assert Z.shape == (5, 4 + 1 + 1)
        np.testing.assert_allclose(Z[:, 4], np.log(sigma))
        np.testing.assert_allclose(Z[:, 5], coef[:, 1:].std(axis=1, ddof=1))

    def test_perfect_fit_uses_floor(self, rng):
        X = rng.normal(size=(1, 10, 2))
        Y = 1.0 + X[..., 0] - X[..., 1]
        Z = LeastSquaresSummary().transform(np.concatenate([Y[..., None], X], axis=-1))
        assert np.isfinite(Z).all()
        assert Z[0, 3] == pytest.approx(np.log(1e-8), abs=1.0)

    def test_rank_deficient_column_named(self, rng):
        X = rng.normal(size=(2, 10, 3))
        X[1, :, 2] = X[1, :, 0]
        with pytest.raises(RankDeficientError, match="dataset 1.*column 3"):
            least_squares_fit(rng.normal(size=(2, 10)), X)


class TestRankToUnit:
    def test_training_ranks(self):
        X = np.array([[3.0], [1.0], [2.0], [10.0]])
        Z = RankToUnit().fit(X).transform(X)
        # ranks 3, 1, 2, 4 of N = 4
        np.testing.assert_allclose(Z[:, 0], [(6 - 5) / 4, (2 - 5) / 4, (4 - 5) / 4, (8 - 5) / 4])

    def test_ties_get_average_rank(self):
        X = np.array([[1.0], [2.0], [2.0], [3.0]])
        Z = RankToUnit().fit(X).transform(X)
        assert Z[1, 0] == Z[2, 0] == 0.0

    def test_out_of_range_clamps(self):
        rt = RankToUnit().fit(np.arange(5.0)[:, None])
        np.testing.assert_allclose(rt.transform(np.array([[-100.0], [100.0]]))[:, 0], [-1.0, 1.0])

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            RankToUnit().transform(np.zeros((2, 1)))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40), st.lists(st.floats(-1e7, 1e7), min_size=1, max_size=10))
    def test_monotone_into_unit_interval(self, train, new):
        rt = RankToUnit().fit(np.array(train)[:, None])
        x = np.sort(np.array(new))
        z = rt.transform(x[:, None])[:, 0]
        assert np.all((z >= -1) & (z <= 1))
        assert np.all(np.diff(z) >= 0)


def _geary_bruteforce(x, W):
    n = x.size
    W = W.toarray()
    num = sum(W[i, j] * (x[i] - x[j]) ** 2 for i in range(n) for j in range(n))
    return (n - 1) * num / (2 * W.sum() * np.sum((x - x.mean()) ** 2))


class TestGeary:
    def test_order_weights_on_three_by_three(self):
        W1, W2, W3 = order_weights(lattice_adjacency((3, 3)))
        # corner site 0: neighbours at exact distance 1, 2 and 3
        assert [W1[0].sum(), W2[0].sum(), W3[0].sum()] == [2, 3, 2]
        assert W2[4].sum() == 4
        for W in (W1, W2, W3):
            assert (W != W.T).nnz == 0

    def test_matches_definition(self, rng):
        Ws = order_weights(lattice_adjacency((4, 5)))
        x = rng.normal(size=(3, 20))
        for W in Ws:
            C, degenerate = geary_c(x, W)
            assert not degenerate.any()
            np.testing.assert_allclose(C, [_geary_bruteforce(row, W) for row in x], rtol=1e-12)

    def test_expectation_one_under_independence(self, rng):
        W = order_weights(lattice_adjacency((10, 10)), (1,))[0]
        C, _ = geary_c(rng.normal(size=(4000, 100)), W)
        assert abs(C.mean() - 1.0) < 4 * C.std() / np.sqrt(C.size)

    def test_constant_field_is_flagged(self):
        W = order_weights(lattice_adjacency((3, 3)), (1,))[0]
        C, degenerate = geary_c(np.ones((1, 9)), W)
        assert C[0] == 1.0 and degenerate[0]


class TestLogistic:
    def test_matches_direct_optimization(self, rng):
        X = np.concatenate([np.ones((2, 200, 1)), rng.normal(size=(2, 200, 2))], axis=-1)
        beta_true = np.array([0.3, 1.0, -0.7])
        y = (rng.random((2, 200)) < 1 / (1 + np.exp(-X @ beta_true))).astype(float)
        est = fit_logistic_batch(y, X)
        for b in range(2):
            def nll(beta):
                eta = X[b] @ beta
                return np.sum(np.logaddexp(0, eta) - y[b] * eta) + 0.5e-6 * beta @ beta
            ref = optimize.minimize(nll, np.zeros(3), method="BFGS", options={"gtol": 1e-10}).x
            np.testing.assert_allclose(est[b], ref, atol=1e-5)

    def test_separable_data_stays_bounded(self):
        X = np.column_stack([np.ones(6), np.arange(6.0) - 2.5])[None]
        y = (X[..., 1] > 0).astype(float)
        est = fit_logistic_batch(y, X)
        assert np.all(np.isfinite(est)) and np.all(np.abs(est) <= 10)

    def test_autologistic_summary_shape(self, rng):
        A = lattice_adjacency((5, 5))
        X = np.concatenate([np.ones((3, 25, 1)), rng.normal(size=(3, 25, 2))], axis=-1)
        y = (rng.random((3, 25)) < 0.5).astype(float)
        Z = AutologisticSummary(A).fit_transform(np.concatenate([y[..., None], X], axis=-1))
        assert Z.shape == (3, 3 + 3 + 1)


class TestPCA:
    def test_agrees_with_sklearn(self, rng):
        X = rng.normal(size=(500, 8)) @ rng.normal(size=(8, 8))
        ours = PCASummary(n_components=4, block_size=77).fit(X)
        ref = PCA(n_components=4).fit(X)
        np.testing.assert_allclose(ours.explained_variance_, ref.explained_variance_, rtol=1e-9)
        # components agree up to sign
        dots = np.abs(np.sum(ours.components_ * ref.components_.T, axis=0))
        np.testing.assert_allclose(dots, 1.0, atol=1e-8)

    def test_variance_target_picks_smallest_count(self, rng):
        X = rng.normal(size=(400, 6)) * np.array([10, 5, 3, 1, 0.5, 0.1])
        pca = PCASummary(variance_target=0.9).fit(X)
        total = np.cumsum(pca.explained_variance_ratio_)
        assert total[-1] >= 0.9
        assert len(total) == 1 or total[-2] < 0.9

    def test_full_rank_inverse_reconstructs(self, rng):
        X = rng.normal(size=(50, 4))
        pca = PCASummary(n_components=4).fit(X)
        np.testing.assert_allclose(pca.inverse_transform(pca.transform(X)), X, atol=1e-10)

    def test_sign_convention(self, rng):
        pca = PCASummary(n_components=3).fit(rng.normal(size=(100, 5)))
        idx = np.argmax(np.abs(pca.components_), axis=0)
        assert np.all(pca.components_[idx, np.arange(3)] > 0)

    def test_rank_limit(self, rng):
        X = np.repeat(rng.normal(size=(30, 1)), 3, axis=1)
        with pytest.raises(ValueError, match="rank"):
            PCASummary(n_components=2).fit(X)

    def test_exactly_one_selector(self):
        with pytest.raises(ValueError):
            PCASummary().fit(np.zeros((3, 2)))

    def test_flattens_datasets(self, rng):
        pca = PCASummary(n_components=2).fit(rng.normal(size=(20, 3, 4)))
        assert pca.transform(rng.normal(size=(5, 3, 4))).shape == (5, 2)


class TestPriorQuantile:
    dists = ({"dist": "gamma", "a": 2.0, "scale": 20.0}, {"dist": "expon", "scale": 5.0})

    def test_frozen_value(self):
        t = PriorQuantileTransform(self.dists).fit()
        np.testing.assert_allclose(t.transform(np.array([[0.05, 5.0]]))[0, 0], GAMMA_2_20_AT_005_NORMAL_SCORE, rtol=1e-12)

    def test_round_trip(self, rng):
        t = PriorQuantileTransform(self.dists).fit()
        x = np.column_stack([rng.gamma(2, 20, 100), rng.exponential(5, 100)])
        np.testing.assert_allclose(t.inverse_transform(t.transform(x)), x, rtol=1e-8)

    def test_log_jacobian_matches_finite_difference(self):
        t = PriorQuantileTransform(self.dists).fit()
        x = np.array([[7.0, 2.0], [60.0, 11.0]])
        h = 1e-6
        fd = (t.transform(x + h) - t.transform(x - h)) / (2 * h)
        np.testing.assert_allclose(t.log_jacobian(x), np.log(fd), atol=1e-6)

    def test_clamped_entries_flagged(self):
        t = PriorQuantileTransform(self.dists).fit()
        out, flags = t.transform_with_flags(np.array([[1e-9, 1e4]]))
        assert flags.all() and np.all(np.isfinite(out))

    def test_column_count(self):
        with pytest.raises(ValueError, match="2 columns"):
            PriorQuantileTransform(self.dists).fit().transform(np.zeros((3, 3)))


def test_stateful_stages_compose_in_sklearn_pipeline(rng):
    data = rng.normal(size=(200, 30, 3))
    pipe = make_pipeline(FlattenCounts(), PCASummary(n_components=5), RankToUnit())
    Z = pipe.fit_transform(data)
    assert Z.shape == (200, 5)
    assert np.all(np.abs(Z) <= 1)
    assert clone(pipe).get_params()["pcasummary__n_components"] == 5


def test_flatten_counts_log1p():
    np.testing.assert_allclose(FlattenCounts(log1p=True).transform(np.array([[[0, 1], [2, 3]]])), [np.log1p([0, 1, 2, 3])])
