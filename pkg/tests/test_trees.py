import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import spearmanr
from sklearn.tree import DecisionTreeRegressor

from itr_bench.dgp import DgpSpec, sample_dataset
from itr_bench.trees import (
    BoostConfig, CausalForest, ForestConfig, GradientBoosting, RandomForest, TreeConfigError,
    fit_causal_forest, fit_gradient_boosting, fit_random_forest,
)


def _step_data(seed, n=500):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = np.where(X[:, 0] > 0, 2.0, -1.0) + 0.3 * rng.normal(size=n)
    return X, y


class TestConfig:
    def test_mtry_default(self):
        assert ForestConfig().resolve_mtry(500) == 23
        assert ForestConfig().resolve_mtry(1) == 1

    @pytest.mark.parametrize("kw", [{"n_trees": 0}, {"subsample_fraction": 0.0},
                                    {"subsample_fraction": 1.5}, {"min_leaf_size": 0}])
    def test_invalid_forest(self, kw):
        with pytest.raises(TreeConfigError):
            ForestConfig(**kw).validate()

    def test_invalid_mtry(self):
        with pytest.raises(TreeConfigError):
            ForestConfig(features_per_split=4).resolve_mtry(3)

    @pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"learning_rate": 1.5},
                                    {"l2_leaf_penalty": -1.0}, {"n_rounds": -1}])
    def test_invalid_boost(self, kw):
        with pytest.raises(TreeConfigError):
            BoostConfig(**kw).validate()


class TestRandomForest:
    def test_constant_response(self, rng):
        X = rng.normal(size=(50, 4))
        rf = RandomForest(n_trees=20).fit(X, np.full(50, 3.5))
        assert np.all(rf.predict(rng.normal(size=(10, 4))) == 3.5)

    def test_root_leaf_is_weighted_mean(self, rng):
        X = rng.normal(size=(40, 2))
        y = rng.normal(size=40)
        w = rng.uniform(0.5, 2, size=40)
        rf = RandomForest(n_trees=1, max_depth=0, bootstrap=False).fit(X, y, w)
        assert rf.predict(X[:3]) == pytest.approx(np.full(3, np.average(y, weights=w)))

    def test_step_function_fit(self):
        for seed in range(10):
            X, y = _step_data(seed)
            rf = RandomForest(n_trees=50, random_state=seed).fit(X, y)
            assert np.mean((rf.predict(X) - y) ** 2) < y.var() / 4

    def test_single_tree_matches_sklearn(self, rng):
        # one tree, every feature tried, no resampling: same greedy CART
        X = rng.normal(size=(200, 3))
        y = np.sin(2 * X[:, 0]) + X[:, 1] ** 2 + 0.1 * rng.normal(size=200)
        ours = RandomForest(n_trees=1, features_per_split=3, bootstrap=False, min_leaf_size=5,
                            max_depth=4).fit(X, y)
        ref = DecisionTreeRegressor(max_depth=4, min_samples_leaf=5).fit(X, y)
        Xt = rng.normal(size=(300, 3))
        np.testing.assert_allclose(ours.predict(Xt), ref.predict(Xt), atol=1e-10)

    def test_too_few_rows(self):
        with pytest.raises(TreeConfigError):
            RandomForest(min_leaf_size=5).fit(np.ones((9, 1)), np.ones(9))

    def test_seed_determinism(self):
        X, y = _step_data(1, 200)
        a = RandomForest(n_trees=10, random_state=4).fit(X, y).predict(X)
        b = RandomForest(n_trees=10, random_state=4).fit(X, y).predict(X)
        c = RandomForest(n_trees=10, random_state=5).fit(X, y).predict(X)
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    @given(st.integers(0, 10_000))
    def test_predictions_within_response_range(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(60, 3))
        y = rng.standard_cauchy(size=60)
        pred = RandomForest(n_trees=5, min_leaf_size=2, random_state=seed).fit(X, y).predict(
            rng.normal(size=(30, 3)) * 3)
        assert pred.min() >= y.min() - 1e-9 and pred.max() <= y.max() + 1e-9

    def test_oob_predictions_are_honest(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(300, 3))
        y = rng.normal(size=300)
        rf = RandomForest(n_trees=100, min_leaf_size=1).fit(X, y)
        # in-sample predictions memorise noise; out-of-bag ones do not
        assert np.corrcoef(rf.predict(X), y)[0, 1] > 0.5
        assert np.corrcoef(rf.oob_prediction_, y)[0, 1] < 0.3

    def test_functional_wrapper(self, rng):
        X, y = _step_data(2, 100)
        m = fit_random_forest(X, y, config=ForestConfig(n_trees=5, seed=1))
        assert np.array_equal(m.predict(X), RandomForest(n_trees=5, random_state=1).fit(X, y).predict(X))


class TestGradientBoosting:
    def test_zero_rounds_squared(self, rng):
        y = rng.normal(size=30)
        w = rng.uniform(0.5, 2, size=30)
        m = GradientBoosting(n_rounds=0).fit(rng.normal(size=(30, 2)), y, w)
        assert m.predict(np.zeros((2, 2))) == pytest.approx(np.full(2, np.average(y, weights=w)))

    def test_zero_rounds_logistic(self, rng):
        y = (rng.random(40) < 0.3).astype(float)
        m = GradientBoosting(n_rounds=0, loss="logistic").fit(rng.normal(size=(40, 2)), y)
        p = y.mean()
        assert m.decision_function(np.zeros((1, 2)))[0] == pytest.approx(np.log(p / (1 - p)))
        assert m.predict(np.zeros((1, 2)))[0] == pytest.approx(p)

    def test_constant_response(self, rng):
        m = GradientBoosting(n_rounds=20).fit(rng.normal(size=(30, 3)), np.full(30, -2.0))
        assert np.allclose(m.predict(rng.normal(size=(5, 3))), -2.0)

    def test_separable_logistic(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(300, 1))
            y = (x[:, 0] > 0.2).astype(float)
            m = GradientBoosting(n_rounds=50, loss="logistic", random_state=seed).fit(x, y)
            assert np.mean((m.predict(x) > 0.5) != y) < 0.05

    @given(st.integers(0, 10_000), st.sampled_from(["squared", "logistic"]))
    def test_training_loss_non_increasing(self, seed, loss):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(80, 3))
        y = X[:, 0] + rng.normal(size=80)
        if loss == "logistic":
            y = (y > 0).astype(float)
        m = GradientBoosting(n_rounds=15, loss=loss, random_state=seed).fit(X, y)
        assert np.all(np.diff(m.train_loss_) <= 1e-12)

    def test_one_stump_leaf_values(self):
        # y = [0,0,4,4], one stump, eta=1, lambda=1: leaf = sum(r)/(n_leaf + 1)
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([0.0, 0.0, 4.0, 4.0])
        m = GradientBoosting(n_rounds=1, learning_rate=1.0, max_depth=1, l2_leaf_penalty=1.0).fit(X, y)
        assert m.predict(np.array([[0.0], [3.0]])) == pytest.approx([2 - 4 / 3, 2 + 4 / 3])

    def test_functional_wrapper(self, rng):
        X, y = _step_data(3, 100)
        m = fit_gradient_boosting(X, y, config=BoostConfig(n_rounds=10, seed=2))
        assert np.array_equal(m.predict(X), GradientBoosting(n_rounds=10, random_state=2).fit(X, y).predict(X))


class TestCausalForest:
    def test_zero_effect(self):
        means = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(1000, 5))
            a = (rng.random(1000) < 0.5).astype(float)
            y = X[:, 0] + rng.normal(size=1000)
            cf = CausalForest(n_trees=100, nuisance_trees=100, random_state=seed).fit(
                X, y, a, propensity_model=lambda Z: np.full(len(Z), 0.5))
            means.append(np.mean(np.abs(cf.predict(X))))
        assert np.mean(means) <= 0.15

    def test_constant_effect(self):
        preds = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(2000, 3))
            a = (rng.random(2000) < 0.5).astype(float)
            y = 2.0 * a + rng.normal(size=2000)
            cf = CausalForest(n_trees=100, nuisance_trees=100, random_state=seed).fit(
                X, y, a, propensity_model=lambda Z: np.full(len(Z), 0.5))
            preds.append(cf.predict(X).mean())
        assert abs(np.mean(preds) - 2.0) <= 0.25

    def test_sparse_linear_ranking(self):
        spec = DgpSpec.from_id("rct-sparse-linear-identity", p=50)
        rhos = []
        for seed in range(3):
            d = sample_dataset(spec, 1000, seed)
            test = sample_dataset(spec, 300, 1000 + seed)
            cf = CausalForest(n_trees=200, nuisance_trees=200, random_state=seed).fit(
                d.W, d.Y, d.A, propensity_model=spec.propensity)
            rhos.append(spearmanr(cf.predict(test.W), spec.true_cate(test.W))[0])
        assert np.mean(rhos) >= 0.3

    def test_zero_trees_give_global_slope(self, rng):
        X = rng.normal(size=(100, 2))
        a = (rng.random(100) < 0.5).astype(float)
        y = a + rng.normal(size=100)
        cf = CausalForest(n_trees=0, nuisance_trees=20).fit(X, y, a)
        ry, ra = cf.residuals_
        assert np.all(cf.predict(X) == pytest.approx(ry @ ra / (ra @ ra)))

    def test_single_arm_leaves_fall_back(self, rng):
        # one treated row: the honest estimation half often holds no treated unit
        X = rng.normal(size=(200, 1))
        a = np.zeros(200)
        a[0] = 1.0
        y = rng.normal(size=200)
        fallbacks = 0
        for seed in range(10):
            cf = CausalForest(n_trees=1, nuisance_trees=20, random_state=seed).fit(
                X, y, a, propensity_model=lambda Z: np.full(len(Z), 0.5))
            pred = cf.predict(X)
            assert np.all(np.isfinite(pred))
            fallbacks += cf.n_fallback_ > 0
            if cf.n_fallback_:
                assert np.all(pred == cf.global_slope_)
        assert fallbacks > 0

    def test_rejects_non_binary_treatment(self, rng):
        with pytest.raises(ValueError):
            CausalForest(n_trees=2).fit(rng.normal(size=(30, 2)), rng.normal(size=30), np.full(30, 0.5))

    def test_determinism_and_wrapper(self, rng):
        X = rng.normal(size=(200, 3))
        a = (rng.random(200) < 0.5).astype(float)
        y = X[:, 0] * a + rng.normal(size=200)
        cfg = ForestConfig(n_trees=20, min_leaf_size=10, subsample_fraction=0.5, honesty=True, seed=3)
        pi = lambda Z: np.full(len(Z), 0.5)
        p1 = fit_causal_forest(X, y, a, pi_hat=pi, config=cfg).predict(X)
        p2 = fit_causal_forest(X, y, a, pi_hat=pi, config=cfg).predict(X)
        assert np.array_equal(p1, p2)
