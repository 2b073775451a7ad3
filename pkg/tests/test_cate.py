import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from itr_bench.cate import (
    EXTRA_STRATEGIES, STRATEGIES, CateEstimator, CateModel, InsufficientDataError, _nonzero,
    assign_treatment, classify_tems, fit_aipw_cate, fit_augmented_modified_covariates,
    fit_causal_forest_cate, fit_modified_covariates, fit_modified_outcome, fit_plugin, fit_strategy,
    has_builtin_tems,
)
from itr_bench.dgp import Dataset, DgpSpec, sample_dataset
from itr_bench.nuisance import FitContext, NuisanceEstimates, aipw_transform, clamp_pi

MU1_OPT = 1.0 * norm.cdf(1 / np.sqrt(40)) + np.sqrt(40) * norm.pdf(1 / np.sqrt(40))


def _relative_quality(model, spec, seed=777, n_test=20_000):
    """Noise-free value of the fitted rule over a large test sample, relative
    to the closed-form optimal value of the mu1 / identity design."""
    W = sample_dataset(spec, n_test, seed).W
    a = model.rule().assign(W)
    return spec.mean_outcome(W, a).mean() / MU1_OPT


def _simple(seed, n=1000, p=20, effect=lambda W: np.ones(len(W)), pi=0.5):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(n, p))
    a = (rng.random(n) < pi).astype(float)
    y = W[:, 0] + a * effect(W) + rng.normal(size=n)
    return Dataset(W, a, y, pi=np.full(n, pi))


class TestAipwTransform:
    def test_examples(self):
        assert aipw_transform(1, 3.0, 0.0, 0.0, 0.5) == 6.0
        assert aipw_transform(0, 1.0, 0.5, 2.0, 0.25) == pytest.approx(5 / 6)

    @given(st.floats(-10, 10), st.floats(-10, 10), st.sampled_from([0, 1]), st.floats(0.1, 0.9))
    def test_zero_residual_is_propensity_free(self, mu0, mu1, a, pi):
        y = mu1 if a else mu0
        assert aipw_transform(a, y, mu0, mu1, pi) == pytest.approx(mu1 - mu0, abs=1e-12)

    def test_invariant_across_propensities(self):
        vals = [aipw_transform(1, 2.0, 0.3, 2.0, p) for p in np.arange(0.1, 1.0, 0.1)]
        assert np.allclose(vals, 1.7)

    def test_clamping(self):
        est = NuisanceEstimates(np.zeros(3), np.zeros(3), np.array([0.0, 0.5, 1.0]), False)
        assert est.pi.tolist() == [0.01, 0.5, 0.99]

    def _mu1_sample(self, n, seed):
        spec = DgpSpec.from_id("rct-sparse-linear-identity", p=20)
        return spec, sample_dataset(spec, n, seed)

    def test_conditional_mean_by_decile(self):
        spec, d = self._mu1_sample(20_000, 1)
        T = aipw_transform(d.A, d.Y, spec.mean_outcome(d.W, 0), spec.mean_outcome(d.W, 1), d.pi)
        g = spec.true_cate(d.W)
        edges = np.quantile(g, np.linspace(0, 1, 11))
        bins = np.clip(np.searchsorted(edges, g, side="right") - 1, 0, 9)
        for b in range(10):
            m = bins == b
            se = T[m].std(ddof=1) / np.sqrt(m.sum())
            assert abs(T[m].mean() - g[m].mean()) <= 3 * se

    @pytest.mark.parametrize("scenario", ["wrong_pi", "wrong_mu"])
    def test_double_robustness(self, scenario):
        spec, d = self._mu1_sample(20_000, 2)
        mu0, mu1, pi = spec.mean_outcome(d.W, 0), spec.mean_outcome(d.W, 1), d.pi
        if scenario == "wrong_pi":
            pi = np.full(d.n, 0.3)
        else:
            mu0, mu1 = np.zeros(d.n), np.full(d.n, 5.0)
        T = aipw_transform(d.A, d.Y, mu0, mu1, pi)
        se = T.std(ddof=1) / np.sqrt(d.n)
        # the mu1 design has ATE = 1 (zero-mean covariates)
        assert abs(T.mean() - 1.0) <= 3 * se


class TestRules:
    @pytest.mark.parametrize("g,expected", [(0.2, 1), (0.0, 0), (-3.0, 0)])
    def test_assign_examples(self, g, expected):
        model = CateModel("x", lambda W: np.full(W.shape[0], g))
        assert assign_treatment(model.rule(), np.zeros(3)) == expected

    def test_classify_examples(self):
        assert _nonzero([0, 0.3, 0, -0.1, 0]).tolist() == [1, 3]
        assert _nonzero(np.zeros(5)).tolist() == []
        assert classify_tems(CateModel("plugin_xgb", lambda W: W[:, 0])) is None

    def test_non_finite_output_raises(self):
        with pytest.raises(FloatingPointError):
            CateModel("x", lambda W: np.full(W.shape[0], np.nan)).predict_cate(np.zeros((2, 2)))

    def test_builtin_table(self):
        yes = {k for k, v in STRATEGIES.items() if v}
        assert yes == {"plugin_lasso", "mc_lasso", "aug_mc_lasso", "aipw_lasso"}
        assert len(STRATEGIES) == 9
        assert has_builtin_tems("modified_outcome") and EXTRA_STRATEGIES == {"modified_outcome": True}
        with pytest.raises(KeyError):
            has_builtin_tems("nope")


class TestPlugin:
    @staticmethod
    def _null_modifier_fits(p=20):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            W = rng.normal(size=(1000, p))
            a = (rng.random(1000) < 0.5).astype(float)
            d = Dataset(W, a, a + rng.normal(size=1000))
            yield fit_plugin(d, seed=seed), rng.normal(size=(200, p))

    def test_constant_effect_small_spurious_sets(self):
        close, sizes = 0, []
        for model, W in self._null_modifier_fits():
            close += np.all(np.abs(model.predict_cate(W) - 1) < 0.3)
            sizes.append(model.builtin_tems.size)
        assert close >= 16
        assert np.median(sizes) <= 2

    @pytest.mark.xfail(strict=True, reason=(
        "min-CV lambda keeps a few noise interactions in about half of the seeds "
        "(9/20 empty here, 7/20 for sklearn LassoCV on the same designs)"))
    def test_constant_effect_empty_modifier_set(self):
        empty = sum(m.builtin_tems.size == 0 for m, _ in self._null_modifier_fits())
        assert empty >= 16

    def test_zero_interactions_give_constant_rule(self):
        d = _simple(0)
        model = fit_plugin(d)
        if model.builtin_tems.size == 0:
            assign = model.rule().assign(np.random.default_rng(1).normal(size=(50, 20)))
            assert np.all(assign == assign[0])

    def test_two_surface_no_tems_and_arm_check(self):
        d = _simple(1, n=300, p=5, effect=lambda W: W[:, 1])
        m = fit_plugin(d, "xgboost_two_surface", boost_params={"n_rounds": 30})
        assert m.builtin_tems is None
        assert np.corrcoef(m.predict_cate(d.W), d.W[:, 1])[0, 1] > 0.5
        few = Dataset(d.W, np.r_[np.ones(9), np.zeros(291)], d.Y)
        with pytest.raises(InsufficientDataError):
            fit_plugin(few, "xgboost_two_surface")

    def test_zero_covariates(self):
        d = _simple(2, p=3)
        empty = d.subset_columns(np.zeros(0, dtype=int))
        for strategy in list(STRATEGIES) + list(EXTRA_STRATEGIES):
            m = fit_strategy(strategy, empty, FitContext(empty, True, 0), 0)
            cate = m.predict_cate(np.zeros((4, 0)))
            assert np.all(cate == cate[0]) and np.isfinite(cate[0])

    @pytest.mark.slow
    def test_rct_sparse_linear_quality(self):
        spec = DgpSpec.from_id("rct-sparse-linear-identity")
        d = sample_dataset(spec, 1000, 5)
        assert _relative_quality(fit_plugin(d, seed=5), spec) >= 0.90


class TestModifiedOutcome:
    def test_zero_response(self):
        d = _simple(0, n=200, p=5)
        z = Dataset(d.W, d.A, np.zeros(200), pi=d.pi)
        assert np.all(fit_modified_outcome(z, d.pi).predict_cate(d.W) == 0)

    def test_constant_transformed_response(self):
        d = _simple(0, n=200, p=5)
        z = Dataset(d.W, d.A, (2 * d.A - 1) / 2, pi=d.pi)
        assert np.allclose(fit_modified_outcome(z, d.pi).predict_cate(d.W), 1.0)

    def test_rejects_boundary_propensity(self):
        d = _simple(0, n=50, p=3)
        with pytest.raises(ValueError):
            fit_modified_outcome(d, np.r_[0.0, np.full(49, 0.5)])

    def test_sign_agreement(self):
        spec = DgpSpec.from_id("rct-sparse-linear-identity", p=100)
        agree = []
        for seed in range(3):
            d = sample_dataset(spec, 1000, seed)
            test = sample_dataset(spec, 2000, 100 + seed)
            m = fit_modified_outcome(d, d.pi, seed)
            agree.append(np.mean(np.sign(m.predict_cate(test.W)) == np.sign(spec.true_cate(test.W))))
        assert np.mean(agree) >= 0.70


class TestModifiedCovariates:
    def test_half_propensity_gives_equal_weights(self):
        d = _simple(0, n=100, p=3)
        from itr_bench.cate import _mc_denominator
        assert np.all(_mc_denominator(d.A, np.full(100, 0.5)) == 0.5)
        pi = np.random.default_rng(0).uniform(0.2, 0.8, 100)
        den = _mc_denominator(d.A, pi)
        assert np.allclose(den, np.where(d.A == 1, pi, 1 - pi))

    def test_linear_recovers_effect(self):
        d = _simple(3, n=2000, p=10, effect=lambda W: 1 + 2 * W[:, 1])
        m = fit_modified_covariates(d, d.pi)
        assert 1 in m.builtin_tems.tolist()
        coef = m.components["lasso"].coef_
        assert coef[0] == pytest.approx(1.0, abs=0.3) and coef[2] == pytest.approx(2.0, abs=0.3)

    def test_weighted_loss_is_minimized(self):
        # unpenalized limit: compare with weighted least squares on the same design
        rng = np.random.default_rng(4)
        n, p = 400, 3
        W = rng.normal(size=(n, p))
        pi = rng.uniform(0.3, 0.7, n)
        a = (rng.random(n) < pi).astype(float)
        y = a * (1 + W[:, 0]) + rng.normal(size=n)
        d = Dataset(W, a, y, pi=pi)
        m = fit_modified_covariates(d, pi)
        s = 2 * a - 1
        w = 1 / np.where(a == 1, pi, 1 - pi)
        X = np.column_stack([np.ones(n), s / 2, s[:, None] * W / 2])
        ref = np.linalg.lstsq(X * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)[0]
        np.testing.assert_allclose(m.components["lasso"].coef_, ref[1:], atol=0.1)

    def test_binomial_link(self):
        rng = np.random.default_rng(5)
        n = 1000
        W = rng.normal(size=(n, 4))
        a = (rng.random(n) < 0.5).astype(float)
        y = (rng.random(n) < 1 / (1 + np.exp(-(2 * a - 1) * W[:, 0]))).astype(float)
        d = Dataset(W, a, y, pi=np.full(n, 0.5))
        m = fit_modified_covariates(d, d.pi, family="binomial")
        lasso = m.components["lasso"]
        eta = lasso.coef_[0] + W @ lasso.coef_[1:]
        np.testing.assert_allclose(m.predict_cate(W), np.tanh(eta / 4), atol=1e-12)
        assert np.corrcoef(m.predict_cate(W), W[:, 0])[0, 1] > 0.9
        # delta = 0 maps to a zero effect
        assert (np.exp(0) - 1) / (np.exp(0) + 1) == 0

    def test_positivity_warning(self):
        d = _simple(0, n=200, p=3)
        pi = np.r_[np.full(40, 0.001), np.full(160, 0.5)]
        with pytest.warns(UserWarning):
            m = fit_modified_covariates(d, pi)
        assert m.diagnostics["positivity_warning"]
        assert m.diagnostics["positivity_share"] == pytest.approx(0.2)

    def test_xgboost_no_tems(self):
        d = _simple(6, n=400, p=5, effect=lambda W: 2 * W[:, 2])
        m = fit_modified_covariates(d, d.pi, learner="xgboost", boost_params={"n_rounds": 50})
        assert m.builtin_tems is None
        assert np.corrcoef(m.predict_cate(d.W), d.W[:, 2])[0, 1] > 0.7

    @pytest.mark.slow
    def test_rct_sparse_linear_quality(self):
        spec = DgpSpec.from_id("rct-sparse-linear-identity")
        d = sample_dataset(spec, 1000, 6)
        assert _relative_quality(fit_modified_covariates(d, d.pi, seed=6), spec) >= 0.75


class TestAugmented:
    def test_perfect_main_effect_and_no_effect(self):
        d = _simple(0, n=200, p=4, effect=lambda W: np.zeros(len(W)))
        exact = Dataset(d.W, d.A, d.W[:, 0], pi=d.pi)
        m = fit_augmented_modified_covariates(exact, d.pi, main_effect=d.W[:, 0])
        assert np.all(m.predict_cate(d.W) == 0)

    def test_weights_unchanged_by_augmentation(self):
        d = _simple(1, n=300, p=4, effect=lambda W: 1 + W[:, 1])
        pi = np.random.default_rng(0).uniform(0.3, 0.7, 300)
        plain = fit_modified_covariates(Dataset(d.W, d.A, d.Y - 0.7 * d.W[:, 0], pi=pi), pi, seed=2,
                                        strategy="aug_mc_lasso")
        aug = fit_augmented_modified_covariates(d, pi, seed=2, main_effect=0.7 * d.W[:, 0])
        np.testing.assert_array_equal(plain.predict_cate(d.W), aug.predict_cate(d.W))

    @pytest.mark.slow
    def test_rct_sparse_linear_quality(self):
        spec = DgpSpec.from_id("rct-sparse-linear-identity")
        d = sample_dataset(spec, 500, 7)
        assert _relative_quality(fit_augmented_modified_covariates(d, d.pi, seed=7), spec) >= 0.90


class TestAipwCate:
    def test_true_nuisances_lasso(self):
        spec = DgpSpec.from_id("rct-sparse-linear-identity", p=50)
        d = sample_dataset(spec, 2000, 8)
        nu = NuisanceEstimates(spec.mean_outcome(d.W, 0), spec.mean_outcome(d.W, 1), d.pi, True)
        m = fit_aipw_cate(d, nu, seed=8)
        assert set(range(10)) <= set(m.builtin_tems.tolist())
        np.testing.assert_allclose(m.components["pseudo_outcomes"], nu.pseudo_outcomes(d.A, d.Y))
        assert _relative_quality(m, spec) >= 0.95

    @pytest.mark.slow
    def test_rct_sparse_linear_quality(self):
        spec = DgpSpec.from_id("rct-sparse-linear-identity")
        d = sample_dataset(spec, 1000, 9)
        m = fit_strategy("aipw_lasso", d, FitContext(d, True, 9), 9)
        assert _relative_quality(m, spec) >= 0.90


class TestEstimatorApi:
    def test_coherence_all_strategies(self):
        d = _simple(3, n=300, p=6, effect=lambda W: W[:, 0] - 0.2)
        Wt = np.random.default_rng(0).normal(size=(100, 6))
        ctx = FitContext(d, True, 0)
        from itr_bench.cate import StrategySettings
        fast = StrategySettings(boost_params={"n_rounds": 20}, forest_trees=20, nuisance_trees=20)
        from itr_bench.nuisance import NuisanceConfig
        ctx = FitContext(d, True, 0, NuisanceConfig(sl_folds=3, sl_forest_trees=10, sl_boost_rounds=10))
        for strategy in list(STRATEGIES) + list(EXTRA_STRATEGIES):
            m = fit_strategy(strategy, d, ctx, 0, settings=fast)
            assert np.array_equal(m.rule().assign(Wt), (m.predict_cate(Wt) > 0).astype(int))
            assert (m.builtin_tems is not None) == has_builtin_tems(strategy)

    def test_subset_columns_map_back(self):
        d = _simple(4, n=600, p=8, effect=lambda W: 1 + 2 * W[:, 5])
        m = fit_strategy("plugin_lasso", d, columns=[2, 5, 7])
        assert 5 in m.builtin_tems.tolist() and set(m.builtin_tems.tolist()) <= {2, 5, 7}
        assert m.predict_cate(d.W).shape == (600,)

    def test_sklearn_wrapper(self):
        d = _simple(5, n=500, p=5, effect=lambda W: W[:, 1])
        est = CateEstimator("plugin_lasso", propensity=d.pi, random_state=1).fit(d.W, d.A, d.Y)
        assert est.assign(d.W).tolist() == (est.predict(d.W) > 0).astype(int).tolist()
        assert 1 in est.builtin_tems_.tolist()
        est2 = CateEstimator("mc_lasso", random_state=1).fit(d.W, d.A, d.Y)
        assert est2.predict(d.W).shape == (500,)

    def test_determinism(self):
        d = _simple(6, n=300, p=5)
        a = fit_strategy("aug_mc_lasso", d, seed=3).predict_cate(d.W)
        b = fit_strategy("aug_mc_lasso", d, seed=3).predict_cate(d.W)
        assert np.array_equal(a, b)

    def test_causal_forest_known_pi(self):
        d = _simple(7, n=500, p=4, effect=lambda W: 2 * W[:, 1])
        m = fit_causal_forest_cate(d, d.pi, n_trees=100, nuisance_trees=100)
        assert np.corrcoef(m.predict_cate(d.W), d.W[:, 1])[0, 1] > 0.5


def test_clamp_pi():
    assert clamp_pi([0.0, 1.0], 0.05).tolist() == [0.05, 0.95]
