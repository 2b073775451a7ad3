import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit
from scipy.stats import norm

from itr_bench.dgp import (
    Dataset, DgpError, DgpSpec, all_dgp_ids, load_npz, make_covariance, monte_carlo_optimal_value,
    propensity, read_csv, rule_values, sample_dataset, save_npz, true_cate, write_csv,
)


class TestSpec:
    def test_sixteen_ids_roundtrip(self):
        ids = all_dgp_ids()
        assert len(set(ids)) == 16
        for i in ids:
            assert DgpSpec.from_id(i, p=100).id == i

    def test_id_mapping(self):
        s = DgpSpec.from_id("rct-sparse-linear-identity")
        assert (s.propensity_kind, s.outcome_kind, s.covariance_kind) == ("pi2_logistic", "mu1", "identity")
        s = DgpSpec.from_id("obs-nonsparse-nonlinear-block")
        assert (s.propensity_kind, s.outcome_kind, s.covariance_kind) == ("pi1_constant_half", "mu4", "block")
        assert DgpSpec.from_id("rct-sparse-linear-identity").pi_known
        assert not DgpSpec.from_id("obs-sparse-linear-identity").pi_known

    @pytest.mark.parametrize("bad", ["rct-sparse-linear", "foo-sparse-linear-identity",
                                     "rct-dense-linear-identity", "rct-sparse-linear-toeplitz"])
    def test_bad_ids(self, bad):
        with pytest.raises(DgpError):
            DgpSpec.from_id(bad)

    @pytest.mark.parametrize("kind,k,val", [("mu1", 10, 2.0), ("mu3", 10, 2.0), ("mu2", 50, 0.5), ("mu4", 50, 0.5)])
    def test_coefficients(self, kind, k, val):
        s = DgpSpec(outcome_kind=kind)
        assert np.all(s.gamma[:5] == 2) and np.all(s.gamma[5:] == 0)
        assert np.all(s.delta[:k] == val) and np.all(s.delta[k:] == 0)
        assert s.true_tems.tolist() == list(range(k))


class TestCovariance:
    def test_identity(self):
        assert np.array_equal(make_covariance("identity", 500, 1).matrix, np.eye(500))

    def test_block_structure(self):
        c = make_covariance("block", 500, 3)
        S = c.matrix
        assert len(c.blocks) == 50 and all(b.shape == (10, 10) for b in c.blocks)
        assert np.allclose(np.diag(S), 1.0) and np.allclose(S, S.T)
        assert np.linalg.eigvalsh(S).min() > 0
        assert np.all(S[:10, 10:] == 0)

    def test_deterministic(self):
        assert np.array_equal(make_covariance("block", 100, 5).matrix, make_covariance("block", 100, 5).matrix)
        assert not np.array_equal(make_covariance("block", 100, 5).matrix, make_covariance("block", 100, 6).matrix)

    def test_eigenvalue_floor_over_seeds(self):
        floor = min(np.linalg.eigvalsh(b).min() for s in range(100) for b in make_covariance("block", 500, s).blocks)
        assert floor > 1e-6

    def test_indivisible(self):
        with pytest.raises(DgpError):
            make_covariance("block", 120, 0)

    def test_leading_and_transform(self, rng):
        c = make_covariance("block", 100, 2)
        np.testing.assert_array_equal(c.leading(15), c.matrix[:15, :15])
        Z = rng.standard_normal((200_000, 100))
        emp = np.cov(c.transform(Z)[:, :20], rowvar=False)
        assert np.max(np.abs(emp - c.matrix[:20, :20])) < 0.03


class TestPropensityAndCate:
    def test_propensity_examples(self):
        assert propensity("pi1_constant_half", np.ones((3, 6))).tolist() == [0.5] * 3
        assert propensity("pi2_logistic", np.zeros((1, 6)))[0] == 0.5
        assert propensity("pi2_logistic", np.full((1, 6), 5.0))[0] == pytest.approx(1 / (1 + np.exp(-4)), abs=1e-12)
        assert propensity("pi2_logistic", np.full((1, 6), 5.0))[0] == pytest.approx(0.9820, abs=1e-4)

    def test_positivity(self):
        W = np.random.default_rng(0).standard_normal((1_000_000, 4))
        floor = min(0.5, expit(-2))
        for kind in ("pi1_constant_half", "pi2_logistic"):
            pi = propensity(kind, W)
            assert pi.min() > 0 and pi.max() < 1
        # four standard normals / 5 stay well inside (-2, 2) at this sample size
        assert propensity("pi2_logistic", W).min() >= floor * 0.5

    def test_cate_examples(self):
        assert true_cate(DgpSpec(outcome_kind="mu1"), np.zeros(500)) == 1.0
        assert true_cate(DgpSpec(outcome_kind="mu3"), np.zeros(500)) == 0.0
        w = np.zeros(500)
        w[:10] = -0.2
        assert true_cate(DgpSpec(outcome_kind="mu1"), w) == pytest.approx(-3.0)

    @given(st.sampled_from(["mu1", "mu2", "mu3", "mu4"]), st.integers(0, 10_000))
    def test_cate_sign_and_definition(self, kind, seed):
        spec = DgpSpec(p=60, outcome_kind=kind)
        W = np.random.default_rng(seed).normal(size=(50, 60))
        s = W @ spec.delta
        cate = spec.true_cate(W)
        expected_sign = np.sign(1 + s) if spec.linear else np.sign(s)
        assert np.array_equal(np.sign(cate), expected_sign)
        np.testing.assert_allclose(cate, spec.mean_outcome(W, 1) - spec.mean_outcome(W, 0), atol=1e-12)


class TestSampling:
    def test_composition_and_shapes(self):
        spec = DgpSpec.from_id("rct-sparse-nonlinear-block", p=100)
        d = sample_dataset(spec, 300, 1, with_potential_outcomes=True)
        assert d.W.shape == (300, 100) and d.has_potential_outcomes
        assert np.array_equal(d.Y, d.A * d.Y1 + (1 - d.A) * d.Y0)
        assert not sample_dataset(spec, 10, 1).has_potential_outcomes

    def test_bit_identical(self):
        spec = DgpSpec.from_id("obs-sparse-linear-block", p=50)
        a = sample_dataset(spec, 100, 9, with_potential_outcomes=True)
        b = sample_dataset(spec, 100, 9, with_potential_outcomes=True)
        for f in ("W", "A", "Y", "Y0", "Y1"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
        assert not np.array_equal(a.W, sample_dataset(spec, 100, 10).W)

    def test_identity_covariance_moments(self):
        d = sample_dataset(DgpSpec.from_id("obs-sparse-linear-identity", p=50), 50_000, 3)
        emp = np.cov(d.W[:, :20], rowvar=False)
        assert np.max(np.abs(emp - np.eye(20))) < 0.05
        assert abs(d.A.mean() - 0.5) < 0.01

    def test_logistic_assignment_matches_propensity(self):
        spec = DgpSpec.from_id("rct-sparse-linear-identity", p=50)
        d = sample_dataset(spec, 50_000, 4)
        assert abs(d.A.mean() - d.pi.mean()) < 0.01
        np.testing.assert_allclose(d.pi, spec.propensity(d.W))

    def test_noise_sd(self):
        spec = DgpSpec.from_id("rct-sparse-linear-identity", p=50)
        d = sample_dataset(spec, 50_000, 5, with_potential_outcomes=True)
        assert np.std(d.Y1 - spec.mean_outcome(d.W, 1)) == pytest.approx(1.0, abs=0.02)

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.array([0, 1, 2.0]), np.zeros(3))
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.array([0, 1, 1.0]), np.zeros(3), Y0=np.zeros(3), Y1=np.ones(3))


class TestOracle:
    def test_closed_form_truncated_normal(self):
        spec = DgpSpec.from_id("rct-sparse-linear-identity")
        mu, sigma = 1.0, np.sqrt(40.0)
        exact = mu * norm.cdf(mu / sigma) + sigma * norm.pdf(mu / sigma)
        assert exact == pytest.approx(3.055, abs=1e-3)
        value, se = monte_carlo_optimal_value(spec, 1_000_000, seed=11, use_cache=False)
        assert abs(value - exact) <= 3 * se

    def test_optimal_dominates_fixed_rules(self):
        for i in all_dgp_ids()[::3]:
            v = rule_values(DgpSpec.from_id(i, p=100), 20_000, 3)
            (opt, se_o), (tr, se_t), (ct, se_c) = v["optimal"], v["treat"], v["control"]
            assert opt >= tr - 3 * se_t and opt >= ct - 3 * se_c

    def test_always_treat_value(self):
        v = rule_values(DgpSpec.from_id("rct-sparse-linear-identity"), 200_000, 5, rules=("treat",))
        value, se = v["treat"]
        assert abs(value - 1.0) <= 3 * se

    def test_cache(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ITR_BENCH_CACHE", str(tmp_path))
        spec = DgpSpec.from_id("obs-sparse-nonlinear-identity", p=50)
        first = monte_carlo_optimal_value(spec, 5000, seed=2)
        assert len(list(tmp_path.iterdir())) == 1
        assert monte_carlo_optimal_value(spec, 5000, seed=2) == first

    def test_minimum_size(self):
        with pytest.raises(DgpError):
            monte_carlo_optimal_value(DgpSpec(p=50), 999)


class TestIO:
    def test_csv_roundtrip(self, tmp_path):
        d = sample_dataset(DgpSpec(p=50), 30, 1, with_potential_outcomes=True)
        write_csv(d, tmp_path / "d.csv")
        back = read_csv(tmp_path / "d.csv")
        header = (tmp_path / "d.csv").read_text().splitlines()[0].split(",")
        assert header[:2] == ["W1", "W2"] and header[-4:] == ["A", "Y", "Y0", "Y1"]
        for f in ("W", "A", "Y", "Y0", "Y1"):
            assert np.array_equal(getattr(back, f), getattr(d, f))

    def test_npz_roundtrip(self, tmp_path):
        d = sample_dataset(DgpSpec(p=50), 30, 1)
        save_npz(d, tmp_path / "d.npz")
        back = load_npz(tmp_path / "d.npz")
        assert np.array_equal(back.W, d.W) and np.array_equal(back.Y, d.Y)
