"""CATE estimators and the treatment rules they induce.

Every strategy maps a learning :class:`~itr_bench.dgp.Dataset` to a
:class:`CateModel`. Strategies that need nuisance estimates take them from
a :class:`~itr_bench.nuisance.FitContext`, so nuisances are fit once per
dataset and shared.

========================  ==================================  ==========
strategy id               CATE model                          TEM set
========================  ==================================  ==========
``plugin_lasso``          LASSO on [A, W, W*A]                 yes
``plugin_xgb``            boosted trees, one per arm           no
``mc_lasso``              modified covariates, LASSO           yes
``mc_xgb``                modified covariates, boosted trees   no
``aug_mc_lasso``          augmented modified covariates        yes
``aug_mc_xgb``            augmented, boosted trees             no
``aipw_lasso``            AIPW pseudo-outcome on W, LASSO      yes
``aipw_sl``               AIPW pseudo-outcome, Super Learner   no
``causal_forest``         honest causal forest                 no
``modified_outcome``      IPW-transformed outcome, LASSO       yes
========================  ==================================  ==========
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator

from ._seeding import derive_seed
from .dgp import Dataset
from .nuisance import FitContext, NuisanceConfig, NuisanceEstimates, aipw_transform, clamp_pi
from .penalized import ElasticNetCV, fold_assignment
from .super_learner import SuperLearner, default_library
from .trees import CausalForest, GradientBoosting, RandomForest

MIN_ARM_SIZE = 10
POSITIVITY_SHARE = 0.10


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class CateModel:
    """A fitted CATE predictor.

    Attributes
    ----------
    strategy : str
    predictor : callable
        Maps a covariate matrix (restricted to ``columns``) to CATE values.
    builtin_tems : ndarray or None
        Indices into the full covariate set; ``None`` when the strategy has
        no built-in modifier classification.
    columns : ndarray or None
        Covariates the model uses (``None`` means all of them).
    """

    strategy: str
    predictor: Callable = field(repr=False)
    builtin_tems: np.ndarray | None = None
    columns: np.ndarray | None = None
    components: dict = field(default_factory=dict, repr=False)
    diagnostics: dict = field(default_factory=dict)

    def predict_cate(self, W) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        if self.columns is not None:
            W = W[:, self.columns]
        out = np.asarray(self.predictor(W), dtype=np.float64).ravel()
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{self.strategy} produced non-finite CATE predictions")
        return out

    def rule(self) -> "ItrRule":
        return ItrRule(self)


@dataclass(frozen=True)
class ItrRule:
    """Treat exactly when the predicted CATE is strictly positive."""

    model: CateModel

    def assign(self, W) -> np.ndarray:
        return (self.model.predict_cate(W) > 0).astype(np.int64)


def assign_treatment(rule: ItrRule, w_row) -> int:
    """Treatment decision for one covariate row.

    >>> const = lambda v: ItrRule(CateModel("const", lambda W: np.full(len(W), v)))
    >>> [assign_treatment(const(v), [0.0]) for v in (0.2, 0.0, -3.0)]
    [1, 0, 0]
    """
    return int(rule.assign(np.asarray(w_row, dtype=np.float64)[None, :])[0])


def classify_tems(model: CateModel):
    return model.builtin_tems


def _constant(value):
    value = float(value)
    return lambda W: np.full(W.shape[0], value)


def _linear(intercept, coef):
    coef = np.asarray(coef, dtype=np.float64)
    return lambda W: intercept + W @ coef


def _nonzero(coef):
    return np.flatnonzero(np.asarray(coef) != 0)


def _hajek_difference(data: Dataset, pi: np.ndarray) -> float:
    """IPW (self-normalized) difference in means, the intercept-only fit."""
    a, y = data.A, data.Y
    w1 = a / pi
    w0 = (1 - a) / (1 - pi)
    m1 = (w1 @ y) / w1.sum() if w1.sum() > 0 else 0.0
    m0 = (w0 @ y) / w0.sum() if w0.sum() > 0 else 0.0
    return float(m1 - m0)


def _positivity(pi, floor):
    share = float(np.mean((pi <= floor) | (pi >= 1 - floor)))
    diag = {"positivity_share": share}
    if share > POSITIVITY_SHARE:
        diag["positivity_warning"] = True
        warnings.warn(f"{share:.0%} of propensities sit at the clamp boundary")
    return diag


def _mc_denominator(a, pi):
    """(2A-1) pi + 1 - A: pi for treated rows, 1 - pi for controls."""
    return (2 * a - 1) * pi + 1 - a


# ---------------------------------------------------------------------------
# plug-in


def fit_plugin(data: Dataset, outcome_learner: str = "lasso_interactions", seed: int = 0,
               cv_folds: int = 10, boost_params: dict | None = None) -> CateModel:
    if outcome_learner == "lasso_interactions":
        p = data.p
        a = data.A[:, None]
        X = np.hstack([a, data.W, data.W * a])
        m = ElasticNetCV(l1_ratio=1.0, folds=cv_folds, random_state=derive_seed(seed, "plugin")).fit(X, data.Y)
        beta_a = m.coef_[0]
        delta = m.coef_[1 + p:]
        return CateModel("plugin_lasso", _linear(beta_a, delta), _nonzero(delta),
                         components={"outcome": m})
    if outcome_learner == "xgboost_two_surface":
        treated = data.A == 1
        if treated.sum() < MIN_ARM_SIZE or (~treated).sum() < MIN_ARM_SIZE:
            raise InsufficientDataError(
                f"each arm needs >= {MIN_ARM_SIZE} rows for two-surface fitting")
        if data.p == 0:
            return CateModel("plugin_xgb", _constant(data.Y[treated].mean() - data.Y[~treated].mean()))
        params = boost_params or {}
        m1 =GradientBoosting(random_state=derive_seed(seed, "t1") & 0x7FFFFFFF, **params).fit(
            data.W[treated], data.Y[treated])
        m0 = GradientBoosting(random_state=derive_seed(seed, "t0") & 0x7FFFFFFF, **params).fit(
            data.W[~treated], data.Y[~treated])
        return CateModel("plugin_xgb", lambda W: m1.predict(W) - m0.predict(W),
                         components={"mu1": m1, "mu0": m0})
    raise ValueError(f"unknown outcome learner {outcome_learner!r}")


# ---------------------------------------------------------------------------
# modified outcome / modified covariates


def fit_modified_outcome(data: Dataset, pi_hat, seed: int = 0, cv_folds: int = 10,
                         stabilized: bool = True) -> CateModel:
    """LASSO regression of the IPW-transformed outcome on W.

    The response is 2(2A-1)Y scaled by 1/2 over the arm probability, which
    equals 2(2A-1)Y when pi = 1/2; ``stabilized=False`` uses 2(2A-1)Y.
    """
    pi = np.asarray(pi_hat, dtype=np.float64)
    if np.any((pi <= 0) | (pi >= 1)):
        raise ValueError("pi_hat must lie strictly inside (0, 1)")
    a = data.A
    z = 2 * (2 * a - 1) * data.Y
    if stabilized:
        z = z * 0.5 / _mc_denominator(a, pi)
    if data.p == 0 or np.all(z == z[0]):
        return CateModel("modified_outcome", _constant(z.mean()), np.zeros(0, dtype=np.int64))
    m = ElasticNetCV(l1_ratio=1.0, folds=cv_folds, random_state=derive_seed(seed, "mo")).fit(data.W, z)
    return CateModel("modified_outcome", _linear(m.intercept_, m.coef_), _nonzero(m.coef_),
                     components={"lasso": m})


def fit_modified_covariates(data: Dataset, pi_hat, family: str = "gaussian",
                            learner: str = "lasso", seed: int = 0, cv_folds: int = 10,
                            pi_floor: float = 0.01, boost_params: dict | None = None,
                            strategy: str | None = None) -> CateModel:
    """Propensity-weighted working model Y ~ (2A-1) Gamma(W) / 2.

    Minimizes sum_i w_i (Y_i - (2A_i-1) Gamma(W_i) / 2)^2 with
    w_i = 1 / ((2A_i-1) pi_i + 1 - A_i); with Gamma linear the design is
    (2A-1)[1, W]/2 with an unpenalized first column.
    """
    pi = clamp_pi(pi_hat, pi_floor)
    a = data.A
    s = 2 * a - 1
    wts = 1.0 / _mc_denominator(a, pi)
    diag = _positivity(pi, pi_floor)
    tag = strategy or ("mc_lasso" if learner == "lasso" else "mc_xgb")
    if learner == "lasso":
        X = np.hstack([s[:, None] / 2, s[:, None] * data.W / 2])
        pf = np.r_[0.0, np.ones(data.p)]
        if data.p == 0:
            # intercept-only working model: closed-form weighted least squares
            if family == "binomial":
                raise InsufficientDataError("binomial working model needs covariates")
            Xc = np.column_stack([np.ones(data.n), X])
            beta = np.linalg.lstsq(Xc * np.sqrt(wts)[:, None], data.Y * np.sqrt(wts), rcond=None)[0]
            return CateModel(tag, _constant(beta[1]), np.zeros(0, dtype=np.int64), diagnostics=diag)
        m = ElasticNetCV(l1_ratio=1.0, family=family, folds=cv_folds,
                         random_state=derive_seed(seed, "mc")).fit(X, data.Y, sample_weight=wts,
                                                                    penalty_factor=pf)
        b0, delta = m.coef_[0], m.coef_[1:]
        if family == "binomial":
            def predictor(W, b0=b0, delta=delta):
                e = np.exp(np.clip((b0 + W @ delta) / 2, -350, 350))
                return (e - 1) / (e + 1)
        else:
            predictor = _linear(b0, delta)
        return CateModel(tag, predictor, _nonzero(delta), components={"lasso": m}, diagnostics=diag)
    if learner == "xgboost":
        if family != "gaussian":
            raise ValueError("the boosted working model supports gaussian outcomes only")
        if data.p == 0:
            return CateModel(tag, _constant(2 * (wts @ (s * data.Y)) / wts.sum()), diagnostics=diag)
        # weighted squares of (Y - s G) equal weighted squares of (sY - G) since s^2 = 1;
        # the minimizer is half the CATE
        m = GradientBoosting(random_state=derive_seed(seed, "mcx") & 0x7FFFFFFF, **(boost_params or {}))
        m.fit(data.W, s * data.Y, sample_weight=wts)
        return CateModel(tag, lambda W: 2.0 * m.predict(W), components={"boost": m}, diagnostics=diag)
    raise ValueError(f"unknown learner {learner!r}")


def _cross_fit_main_effect(data: Dataset, learner: str, folds: int, seed: int, cv_folds: int,
                           boost_params: dict | None) -> np.ndarray:
    n = data.n
    if data.p == 0:
        return np.full(n, data.Y.mean())
    fold = fold_assignment(n, folds, derive_seed(seed, "aug-folds"))
    out = np.empty(n)
    for k in range(folds):
        tr, te = fold != k, fold == k
        if learner == "lasso":
            m = ElasticNetCV(l1_ratio=1.0, folds=cv_folds, random_state=derive_seed(seed, "aug", k))
        else:
            m = GradientBoosting(random_state=derive_seed(seed, "aug", k) & 0x7FFFFFFF, **(boost_params or {}))
        out[te] = m.fit(data.W[tr], data.Y[tr]).predict(data.W[te])
    return out


def fit_augmented_modified_covariates(data: Dataset, pi_hat, learner: str = "lasso", seed: int = 0,
                                      cv_folds: int = 10, cross_fit_folds: int = 5,
                                      pi_floor: float = 0.01, boost_params: dict | None = None,
                                      main_effect: np.ndarray | None = None) -> CateModel:
    """Modified covariates on Y - m(W), with m(W) ~ E[Y | W] cross-fitted
    by the same learner family. ``main_effect`` supplies m(W) directly."""
    m_hat = main_effect if main_effect is not None else _cross_fit_main_effect(
        data, learner, cross_fit_folds, seed, cv_folds, boost_params)
    resid = Dataset(data.W, data.A, data.Y - m_hat, pi=data.pi)
    tag = "aug_mc_lasso" if learner == "lasso" else "aug_mc_xgb"
    model = fit_modified_covariates(resid, pi_hat, "gaussian", learner, seed, cv_folds, pi_floor,
                                    boost_params, strategy=tag)
    model.components["main_effect"] = m_hat
    return model


# ---------------------------------------------------------------------------
# AIPW


def fit_aipw_cate(data: Dataset, nuisances: NuisanceEstimates, second_stage: str = "lasso",
                  seed: int = 0, cv_folds: int = 10, sl_config: NuisanceConfig | None = None) -> CateModel:
    T = nuisances.pseudo_outcomes(data.A, data.Y)
    tag = "aipw_lasso" if second_stage == "lasso" else "aipw_sl"
    if data.p == 0:
        return CateModel(tag, _constant(T.mean()),
                         np.zeros(0, dtype=np.int64) if second_stage == "lasso" else None)
    if second_stage == "lasso":
        m = ElasticNetCV(l1_ratio=1.0, folds=cv_folds, random_state=derive_seed(seed, "aipw")).fit(data.W, T)
        return CateModel(tag, _linear(m.intercept_, m.coef_), _nonzero(m.coef_),
                         components={"lasso": m, "pseudo_outcomes": T})
    if second_stage == "super_learner":
        cfg = sl_config or NuisanceConfig()
        lib = default_library("gaussian", cfg.sl_forest_trees, cfg.sl_boost_rounds)
        sl = SuperLearner(lib, "gaussian", cfg.sl_folds, derive_seed(seed, "aipw-sl")).fit(data.W, T)
        return CateModel(tag, sl.predict, components={"super_learner": sl, "pseudo_outcomes": T})
    raise ValueError(f"unknown second stage {second_stage!r}")


# ---------------------------------------------------------------------------
# causal forest


def fit_causal_forest_cate(data: Dataset, pi_hat=None, seed: int = 0, n_trees: int = 500,
                           nuisance_trees: int = 500) -> CateModel:
    """Causal forest; ``pi_hat`` (per-row values) replaces the propensity
    forest when the assignment mechanism is known."""
    if data.p == 0:
        pi = clamp_pi(pi_hat if pi_hat is not None else np.full(data.n, data.A.mean()))
        return CateModel("causal_forest", _constant(_hajek_difference(data, pi)))
    pmodel = None
    if pi_hat is not None:
        pi_rows = np.asarray(pi_hat, dtype=np.float64)
        pmodel = (lambda W: pi_rows)
    cf = CausalForest(n_trees=n_trees, nuisance_trees=nuisance_trees,
                      random_state=derive_seed(seed, "cf") & 0x7FFFFFFF)
    cf.fit(data.W, data.Y, data.A, propensity_model=pmodel)
    return CateModel("causal_forest", cf.predict, components={"forest": cf})


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class StrategySettings:
    cv_folds: int = 10
    cross_fit_folds: int = 5
    boost_params: dict = field(default_factory=dict)
    forest_trees: int = 500
    nuisance_trees: int = 500


def _fit_strategy(strategy: str, data: Dataset, ctx: FitContext, seed: int,
                  settings: StrategySettings) -> CateModel:
    cfg = ctx.config
    s = settings
    if strategy == "plugin_lasso":
        return fit_plugin(data, "lasso_interactions", seed, s.cv_folds)
    if strategy == "plugin_xgb":
        return fit_plugin(data, "xgboost_two_surface", seed, s.cv_folds, s.boost_params)
    if strategy == "modified_outcome":
        return fit_modified_outcome(data, ctx.mc_propensity(), seed, s.cv_folds)
    if strategy in ("mc_lasso", "mc_xgb"):
        learner = "lasso" if strategy == "mc_lasso" else "xgboost"
        return fit_modified_covariates(data, ctx.mc_propensity(), "gaussian", learner, seed,
                                       s.cv_folds, cfg.pi_floor, s.boost_params)
    if strategy in ("aug_mc_lasso", "aug_mc_xgb"):
        learner = "lasso" if strategy == "aug_mc_lasso" else "xgboost"
        return fit_augmented_modified_covariates(data, ctx.mc_propensity(), learner, seed,
                                                 s.cv_folds, s.cross_fit_folds, cfg.pi_floor,
                                                 s.boost_params)
    if strategy in ("aipw_lasso", "aipw_sl"):
        stage = "lasso" if strategy == "aipw_lasso" else "super_learner"
        return fit_aipw_cate(data, ctx.aipw_nuisances(), stage, seed, s.cv_folds, cfg)
    if strategy == "causal_forest":
        pi = ctx.known_pi() if ctx.pi_known else None
        return fit_causal_forest_cate(data, pi, seed, s.forest_trees, s.nuisance_trees)
    raise KeyError(f"unknown strategy {strategy!r}")


#: Strategies benchmarked by default, and whether each classifies TEMs itself.
STRATEGIES = {
    "plugin_lasso": True,
    "plugin_xgb": False,
    "mc_lasso": True,
    "mc_xgb": False,
    "aug_mc_lasso": True,
    "aug_mc_xgb": False,
    "aipw_lasso": True,
    "aipw_sl": False,
    "causal_forest": False,
}
EXTRA_STRATEGIES = {"modified_outcome": True}


def has_builtin_tems(strategy: str) -> bool:
    table = {**STRATEGIES, **EXTRA_STRATEGIES}
    if strategy not in table:
        raise KeyError(f"unknown strategy {strategy!r}")
    return table[strategy]


def fit_strategy(strategy: str, data: Dataset, ctx: FitContext | None = None, seed: int = 0,
                 columns=None, settings: StrategySettings | None = None) -> CateModel:
    """Fit a registered strategy, optionally on a subset of covariates.

    Nuisances cached in ``ctx`` are always fit on the full covariate set;
    the strategy's own models only see ``columns``. Built-in TEM indices are
    mapped back to the full covariate numbering.
    """
    has_builtin_tems(strategy)
    if ctx is None:
        ctx = FitContext(data, data.pi is not None, seed)
    settings = settings or StrategySettings()
    if columns is None:
        model = _fit_strategy(strategy, data, ctx, seed, settings)
        return model
    cols = np.asarray(columns, dtype=np.int64)
    model = _fit_strategy(strategy, data.subset_columns(cols), ctx, seed, settings)
    tems = None if model.builtin_tems is None else cols[model.builtin_tems]
    return CateModel(model.strategy, model.predictor, tems, cols, model.components, model.diagnostics)


class CateEstimator(BaseEstimator):
    """Estimator wrapper: ``fit(W, A, Y)`` then ``predict(W)`` / ``assign(W)``.

    Parameters
    ----------
    strategy : str
        Registered strategy id.
    propensity : array-like or None
        Known per-row propensities; estimated when omitted.
    random_state : int
    """

    def __init__(self, strategy="plugin_lasso", propensity=None, random_state=0):
        self.strategy = strategy
        self.propensity = propensity
        self.random_state = random_state

    def fit(self, W, A, Y):
        pi = None if self.propensity is None else np.asarray(self.propensity, dtype=np.float64)
        data = Dataset(W, A, Y, pi=pi)
        self.model_ = fit_strategy(self.strategy, data, FitContext(data, pi is not None, self.random_state),
                                   self.random_state)
        self.builtin_tems_ = self.model_.builtin_tems
        return self

    def predict(self, W):
        return self.model_.predict_cate(W)

    def assign(self, W):
        return self.model_.rule().assign(W)
