"""Nuisance estimates shared by CATE strategies and TEM-VIP filtering.

A :class:`FitContext` lazily fits and caches the nuisance models of one
learning dataset. Each cached entry remembers how long it took to fit so
that every consumer can be charged the full cost, whichever consumer
happened to trigger the computation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ._seeding import derive_seed
from .dgp import Dataset
from .penalized import ElasticNetCV, fold_assignment
from .super_learner import SuperLearner, default_library

PI_FLOOR = 0.01


@dataclass(frozen=True)
class NuisanceConfig:
    pi_floor: float = PI_FLOOR
    cross_fit_folds: int = 5
    cv_folds: int = 10
    sl_folds: int = 10
    sl_forest_trees: int = 200
    sl_boost_rounds: int = 100

    def __post_init__(self):
        if not 0 < self.pi_floor < 0.5:
            raise ValueError("pi_floor must lie in (0, 0.5)")
        if self.cross_fit_folds < 2 or self.sl_folds < 2 or self.cv_folds < 2:
            raise ValueError("fold counts must be >= 2")


def clamp_pi(pi, floor=PI_FLOOR):
    return np.clip(np.asarray(pi, dtype=np.float64), floor, 1.0 - floor)


def aipw_transform(a, y, mu0, mu1, pi, pi_floor=PI_FLOOR):
    """AIPW pseudo-outcome, vectorized over rows.

    >>> float(aipw_transform(1, 3.0, 0.0, 0.0, 0.5))
    6.0
    >>> round(float(aipw_transform(0, 1.0, 0.5, 2.0, 0.25)), 4)
    0.8333
    """
    a = np.asarray(a, dtype=np.float64)
    pi = clamp_pi(pi, pi_floor)
    mu_a = np.where(a == 1, mu1, mu0)
    return (2 * a - 1) / (a * pi + (1 - a) * (1 - pi)) * (y - mu_a) + mu1 - mu0


@dataclass(frozen=True)
class NuisanceEstimates:
    """Outcome and propensity predictions on the training rows.

    In cross-fitted mode row ``i`` is predicted by models that never saw it.
    ``pi`` is already clamped to ``[pi_floor, 1 - pi_floor]``.
    """

    mu0: np.ndarray
    mu1: np.ndarray
    pi: np.ndarray
    pi_known: bool
    pi_floor: float = PI_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "pi", clamp_pi(self.pi, self.pi_floor))

    def pseudo_outcomes(self, A, Y) -> np.ndarray:
        return aipw_transform(A, Y, self.mu0, self.mu1, self.pi, self.pi_floor)


def _interactions(W, a):
    a = np.asarray(a, dtype=np.float64)[:, None]
    return np.hstack([W, a, W * a])


def cross_fit_lasso_outcome(data: Dataset, folds: int = 5, cv_folds: int = 10, seed: int = 0):
    """Cross-fitted LASSO of Y on [W, A, W*A]; returns (mu0, mu1) per row."""
    n = data.n
    fold = fold_assignment(n, folds, derive_seed(seed, "crossfit"))
    mu0 = np.empty(n)
    mu1 = np.empty(n)
    for k in range(folds):
        tr, te = fold != k, fold == k
        m = ElasticNetCV(l1_ratio=1.0, folds=cv_folds, random_state=derive_seed(seed, "cv", k))
        m.fit(_interactions(data.W[tr], data.A[tr]), data.Y[tr])
        Wt = data.W[te]
        mu0[te] = m.predict(_interactions(Wt, np.zeros(Wt.shape[0])))
        mu1[te] = m.predict(_interactions(Wt, np.ones(Wt.shape[0])))
    return mu0, mu1


def super_learner_outcome(data: Dataset, config: NuisanceConfig, seed: int):
    """Out-of-fold Super Learner predictions of mu(W, 0) and mu(W, 1).

    The Super Learner's own folds serve as the cross-fitting folds.
    """
    lib = default_library("gaussian", config.sl_forest_trees, config.sl_boost_rounds)
    X = np.column_stack([data.W, data.A])
    sl = SuperLearner(lib, "gaussian", config.sl_folds, derive_seed(seed, "sl-mu"),
                      treatment_interactions=True).fit(X, data.Y)
    X0, X1 = X.copy(), X.copy()
    X0[:, -1] = 0.0
    X1[:, -1] = 1.0
    return sl.predict_out_of_fold(X0), sl.predict_out_of_fold(X1), sl


def super_learner_propensity(data: Dataset, config: NuisanceConfig, seed: int):
    lib = default_library("binomial", config.sl_forest_trees, config.sl_boost_rounds)
    sl = SuperLearner(lib, "binomial", config.sl_folds, derive_seed(seed, "sl-pi")).fit(data.W, data.A)
    return sl.predict_out_of_fold(data.W), sl


def lasso_propensity(data: Dataset, cv_folds: int = 10, seed: int = 0) -> np.ndarray:
    """Logistic CV-LASSO propensity, evaluated in-sample."""
    m = ElasticNetCV(l1_ratio=1.0, family="binomial", folds=cv_folds,
                     random_state=derive_seed(seed, "pi-lasso")).fit(data.W, data.A)
    return m.predict(data.W)


@dataclass
class FitContext:
    """Per-dataset cache of nuisance fits.

    Parameters
    ----------
    data : Dataset
        Learning data on the full covariate set.
    pi_known : bool
        Use ``data.pi`` as the propensity instead of estimating it.
    seed : int
    config : NuisanceConfig
    """

    data: Dataset
    pi_known: bool
    seed: int = 0
    config: NuisanceConfig = field(default_factory=NuisanceConfig)
    _cache: dict = field(default_factory=dict, repr=False)
    _charged: set = field(default_factory=set, repr=False)
    _build_seconds: float = field(default=0.0, repr=False)

    def __post_init__(self):
        if self.pi_known and self.data.pi is None:
            raise ValueError("pi_known requires data.pi")

    # -- accounting --------------------------------------------------------

    def start_charge(self) -> None:
        """Begin a timed consumer; resets the set of nuisances it used."""
        self._charged = set()
        self._build_seconds = 0.0

    def charge_adjustment(self) -> float:
        """Seconds to add to a consumer's wall time: the recorded cost of the
        cached nuisances it used minus the time spent building them inside
        its own timed region."""
        used = sum(self._cache[k][1] for k in self._charged)
        return used - self._build_seconds

    @property
    def charged_keys(self) -> frozenset:
        return frozenset(self._charged)

    @property
    def build_seconds(self) -> float:
        """Seconds spent building nuisances since :meth:`start_charge`."""
        return self._build_seconds

    def recorded_seconds(self, keys) -> float:
        return sum(self._cache[k][1] for k in keys)

    def _get(self, key, build):
        if key not in self._cache:
            t0 = time.perf_counter()
            value = build()
            dt = time.perf_counter() - t0
            self._cache[key] = (value, dt)
            self._build_seconds += dt
        self._charged.add(key)
        return self._cache[key][0]

    def cost(self, key) -> float:
        return self._cache[key][1]

    def put(self, key, value, seconds: float) -> None:
        self._cache[key] = (value, seconds)

    # -- nuisances ---------------------------------------------------------

    def known_pi(self) -> np.ndarray:
        return clamp_pi(self.data.pi, self.config.pi_floor)

    def mc_propensity(self) -> np.ndarray:
        """Propensity for the modified-covariates family (logistic LASSO)."""
        if self.pi_known:
            return self.known_pi()
        return clamp_pi(self._get("pi_lasso", lambda: lasso_propensity(
            self.data, self.config.cv_folds, self.seed)), self.config.pi_floor)

    def aipw_nuisances(self) -> NuisanceEstimates:
        """Super Learner outcome model; Super Learner propensity unless known."""
        mu0, mu1, _ = self._get("sl_mu", lambda: super_learner_outcome(self.data, self.config, self.seed))
        if self.pi_known:
            pi = self.known_pi()
        else:
            pi = self._get("sl_pi", lambda: super_learner_propensity(self.data, self.config, self.seed))[0]
        return NuisanceEstimates(mu0, mu1, pi, self.pi_known, self.config.pi_floor)

    def filter_nuisances(self) -> NuisanceEstimates:
        """Known-propensity mode: cross-fitted LASSO with all treatment
        interactions; otherwise the Super Learners shared with AIPW."""
        if not self.pi_known:
            return self.aipw_nuisances()
        mu0, mu1 = self._get("lasso_mu", lambda: cross_fit_lasso_outcome(
            self.data, self.config.cross_fit_folds, self.config.cv_folds, self.seed))
        return NuisanceEstimates(mu0, mu1, self.known_pi(), True, self.config.pi_floor)
