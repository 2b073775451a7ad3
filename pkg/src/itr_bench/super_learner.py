"""Cross-validated convex stacking (Super Learner)."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted

from ._seeding import derive_seed
from .penalized import ElasticNet, ElasticNetCV, fold_assignment
from .trees import GradientBoosting, RandomForest

PROB_CLAMP = 1e-5
LEARNER_KINDS = ("lasso", "ridge", "elastic_net", "random_forest", "gradient_boosting")
_MIX = {"lasso": 1.0, "ridge": 0.0, "elastic_net": 0.5}


class SuperLearnerError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    params: dict = field(default_factory=dict)
    family: str = "gaussian"

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.family not in ("gaussian", "binomial"):
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def linear(self) -> bool:
        return self.kind in _MIX

    def build(self, seed: int):
        if self.linear:
            return ElasticNetCV(l1_ratio=_MIX[self.kind], family=self.family,
                                random_state=seed, **self.params)
        if self.kind == "random_forest":
            return RandomForest(random_state=seed, **self.params)
        loss = "logistic" if self.family == "binomial" else "squared"
        return GradientBoosting(loss=loss, random_state=seed, **self.params)


def default_library(family: str = "gaussian", forest_trees: int = 200,
                    boost_rounds: int = 100) -> list[LearnerSpec]:
    """LASSO, ridge, elastic net (mix 0.5), random forest and boosted trees.

    Tree sizes are smaller than the standalone defaults because every
    learner is refit once per fold.
    """
    return [LearnerSpec("lasso", family=family),
            LearnerSpec("ridge", family=family),
            LearnerSpec("elastic_net", family=family),
            LearnerSpec("random_forest", {"n_trees": forest_trees}, family),
            LearnerSpec("gradient_boosting", {"n_rounds": boost_rounds}, family)]


def _project_simplex(v):
    """Euclidean projection onto the probability simplex.

    >>> _project_simplex(np.array([2.0, 0.0])).tolist()
    [1.0, 0.0]
    """
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def meta_risk(Z, y, weights, family):
    """Mean squared error or clamped negative log-likelihood of ``Z @ weights``."""
    f = Z @ weights
    if family == "gaussian":
        return float(np.mean((y - f) ** 2))
    f = np.clip(f, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-np.mean(y * np.log(f) + (1 - y) * np.log(1 - f)))


def _meta_grad(Z, y, weights, family):
    f = Z @ weights
    if family == "gaussian":
        return -2.0 * Z.T @ (y - f) / y.size
    inside = (f > PROB_CLAMP) & (f < 1 - PROB_CLAMP)
    fc = np.clip(f, PROB_CLAMP, 1 - PROB_CLAMP)
    g = np.where(inside, -(y / fc - (1 - y) / (1 - fc)), 0.0)
    return Z.T @ g / y.size


def solve_simplex_weights(Z, y, family="gaussian", tol=1e-8, max_iter=10_000):
    """Minimize the meta risk over the simplex by projected gradient descent
    with backtracking; stops when an iterate moves less than ``tol``.

    Returns the weights and the risk of every vertex. The returned vector is
    never worse than the best single learner.
    """
    L = Z.shape[1]
    vertex_risk = np.array([meta_risk(Z, y, np.eye(L)[l], family) for l in range(L)])
    if L == 1:
        return np.ones(1), vertex_risk
    w = np.full(L, 1.0 / L)
    risk = meta_risk(Z, y, w, family)
    step = 1.0
    for _ in range(max_iter):
        g = _meta_grad(Z, y, w, family)
        while True:
            w_new = _project_simplex(w - step * g)
            risk_new = meta_risk(Z, y, w_new, family)
            # sufficient decrease for a projected step
            if risk_new <= risk + g @ (w_new - w) + (w_new - w) @ (w_new - w) / (2 * step) or step < 1e-20:
                break
            step *= 0.5
        moved = np.max(np.abs(w_new - w))
        if risk_new <= risk:
            w, risk = w_new, risk_new
        step *= 2.0
        if moved < tol:
            break
    best = int(np.argmin(vertex_risk))
    if vertex_risk[best] < risk:
        w = np.eye(L)[best]
    w = np.maximum(w, 0.0)
    return w / w.sum(), vertex_risk


def _interaction_design(X):
    """[W, A, W*A] from a matrix whose last column is the treatment."""
    W, a = X[:, :-1], X[:, -1:]
    return np.hstack([W, a, W * a])


class SuperLearner(RegressorMixin, BaseEstimator):
    """Convex combination of base learners minimizing K-fold CV risk.

    Parameters
    ----------
    library : list of LearnerSpec, optional
        Defaults to :func:`default_library` for ``family``.
    family : {"gaussian", "binomial"}
    folds : int
    random_state : int
    treatment_interactions : bool
        Treat the last column of ``X`` as a binary treatment and give linear
        learners the expanded design ``[W, A, W*A]``.
    fix_linear_penalty : bool
        Choose each linear learner's penalty once by CV on the full data and
        reuse it in every fold instead of nesting a CV per fold.

    Attributes
    ----------
    weights_ : ndarray
        Simplex weights over the retained learners.
    cv_risk_ : ndarray
        Cross-validated risk of each retained learner.
    combined_cv_risk_ : float
    fold_ : ndarray
        Fold label of every training row.
    """

    def __init__(self, library=None, family="gaussian", folds=10, random_state=0,
                 treatment_interactions=False, fix_linear_penalty=True):
        self.library = library
        self.family = family
        self.folds = folds
        self.random_state = random_state
        self.treatment_interactions = treatment_interactions
        self.fix_linear_penalty = fix_linear_penalty

    def _features(self, spec, X):
        if spec.linear and self.treatment_interactions:
            return _interaction_design(X)
        return X

    def _raw_predict(self, spec, model, X):
        p = model.predict(self._features(spec, X))
        if self.family == "binomial":
            p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
        return p

    def fit(self, X, y):
        X = np.ascontiguousarray(check_array(X), dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        n = X.shape[0]
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        library = list(self.library) if self.library is not None else default_library(self.family)
        if not library:
            raise ValueError("library must be non-empty")
        library = [LearnerSpec(s.kind, s.params, self.family) for s in library]
        self.fold_ = fold_assignment(n, self.folds, derive_seed(self.random_state, "sl-folds"))
        kept, Z_cols, fold_models, full_models = [], [], [], []
        for l, spec in enumerate(library):
            seed = derive_seed(self.random_state, "learner", l) & 0x7FFFFFFF
            try:
                full = spec.build(seed).fit(self._features(spec, X), y)
            except Exception as exc:
                warnings.warn(f"learner {spec.kind} failed on the full data: {exc}")
                continue
            template = spec.build(seed)
            if spec.linear and self.fix_linear_penalty:
                template = ElasticNet(lam=full.lam_, l1_ratio=_MIX[spec.kind], family=self.family)
            col = np.full(n, np.nan)
            models = []
            for k in range(self.folds):
                tr, te = self.fold_ != k, self.fold_ == k
                try:
                    m = clone(template).fit(self._features(spec, X[tr]), y[tr])
                    col[te] = self._raw_predict(spec, m, X[te])
                except Exception as exc:
                    warnings.warn(f"learner {spec.kind} failed on fold {k}: {exc}")
                    m = None
                models.append(m)
            if np.all(np.isnan(col)):
                warnings.warn(f"learner {spec.kind} failed on every fold; dropped")
                continue
            if np.any(np.isnan(col)):
                # a learner missing some folds borrows the full-data fit there
                gap = np.isnan(col)
                col[gap] = self._raw_predict(spec, full, X[gap])
                models = [m if m is not None else full for m in models]
            kept.append(spec)
            Z_cols.append(col)
            fold_models.append(models)
            full_models.append(full)
        if not kept:
            raise SuperLearnerError("every learner in the library failed")
        Z = np.column_stack(Z_cols)
        w, vertex_risk = solve_simplex_weights(Z, y, self.family)
        self.library_ = kept
        self.models_ = full_models
        self.fold_models_ = fold_models
        self.weights_ = w
        self.cv_predictions_ = Z
        self.cv_risk_ = vertex_risk
        self.combined_cv_risk_ = meta_risk(Z, y, w, self.family)
        assert self.combined_cv_risk_ <= vertex_risk.min() + 1e-8
        self.n_features_in_ = X.shape[1]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "weights_")
        X = np.ascontiguousarray(check_array(X), dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns; expected {self.n_features_in_}")
        return X

    def _combine(self, preds):
        out = preds @ self.weights_
        if self.family == "binomial":
            out = np.clip(out, PROB_CLAMP, 1 - PROB_CLAMP)
        return out

    def predict(self, X):
        X = self._check_X(X)
        preds = np.column_stack([self._raw_predict(s, m, X)
                                 for s, m in zip(self.library_, self.models_)])
        return self._combine(preds)

    def predict_out_of_fold(self, X):
        """Predict training row ``i`` (possibly with altered features, e.g. a
        counterfactual treatment column) using only models that did not see
        it; rows must be in training order."""
        X = self._check_X(X)
        if X.shape[0] != self.fold_.shape[0]:
            raise ValueError("out-of-fold prediction needs the training rows in order")
        preds = np.empty((X.shape[0], len(self.library_)))
        for k in range(self.folds):
            te = self.fold_ == k
            if not te.any():
                continue
            for l, spec in enumerate(self.library_):
                preds[te, l] = self._raw_predict(spec, self.fold_models_[l][k], X[te])
        return self._combine(preds)


def fit_super_learner(library, X, y, family="gaussian", folds=10, seed=0, **kwargs) -> SuperLearner:
    return SuperLearner(library, family, folds, seed, **kwargs).fit(X, y)


def predict_super_learner(model: SuperLearner, X) -> np.ndarray:
    return model.predict(X)
