"""Treatment-effect-modifier variable importance (TEM-VIP) and filtering.

For covariate j the target is Cov(Delta(W), W_j) / Var(W_j), where
Delta(w) = mu(w, 1) - mu(w, 0). The one-step estimate is the simple
regression slope of the AIPW pseudo-outcome on centered W_j, with a sandwich
standard error from its influence contributions. Covariates whose
Benjamini-Hochberg adjusted p-value is below the FDR level are selected.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .cate import CateModel, fit_strategy, StrategySettings
from .dgp import Dataset
from .nuisance import FitContext, NuisanceConfig, NuisanceEstimates

_VAR_EPS = 1e-12


@dataclass(frozen=True)
class TemVipConfig:
    fdr_level: float = 0.05
    nuisance_mode: str = "rct_lasso_interactions"
    cross_fit_folds: int = 5
    pi_floor: float = 0.01

    def __post_init__(self):
        if not 0 < self.fdr_level < 1:
            raise ValueError("fdr_level must lie in (0, 1)")
        if self.nuisance_mode not in ("rct_lasso_interactions", "observational_super_learner"):
            raise ValueError(f"unknown nuisance mode {self.nuisance_mode!r}")

    @property
    def pi_known(self) -> bool:
        return self.nuisance_mode == "rct_lasso_interactions"


@dataclass(frozen=True)
class TemVipReport:
    """Column-aligned TEM-VIP estimates; ``error`` flags zero-variance covariates."""

    psi_hat: np.ndarray
    std_err: np.ndarray
    p_value: np.ndarray
    p_adjusted: np.ndarray
    selected: np.ndarray
    error: np.ndarray

    @property
    def selected_indices(self) -> np.ndarray:
        return np.flatnonzero(self.selected)

    def rows(self):
        for j in range(self.psi_hat.shape[0]):
            yield (j, self.psi_hat[j], self.std_err[j], self.p_value[j], self.p_adjusted[j],
                   bool(self.selected[j]))


def temvip_slopes(W: np.ndarray, T: np.ndarray):
    """Slopes of ``T`` on each centered column of ``W`` with sandwich SEs.

    Returns ``(psi, se, error)``; zero-variance columns get ``nan`` and
    ``error=True``.
    """
    W = np.asarray(W, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    n = W.shape[0]
    Wc = W - W.mean(axis=0)
    Tc = T - T.mean()
    var = (Wc * Wc).mean(axis=0)
    error = var <= _VAR_EPS
    safe = np.where(error, 1.0, var)
    psi = (Wc.T @ Tc) / n / safe
    infl = Wc * (Tc[:, None] - Wc * psi) / safe
    se = np.sqrt((infl * infl).mean(axis=0) / n)
    psi = np.where(error, np.nan, psi)
    se = np.where(error, np.nan, se)
    return psi, se, error


def bh_adjust(p_values, level: float = 0.05):
    """Benjamini-Hochberg step-up adjusted p-values and rejection set.

    >>> adj, rej = bh_adjust([0.01, 0.02, 0.9])
    >>> np.round(adj, 4).tolist(), rej.tolist()
    ([0.03, 0.03, 0.9], [0, 1])
    """
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy(), np.zeros(0, dtype=np.int64)
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum(1.0, np.minimum.accumulate(scaled[::-1])[::-1])
    adj = np.empty(m)
    adj[order] = adj_sorted
    return adj, np.flatnonzero(adj < level)


def estimate_temvip_all(data: Dataset, nuisances: NuisanceEstimates,
                        fdr_level: float = 0.05) -> TemVipReport:
    T = nuisances.pseudo_outcomes(data.A, data.Y)
    psi, se, error = temvip_slopes(data.W, T)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(psi) / se
    pval = np.where(error, 1.0, 2.0 * norm.sf(np.where(se > 0, z, np.inf)))
    pval = np.where(~error & (se == 0) & (psi == 0), 1.0, pval)
    adj, _ = bh_adjust(pval, fdr_level)
    selected = (adj < fdr_level) & ~error
    return TemVipReport(psi, se, pval, adj, selected, error)


def filter_report(data: Dataset, config: TemVipConfig = TemVipConfig(), seed: int = 0,
                  context: FitContext | None = None) -> TemVipReport:
    if context is None:
        context = FitContext(data, config.pi_known, seed,
                             NuisanceConfig(pi_floor=config.pi_floor,
                                            cross_fit_folds=config.cross_fit_folds))
    elif context.pi_known != config.pi_known:
        raise ValueError("context and config disagree on whether the propensity is known")
    return estimate_temvip_all(data, context.filter_nuisances(), config.fdr_level)


def filter_covariates(data: Dataset, config: TemVipConfig = TemVipConfig(), seed: int = 0,
                      context: FitContext | None = None) -> np.ndarray:
    """Indices of covariates selected as TEMs (possibly empty)."""
    return filter_report(data, config, seed, context).selected_indices


def fit_filtered(data: Dataset, config: TemVipConfig, strategy: str, seed: int = 0,
                 context: FitContext | None = None, selection=None,
                 settings: StrategySettings | None = None) -> CateModel:
    """Filter covariates, then fit ``strategy`` on the selected ones.

    The returned model's ``columns`` records the selection. ``selection``
    skips the filtering step when it was already computed.
    """
    if context is None:
        context = FitContext(data, config.pi_known, seed,
                             NuisanceConfig(pi_floor=config.pi_floor,
                                            cross_fit_folds=config.cross_fit_folds))
    if selection is None:
        selection = filter_covariates(data, config, seed, context)
    return fit_strategy(strategy, data, context, seed, columns=selection, settings=settings)
