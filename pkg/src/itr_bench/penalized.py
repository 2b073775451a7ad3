"""Elastic-net penalized linear and logistic regression.

Cyclic coordinate descent on standardized columns with warm-started
regularization paths and K-fold cross-validated penalty selection. The
penalized objective for the gaussian family is::

    (1 / 2n) * sum_i w_i (y_i - b0 - x_i' b)^2
        + lam * sum_j pf_j * (alpha * |b_j| + (1 - alpha) / 2 * b_j^2)

with weights rescaled to sum to ``n``. The binomial family replaces the
squared error by the negative log-likelihood and is solved by penalized
iteratively reweighted least squares with the same inner solver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

FAMILIES = ("gaussian", "binomial")
PROB_CLAMP = 1e-5
DEFAULT_TOL = 1e-7
DEFAULT_MAX_SWEEPS = 10_000
_MAX_IRLS = 100
_HUGE = 1e300


class ConvergenceError(RuntimeError):
    """Coordinate descent hit the sweep budget. ``last_iterate`` holds the
    (unconverged) model so callers can inspect or reuse it."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


def soft_threshold(z: float, gamma: float) -> float:
    """sign(z) * max(|z| - gamma, 0).

    >>> soft_threshold(2.0, 0.5)
    1.5
    >>> soft_threshold(-2.0, 0.5)
    -1.5
    >>> soft_threshold(0.5, 1.0)
    0.0
    """
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


@dataclass(frozen=True)
class RegressionProblem:
    """A (weighted) penalized regression problem.

    ``penalty_mix`` is the elastic-net mixing parameter (1 = lasso,
    0 = ridge). ``penalty_factor`` scales the penalty per column; a zero
    entry leaves that coefficient unpenalized.
    """

    design: np.ndarray
    response: np.ndarray
    family: str = "gaussian"
    weights: np.ndarray | None = None
    penalty_mix: float = 1.0
    fit_intercept: bool = True
    standardize: bool = True
    penalty_factor: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.design, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("design must be a 2-D array")
        y = np.asarray(self.response, dtype=np.float64).ravel()
        n, d = X.shape
        if n < 2 or d < 1:
            raise ValueError(f"need n >= 2 and d >= 1, got n={n}, d={d}")
        if y.shape[0] != n:
            raise ValueError("design and response have different lengths")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("design and response must be finite")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.family == "binomial" and not np.all((y == 0) | (y == 1)):
            raise ValueError("binomial responses must be 0/1")
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=np.float64).ravel()
        if w.shape[0] != n or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise ValueError("weights must be finite, nonnegative, length n, with positive sum")
        if not 0.0 <= self.penalty_mix <= 1.0:
            raise ValueError("penalty_mix must lie in [0, 1]")
        pf = np.ones(d) if self.penalty_factor is None else np.asarray(self.penalty_factor, dtype=np.float64).ravel()
        if pf.shape[0] != d or np.any(pf < 0):
            raise ValueError("penalty_factor must be nonnegative with length d")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "penalty_factor", pf)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def d(self) -> int:
        return self.design.shape[1]

    def subset(self, rows: np.ndarray) -> "RegressionProblem":
        return RegressionProblem(
            self.design[rows], self.response[rows], self.family, self.weights[rows],
            self.penalty_mix, self.fit_intercept, self.standardize, self.penalty_factor,
        )


@dataclass(frozen=True)
class FittedLinearModel:
    intercept: float
    coefficients: np.ndarray
    lam: float
    family: str
    column_means: np.ndarray
    column_scales: np.ndarray
    penalty_mix: float = 1.0
    n_sweeps: int = 0

    @property
    def standardized_coefficients(self) -> np.ndarray:
        return self.coefficients * self.column_scales

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients != 0.0)


@dataclass(frozen=True)
class CvResult:
    lambda_grid: np.ndarray
    cv_risk: np.ndarray
    selected_lambda: float
    fold_assignment: np.ndarray
    selected_index: int = 0
    model: FittedLinearModel | None = field(default=None, compare=False)


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _soft(z, g):
    if z > g:
        return z - g
    if z < -g:
        return z + g
    return 0.0


@njit(cache=True)
def _solve_quadratic(Xs, v, xv, pf, lam, alpha, beta, b0, r, active,
                     fit_intercept, tol, max_sweeps, sweeps):
    """Minimize (1/2n) sum v r^2 + penalty by active-set cyclic CD.

    ``r`` is the working residual and is updated in place together with
    ``beta`` and ``b0[0]``. Returns the cumulative sweep count, negated when
    the sweep budget is exhausted.
    """
    n, d = Xs.shape
    sv = 0.0
    for i in range(n):
        sv += v[i]
    l1 = lam * alpha
    l2 = lam * (1.0 - alpha)
    while True:
        while True:
            maxdiff = 0.0
            if fit_intercept:
                num = 0.0
                for i in range(n):
                    num += v[i] * r[i]
                delta = num / sv
                if delta != 0.0:
                    b0[0] += delta
                    for i in range(n):
                        r[i] -= delta
                    if abs(delta) > maxdiff:
                        maxdiff = abs(delta)
            for j in range(d):
                if not active[j] or xv[j] <= 0.0:
                    continue
                g = 0.0
                for i in range(n):
                    g += Xs[i, j] * v[i] * r[i]
                g /= n
                bj = beta[j]
                new = _soft(g + xv[j] * bj, l1 * pf[j]) / (xv[j] + l2 * pf[j])
                if new != bj:
                    diff = new - bj
                    for i in range(n):
                        r[i] -= diff * Xs[i, j]
                    beta[j] = new
                    ch = abs(diff) * math.sqrt(xv[j])
                    if ch > maxdiff:
                        maxdiff = ch
            sweeps += 1
            if maxdiff < tol:
                break
            if sweeps >= max_sweeps:
                return -sweeps
        violated = False
        for j in range(d):
            if active[j] or xv[j] <= 0.0:
                continue
            g = 0.0
            for i in range(n):
                g += Xs[i, j] * v[i] * r[i]
            g /= n
            if abs(g) > l1 * pf[j]:
                active[j] = True
                violated = True
        if not violated:
            return sweeps


@njit(cache=True)
def _gaussian_path(Xs, y, w, pf, lambdas, alpha, fit_intercept, tol, max_sweeps,
                   early_stop, beta0, b00, k_offset, prev_ratio):
    n, d = Xs.shape
    K = lambdas.shape[0]
    betas = np.zeros((K, d))
    b0s = np.zeros(K)
    xv = np.zeros(d)
    for j in range(d):
        s = 0.0
        for i in range(n):
            s += w[i] * Xs[i, j] * Xs[i, j]
        xv[j] = s / n
    beta = beta0.copy()
    b0 = np.zeros(1)
    b0[0] = b00
    r = y - b0[0] - Xs @ beta
    active = np.zeros(d, dtype=np.bool_)
    for j in range(d):
        if beta[j] != 0.0 or pf[j] == 0.0:
            active[j] = True
    sw = w.sum()
    ybar = (w * y).sum() / sw if fit_intercept else 0.0
    nulldev = 0.0
    for i in range(n):
        nulldev += w[i] * (y[i] - ybar) ** 2
    sweeps = 0
    stopped = -1
    for k in range(K):
        if stopped >= 0:
            betas[k] = betas[stopped]
            b0s[k] = b0s[stopped]
            continue
        used = _solve_quadratic(Xs, w, xv, pf, lambdas[k], alpha, beta, b0, r, active,
                                fit_intercept, tol, max_sweeps, 0)
        betas[k] = beta
        b0s[k] = b0[0]
        if used < 0:
            return betas, b0s, used, k, stopped, prev_ratio
        sweeps += used
        if early_stop and nulldev > 0.0:
            dev = 0.0
            for i in range(n):
                dev += w[i] * r[i] * r[i]
            ratio = 1.0 - dev / nulldev
            if ratio >= 0.999 or (k + k_offset >= 5 and ratio - prev_ratio < 1e-5 * ratio):
                stopped = k
            prev_ratio = ratio
    return betas, b0s, sweeps, K, stopped, prev_ratio


@njit(cache=True)
def _binomial_path(Xs, y, w, pf, lambdas, alpha, fit_intercept, tol, max_sweeps,
                   early_stop, beta0, b00, clamp, k_offset, prev_ratio):
    n, d = Xs.shape
    K = lambdas.shape[0]
    betas = np.zeros((K, d))
    b0s = np.zeros(K)
    beta = beta0.copy()
    b0 = np.zeros(1)
    b0[0] = b00
    active = np.zeros(d, dtype=np.bool_)
    for j in range(d):
        if beta[j] != 0.0 or pf[j] == 0.0:
            active[j] = True
    v = np.zeros(n)
    r = np.zeros(n)
    xv = np.zeros(d)
    sw = w.sum()
    ybar = (w * y).sum() / sw if fit_intercept else 0.5
    ybar = min(max(ybar, clamp), 1.0 - clamp)
    nulldev = 0.0
    for i in range(n):
        nulldev -= 2.0 * w[i] * (y[i] * math.log(ybar) + (1.0 - y[i]) * math.log(1.0 - ybar))
    sweeps = 0
    stopped = -1
    for k in range(K):
        if stopped >= 0:
            betas[k] = betas[stopped]
            b0s[k] = b0s[stopped]
            continue
        used = 0
        for it in range(_MAX_IRLS):
            eta = b0[0] + Xs @ beta
            for i in range(n):
                p = 1.0 / (1.0 + math.exp(-eta[i]))
                p = min(max(p, clamp), 1.0 - clamp)
                v[i] = w[i] * p * (1.0 - p)
                r[i] = (y[i] - p) / (p * (1.0 - p))
            for j in range(d):
                s = 0.0
                for i in range(n):
                    s += v[i] * Xs[i, j] * Xs[i, j]
                xv[j] = s / n
            old_beta = beta.copy()
            old_b0 = b0[0]
            used = _solve_quadratic(Xs, v, xv, pf, lambdas[k], alpha, beta, b0, r, active,
                                    fit_intercept, tol, max_sweeps, used)
            if used < 0:
                betas[k] = beta
                b0s[k] = b0[0]
                return betas, b0s, used, k, stopped, prev_ratio
            change = abs(b0[0] - old_b0)
            for j in range(d):
                c = abs(beta[j] - old_beta[j]) * math.sqrt(xv[j])
                if c > change:
                    change = c
            if change < tol:
                break
        sweeps += used
        betas[k] = beta
        b0s[k] = b0[0]
        if early_stop and nulldev > 0.0:
            eta = b0[0] + Xs @ beta
            dev = 0.0
            for i in range(n):
                p = 1.0 / (1.0 + math.exp(-eta[i]))
                p = min(max(p, clamp), 1.0 - clamp)
                dev -= 2.0 * w[i] * (y[i] * math.log(p) + (1.0 - y[i]) * math.log(1.0 - p))
            ratio = 1.0 - dev / nulldev
            if ratio >= 0.999 or (k + k_offset >= 5 and ratio - prev_ratio < 1e-5 * ratio):
                stopped = k
            prev_ratio = ratio
    return betas, b0s, sweeps, K, stopped, prev_ratio


# ---------------------------------------------------------------------------
# standardization and paths


@dataclass(frozen=True)
class _Prepared:
    Xs: np.ndarray
    y: np.ndarray
    w: np.ndarray
    pf: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    problem: RegressionProblem


def _prepare(problem: RegressionProblem) -> _Prepared:
    X, y = problem.design, problem.response
    n = problem.n
    w = problem.weights * (n / problem.weights.sum())
    if problem.fit_intercept:
        center = w @ X / n
    else:
        center = np.zeros(problem.d)
    Xc = X - center
    if problem.standardize:
        scale = np.sqrt(w @ (Xc * Xc) / n)
    else:
        scale = np.ones(problem.d)
    constant = scale <= 1e-12 * (1.0 + np.abs(center))
    scale = np.where(constant, 1.0, scale)
    Xs = np.asfortranarray(Xc / scale)
    if np.any(constant):
        Xs[:, constant] = 0.0
    return _Prepared(Xs, y, w, problem.penalty_factor.copy(), center, scale, problem)


def _start_point(prep: _Prepared):
    pr = prep.problem
    b00 = 0.0
    if pr.fit_intercept:
        ybar = float(prep.w @ prep.y / prep.w.sum())
        if pr.family == "binomial":
            ybar = min(max(ybar, PROB_CLAMP), 1 - PROB_CLAMP)
            b00 = math.log(ybar / (1 - ybar))
        else:
            b00 = ybar
    return np.zeros(pr.d), b00


def _run_path(prep: _Prepared, lambdas, *, tol, max_sweeps, early_stop, start=None,
              k_offset=0, prev_ratio=0.0):
    pr = prep.problem
    beta0, b00 = _start_point(prep) if start is None else start
    lambdas = np.ascontiguousarray(lambdas, dtype=np.float64)
    if pr.family == "gaussian":
        return _gaussian_path(prep.Xs, prep.y, prep.w, prep.pf, lambdas, pr.penalty_mix,
                              pr.fit_intercept, tol, max_sweeps, early_stop, beta0, b00,
                              k_offset, prev_ratio)
    return _binomial_path(prep.Xs, prep.y, prep.w, prep.pf, lambdas, pr.penalty_mix,
                          pr.fit_intercept, tol, max_sweeps, early_stop, beta0, b00, PROB_CLAMP,
                          k_offset, prev_ratio)


def _null_fit(prep: _Prepared, tol, max_sweeps):
    """Fit with every penalized coefficient held at zero."""
    betas, b0s, sweeps, *_ = _run_path(prep, np.array([_HUGE]), tol=tol,
                                       max_sweeps=max_sweeps, early_stop=False)
    if sweeps < 0:
        raise ConvergenceError("null model did not converge")
    beta = np.where(prep.pf > 0, 0.0, betas[0])
    return beta, b0s[0]


def _lambda_max(prep: _Prepared, tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS):
    beta, b0 = _null_fit(prep, tol, max_sweeps)
    eta = b0 + prep.Xs @ beta
    mu = eta if prep.problem.family == "gaussian" else 1.0 / (1.0 + np.exp(-eta))
    grad = prep.Xs.T @ (prep.w * (prep.y - mu)) / prep.problem.n
    mix = max(prep.problem.penalty_mix, 1e-3)
    pen = prep.pf > 0
    if not np.any(pen):
        return 1e-10, (beta, b0)
    lmax = float(np.max(np.abs(grad[pen]) / (mix * prep.pf[pen])))
    return max(lmax, 1e-10), (beta, b0)


def lambda_max(problem: RegressionProblem) -> float:
    """Smallest penalty at which every penalized coefficient is exactly zero."""
    return _lambda_max(_prepare(problem))[0]


def lambda_grid(problem: RegressionProblem, grid_size: int = 100, min_ratio: float | None = None) -> np.ndarray:
    """Log-spaced decreasing grid from ``lambda_max`` to ``min_ratio * lambda_max``."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if min_ratio is None:
        min_ratio = 1e-3 if problem.family == "gaussian" else 1e-2
    lmax = lambda_max(problem)
    return lmax * np.power(min_ratio, np.arange(grid_size) / (grid_size - 1))


def _to_model(prep: _Prepared, beta_std, b0_std, lam, sweeps) -> FittedLinearModel:
    coef = beta_std / prep.scale
    intercept = float(b0_std - coef @ prep.center)
    return FittedLinearModel(intercept, coef, float(lam), prep.problem.family,
                             prep.center.copy(), prep.scale.copy(),
                             prep.problem.penalty_mix, int(abs(sweeps)))


def _raise_unconverged(prep, beta, b0, lam, sweeps):
    last = _to_model(prep, beta, b0, lam, sweeps)
    raise ConvergenceError(
        f"coordinate descent did not converge within the sweep budget at lambda={lam:.3g}",
        last_iterate=last,
    )


class _PathRunner:
    """Resumable warm-started path on one problem (used to advance CV folds
    in lockstep)."""

    def __init__(self, problem, tol, max_sweeps, early_stop=True):
        self.prep = _prepare(problem)
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.early_stop = early_stop
        _, self.state = _lambda_max(self.prep)
        self.k = 0
        self.prev_ratio = 0.0
        self.frozen = False
        self.sweeps = 0

    def advance(self, lambdas):
        """Solve at the next penalties; returns standardized (betas, b0s)."""
        m = len(lambdas)
        if self.frozen:
            beta, b0 = self.state
            return np.tile(beta, (m, 1)), np.full(m, b0)
        betas, b0s, sweeps, k, stopped, ratio = _run_path(
            self.prep, lambdas, tol=self.tol, max_sweeps=self.max_sweeps,
            early_stop=self.early_stop, start=self.state, k_offset=self.k,
            prev_ratio=self.prev_ratio)
        if sweeps < 0:
            _raise_unconverged(self.prep, betas[k], b0s[k], lambdas[k], sweeps)
        self.sweeps += sweeps
        last = m - 1 if stopped < 0 else stopped
        self.state = (betas[last].copy(), float(b0s[last]))
        self.frozen = stopped >= 0
        self.prev_ratio = ratio
        self.k += m
        return betas, b0s

    def original_scale(self, betas, b0s):
        coefs = betas / self.prep.scale
        return coefs, b0s - coefs @ self.prep.center

    def model(self, lam) -> FittedLinearModel:
        beta, b0 = self.state
        return _to_model(self.prep, beta, b0, lam, self.sweeps)


def fit_elastic_net(problem: RegressionProblem, lam: float, *, tol: float = DEFAULT_TOL,
                    max_sweeps: int = DEFAULT_MAX_SWEEPS) -> FittedLinearModel:
    """Fit the elastic net at a single penalty level.

    The solution is reached by a short warm-started path from
    ``lambda_max`` down to ``lam`` (no early stopping), which is both faster
    and more stable than a cold start at small penalties.
    """
    if lam < 0 or not np.isfinite(lam):
        raise ValueError("lam must be a finite nonnegative number")
    runner = _PathRunner(problem, tol, max_sweeps, early_stop=False)
    lmax = _lambda_max(runner.prep)[0]
    if lam >= lmax:
        return runner.model(lam)
    if lam > 0:
        steps = int(min(20, max(2, math.ceil(math.log10(lmax / lam) * 5) + 1)))
        lambdas = lmax * np.power(lam / lmax, np.arange(1, steps + 1) / steps)
    else:
        lambdas = np.concatenate([lmax * np.power(1e-4, np.arange(1, 11) / 10), [0.0]])
    lambdas[-1] = lam
    runner.advance(lambdas)
    return runner.model(lam)


def fit_path(problem: RegressionProblem, lambdas: np.ndarray, *, tol: float = DEFAULT_TOL,
             max_sweeps: int = DEFAULT_MAX_SWEEPS, early_stop: bool = True) -> list[FittedLinearModel]:
    """Warm-started fits along a decreasing penalty sequence.

    With ``early_stop`` the path is frozen once the deviance ratio exceeds
    0.999 or stops improving, and later penalties reuse that solution.
    """
    runner = _PathRunner(problem, tol, max_sweeps, early_stop)
    betas, b0s = runner.advance(np.asarray(lambdas, dtype=np.float64))
    return [_to_model(runner.prep, betas[i], b0s[i], lambdas[i], runner.sweeps)
            for i in range(len(lambdas))]


def _ridge_path_arrays(problem, lambdas):
    """Exact gaussian ridge path from one SVD of the centered, scaled design."""
    prep = _prepare(problem)
    n = problem.n
    if not np.allclose(prep.pf, 1.0):
        raise ValueError("closed-form ridge path requires unit penalty factors")
    sw = np.sqrt(prep.w / n)
    ybar = float(prep.w @ prep.y / n) if problem.fit_intercept else 0.0
    xmean = prep.w @ prep.Xs / n if problem.fit_intercept else np.zeros(problem.d)
    Xw = (prep.Xs - xmean) * sw[:, None]
    yw = (prep.y - ybar) * sw
    if problem.d > problem.n:
        # thin SVD through the n x n Gram matrix
        evals, U = np.linalg.eigh(Xw @ Xw.T)
        keep = evals > 1e-10 * max(evals.max(), 1e-300)
        s = np.sqrt(evals[keep])
        U = U[:, keep]
        Vt = (Xw.T @ U / s).T
    else:
        U, s, Vt = np.linalg.svd(Xw, full_matrices=False)
    uy = U.T @ yw
    shrink = s[None, :] / (s[None, :] ** 2 + np.asarray(lambdas)[:, None])
    betas = (shrink * uy[None, :]) @ Vt
    b0s = ybar - betas @ xmean
    coefs = betas / prep.scale
    return coefs, b0s - coefs @ prep.center, prep


def _heldout_loss(problem: RegressionProblem, rows, coefs, intercepts):
    X = problem.design[rows]
    y = problem.response[rows]
    w = problem.weights[rows]
    eta = X @ coefs.T + intercepts[None, :]
    if problem.family == "gaussian":
        loss = (y[:, None] - eta) ** 2
    else:
        p = np.clip(1.0 / (1.0 + np.exp(-eta)), PROB_CLAMP, 1 - PROB_CLAMP)
        loss = -(y[:, None] * np.log(p) + (1 - y[:, None]) * np.log(1 - p))
    return w @ loss / w.sum()


def fold_assignment(n: int, folds: int, seed) -> np.ndarray:
    """Seed-deterministic balanced partition of ``range(n)`` into ``folds`` parts."""
    perm = np.random.default_rng(seed).permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[perm] = np.arange(n) % folds
    return out


_CHUNK = 5
_PATIENCE = 5
_RISE = 0.05


def _curve_has_turned(cv_risk: np.ndarray) -> bool:
    best = int(np.argmin(cv_risk))
    tail = cv_risk[best + 1:]
    return (len(tail) >= _PATIENCE
            and np.all(tail[-_PATIENCE:] > cv_risk[best])
            and cv_risk[-1] > (1.0 + _RISE) * cv_risk[best])


def cv_select_lambda(problem: RegressionProblem, folds: int = 10, grid_size: int = 100, seed=0,
                     *, lambdas: np.ndarray | None = None, tol: float = DEFAULT_TOL,
                     max_sweeps: int = DEFAULT_MAX_SWEEPS, solver: str = "cd",
                     truncate: bool = True) -> CvResult:
    """K-fold cross-validated penalty selection on a shared lambda grid.

    ``cv_risk[k]`` is the mean over folds of the held-out weighted squared
    error (gaussian) or negative log-likelihood (binomial). The minimizing
    penalty is selected; ties go to the smallest penalty. The returned
    ``model`` is the full-data fit at the selected penalty.

    Fold paths advance in lockstep, five penalties at a time. With
    ``truncate`` the grid is cut once the CV risk has stayed above its minimum
    for five consecutive penalties and ends 5% above it; the
    returned ``lambda_grid`` is the evaluated prefix.

    ``solver="svd"`` computes the gaussian ridge path in closed form.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if problem.n < folds:
        raise ValueError(f"n={problem.n} is smaller than the number of folds ({folds})")
    if solver == "svd" and (problem.family != "gaussian" or problem.penalty_mix != 0.0):
        raise ValueError("svd solver only applies to gaussian ridge")
    if lambdas is None:
        lambdas = lambda_grid(problem, grid_size)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    assign = fold_assignment(problem.n, folds, seed)
    splits = [(np.flatnonzero(assign != k), np.flatnonzero(assign == k)) for k in range(folds)]

    if solver == "svd":
        risks = np.stack([_heldout_loss(problem, test, *_ridge_path_arrays(problem.subset(train), lambdas)[:2])
                          for train, test in splits])
        cv_risk = risks.mean(axis=0)
        best = int(np.flatnonzero(cv_risk == cv_risk.min())[-1])
        coefs, intercepts, prep = _ridge_path_arrays(problem, lambdas[best:best + 1])
        model = FittedLinearModel(float(intercepts[0]), coefs[0], float(lambdas[best]), problem.family,
                                  prep.center, prep.scale, problem.penalty_mix, 0)
        return CvResult(lambdas, cv_risk, float(lambdas[best]), assign, best, model)

    runners = [_PathRunner(problem.subset(train), tol, max_sweeps) for train, _ in splits]
    risk_cols = []
    done = 0
    while done < len(lambdas):
        chunk = lambdas[done:done + _CHUNK]
        block = np.empty((folds, len(chunk)))
        for k, (runner, (_, test)) in enumerate(zip(runners, splits)):
            coefs, intercepts = runner.original_scale(*runner.advance(chunk))
            block[k] = _heldout_loss(problem, test, coefs, intercepts)
        risk_cols.append(block)
        done += len(chunk)
        if truncate and _curve_has_turned(np.concatenate(risk_cols, axis=1).mean(axis=0)):
            break
    cv_risk = np.concatenate(risk_cols, axis=1).mean(axis=0)
    grid = lambdas[:done]
    best = int(np.flatnonzero(cv_risk == cv_risk.min())[-1])
    full = _PathRunner(problem, tol, max_sweeps)
    full.advance(grid[: best + 1])
    return CvResult(grid, cv_risk, float(grid[best]), assign, best, full.model(grid[best]))


def predict_linear(model: FittedLinearModel, X) -> np.ndarray:
    """Linear predictor (gaussian) or fitted probability (binomial)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.coefficients.shape[0]:
        raise ValueError(
            f"X has shape {X.shape}; expected {model.coefficients.shape[0]} columns")
    eta = X @ model.coefficients + model.intercept
    if model.family == "gaussian":
        return eta
    return 1.0 / (1.0 + np.exp(-eta))


def kkt_residuals(problem: RegressionProblem, model: FittedLinearModel) -> np.ndarray:
    """Per-coordinate violation of the elastic-net optimality conditions on the
    standardized scale (zero at an exact solution)."""
    prep = _prepare(problem)
    beta = model.standardized_coefficients
    b0 = model.intercept + model.coefficients @ prep.center
    eta = b0 + prep.Xs @ beta
    mu = eta if problem.family == "gaussian" else 1.0 / (1.0 + np.exp(-eta))
    grad = prep.Xs.T @ (prep.w * (prep.y - mu)) / problem.n
    lam, a, pf = model.lam, problem.penalty_mix, prep.pf
    g = grad - lam * (1 - a) * pf * beta
    out = np.where(beta == 0.0,
                   np.maximum(np.abs(g) - lam * a * pf, 0.0),
                   np.abs(g - lam * a * pf * np.sign(beta)))
    constant = np.all(prep.Xs == 0.0, axis=0)
    return np.where(constant, 0.0, out)


# ---------------------------------------------------------------------------
# estimator API


class ElasticNet(RegressorMixin, BaseEstimator):
    """Elastic net at a fixed penalty ``lam``."""

    def __init__(self, lam=1.0, l1_ratio=1.0, family="gaussian", fit_intercept=True,
                 standardize=True, tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS):
        self.lam = lam
        self.l1_ratio = l1_ratio
        self.family = family
        self.fit_intercept = fit_intercept
        self.standardize = standardize
        self.tol = tol
        self.max_sweeps = max_sweeps

    def _problem(self, X, y, sample_weight, penalty_factor=None):
        X = check_array(X)
        return RegressionProblem(X, y, self.family, sample_weight, self.l1_ratio,
                                 self.fit_intercept, self.standardize, penalty_factor)

    def fit(self, X, y, sample_weight=None, penalty_factor=None):
        problem = self._problem(X, y, sample_weight, penalty_factor)
        self.model_ = fit_elastic_net(problem, self.lam, tol=self.tol, max_sweeps=self.max_sweeps)
        self.coef_ = self.model_.coefficients
        self.intercept_ = self.model_.intercept
        self.n_features_in_ = problem.d
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_linear(self.model_, check_array(X))


class ElasticNetCV(ElasticNet):
    """Elastic net with the penalty chosen by K-fold cross-validation.

    ``solver="auto"`` uses the closed-form SVD path for gaussian ridge and
    coordinate descent otherwise.
    """

    def __init__(self, l1_ratio=1.0, family="gaussian", folds=10, grid_size=100,
                 random_state=0, fit_intercept=True, standardize=True, solver="auto",
                 tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS):
        self.l1_ratio = l1_ratio
        self.family = family
        self.folds = folds
        self.grid_size = grid_size
        self.random_state = random_state
        self.fit_intercept = fit_intercept
        self.standardize = standardize
        self.solver = solver
        self.tol = tol
        self.max_sweeps = max_sweeps

    def fit(self, X, y, sample_weight=None, penalty_factor=None):
        problem = self._problem(X, y, sample_weight, penalty_factor)
        solver = self.solver
        if solver == "auto":
            ridge = (self.family == "gaussian" and self.l1_ratio == 0.0
                     and problem.penalty_factor.min() == problem.penalty_factor.max() == 1.0)
            solver = "svd" if ridge else "cd"
        self.cv_result_ = cv_select_lambda(problem, self.folds, self.grid_size, self.random_state,
                                           tol=self.tol, max_sweeps=self.max_sweeps, solver=solver)
        self.model_ = self.cv_result_.model
        self.lam_ = self.cv_result_.selected_lambda
        self.coef_ = self.model_.coefficients
        self.intercept_ = self.model_.intercept
        self.n_features_in_ = problem.d
        return self
