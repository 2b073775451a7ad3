"""Regression forests, gradient-boosted trees and causal forests.

All trees share one flat array layout (``feature``, ``threshold``, ``left``,
``right``, ``value``; ``feature == -1`` marks a leaf) so a whole ensemble is
evaluated by a single compiled traversal. Samples with ``x <= threshold`` go
left. Split ties resolve to the lowest feature index, then the lowest
threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._seeding import derive_seed, tree_seeds

_GAIN_EPS = 1e-12


class TreeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    max_depth: int | None = None
    min_leaf_size: int = 5
    features_per_split: int | None = None
    subsample_fraction: float = 1.0
    honesty: bool = False
    seed: int = 0

    def resolve_mtry(self, d: int) -> int:
        m = self.features_per_split or int(math.ceil(math.sqrt(d)))
        if not 1 <= m <= d:
            raise TreeConfigError(f"features_per_split={m} must lie in [1, {d}]")
        return m

    def validate(self, allow_empty=False):
        if self.n_trees < (0 if allow_empty else 1):
            raise TreeConfigError("n_trees must be >= 1")
        if not 0 < self.subsample_fraction <= 1:
            raise TreeConfigError("subsample_fraction must lie in (0, 1]")
        if self.min_leaf_size < 1:
            raise TreeConfigError("min_leaf_size must be >= 1")


@dataclass(frozen=True)
class BoostConfig:
    n_rounds: int = 200
    learning_rate: float = 0.1
    max_depth: int = 3
    min_leaf_size: int = 1
    l2_leaf_penalty: float = 1.0
    subsample_fraction: float = 1.0
    seed: int = 0

    def validate(self):
        if self.n_rounds < 0:
            raise TreeConfigError("n_rounds must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise TreeConfigError("learning_rate must lie in (0, 1]")
        if self.l2_leaf_penalty < 0:
            raise TreeConfigError("l2_leaf_penalty must be >= 0")
        if not 0 < self.subsample_fraction <= 1:
            raise TreeConfigError("subsample_fraction must lie in (0, 1]")


# ---------------------------------------------------------------------------
# compiled builders


@njit(cache=True)
def _sample_features(d, mtry, scratch):
    for j in range(d):
        scratch[j] = j
    for j in range(mtry):
        k = j + np.random.randint(d - j)
        tmp = scratch[j]
        scratch[j] = scratch[k]
        scratch[k] = tmp
    return np.sort(scratch[:mtry])


@njit(cache=True)
def _build_gh_tree(X, g, h, idx, mtry, max_depth, min_leaf, l2, seed):
    """Depth-first tree on the sample list ``idx`` (duplicates allowed).

    Split gain is the second-order score GL^2/(HL+l2) + GR^2/(HR+l2) -
    G^2/(H+l2); with g = -w*y, h = w, l2 = 0 this is the weighted
    squared-error reduction. Leaf values are -G/(H+l2).
    """
    np.random.seed(seed)
    n_s = idx.shape[0]
    d = X.shape[1]
    cap = 2 * n_s + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    scratch = np.empty(d, dtype=np.int64)
    stack_node = np.empty(cap, dtype=np.int64)
    stack_lo = np.empty(cap, dtype=np.int64)
    stack_hi = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    idx = idx.copy()
    n_nodes = 1
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n_s
    stack_depth[0] = 0
    top = 1
    vals = np.empty(n_s)
    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        depth = stack_depth[top]
        m = hi - lo
        G = 0.0
        H = 0.0
        for t in range(lo, hi):
            G += g[idx[t]]
            H += h[idx[t]]
        value[node] = -G / (H + l2) if H + l2 > 0 else 0.0
        if m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        parent = G * G / (H + l2) if H + l2 > 0 else 0.0
        best_gain = _GAIN_EPS * (1.0 + abs(parent))
        best_f = -1
        best_thr = 0.0
        feats = _sample_features(d, mtry, scratch)
        for f in feats:
            for t in range(m):
                vals[t] = X[idx[lo + t], f]
            order = np.argsort(vals[:m], kind="mergesort")
            GL = 0.0
            HL = 0.0
            for t in range(m - 1):
                i = idx[lo + order[t]]
                GL += g[i]
                HL += h[i]
                nl = t + 1
                if nl < min_leaf:
                    continue
                if m - nl < min_leaf:
                    break
                v0 = vals[order[t]]
                v1 = vals[order[t + 1]]
                if v1 <= v0:
                    continue
                GR = G - GL
                HR = H - HL
                if HL + l2 <= 0 or HR + l2 <= 0:
                    continue
                gain = GL * GL / (HL + l2) + GR * GR / (HR + l2) - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_thr = 0.5 * (v0 + v1)
        if best_f < 0:
            continue
        # partition idx[lo:hi]
        a = lo
        b = hi - 1
        while a <= b:
            if X[idx[a], best_f] <= best_thr:
                a += 1
            else:
                tmp = idx[a]
                idx[a] = idx[b]
                idx[b] = tmp
                b -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack_node[top] = n_nodes
        stack_lo[top] = lo
        stack_hi[top] = a
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = n_nodes + 1
        stack_lo[top] = a
        stack_hi[top] = hi
        stack_depth[top] = depth + 1
        top += 1
        n_nodes += 2
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


@njit(cache=True)
def _build_levelwise_tree(X, order, g, h, inbag, max_depth, min_leaf, l2):
    """Exact greedy tree grown level by level over presorted columns.

    Every level costs one pass over each presorted column, so boosting with
    all features considered stays O(d * n * depth) per round.
    """
    n, d = X.shape
    cap = 2 ** (max_depth + 1) + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    node_of = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if inbag[i]:
            node_of[i] = 0
    level_nodes = np.zeros(1, dtype=np.int64)
    n_nodes = 1
    for depth in range(max_depth + 1):
        L = level_nodes.shape[0]
        if L == 0:
            break
        slot = np.full(n_nodes, -1, dtype=np.int64)
        for k in range(L):
            slot[level_nodes[k]] = k
        G = np.zeros(L)
        H = np.zeros(L)
        C = np.zeros(L, dtype=np.int64)
        for i in range(n):
            nd = node_of[i]
            if nd >= 0 and slot[nd] >= 0:
                k = slot[nd]
                G[k] += g[i]
                H[k] += h[i]
                C[k] += 1
        for k in range(L):
            nd = level_nodes[k]
            value[nd] = -G[k] / (H[k] + l2) if H[k] + l2 > 0 else 0.0
        if depth == max_depth:
            break
        parent = np.zeros(L)
        best_gain = np.zeros(L)
        best_f = np.full(L, -1, dtype=np.int64)
        best_thr = np.zeros(L)
        for k in range(L):
            parent[k] = G[k] * G[k] / (H[k] + l2) if H[k] + l2 > 0 else 0.0
            best_gain[k] = _GAIN_EPS * (1.0 + abs(parent[k]))
        GL = np.zeros(L)
        HL = np.zeros(L)
        CL = np.zeros(L, dtype=np.int64)
        last = np.zeros(L)
        for f in range(d):
            GL[:] = 0.0
            HL[:] = 0.0
            CL[:] = 0
            for t in range(n):
                i = order[t, f]
                nd = node_of[i]
                if nd < 0:
                    continue
                k = slot[nd]
                if k < 0 or C[k] < 2 * min_leaf:
                    continue
                v = X[i, f]
                if CL[k] >= min_leaf and C[k] - CL[k] >= min_leaf and v > last[k]:
                    GR = G[k] - GL[k]
                    HR = H[k] - HL[k]
                    if HL[k] + l2 > 0 and HR + l2 > 0:
                        gain = GL[k] * GL[k] / (HL[k] + l2) + GR * GR / (HR + l2) - parent[k]
                        if gain > best_gain[k]:
                            best_gain[k] = gain
                            best_f[k] = f
                            best_thr[k] = 0.5 * (last[k] + v)
                GL[k] += g[i]
                HL[k] += h[i]
                CL[k] += 1
                last[k] = v
        n_split = 0
        for k in range(L):
            if best_f[k] >= 0:
                n_split += 1
        nxt = np.empty(2 * n_split, dtype=np.int64)
        c = 0
        for k in range(L):
            if best_f[k] < 0:
                continue
            nd = level_nodes[k]
            feature[nd] = best_f[k]
            threshold[nd] = best_thr[k]
            left[nd] = n_nodes
            right[nd] = n_nodes + 1
            nxt[c] = n_nodes
            nxt[c + 1] = n_nodes + 1
            c += 2
            n_nodes += 2
        for i in range(n):
            nd = node_of[i]
            if nd >= 0 and feature[nd] >= 0 and nd < slot.shape[0] and slot[nd] >= 0:
                if X[i, feature[nd]] <= threshold[nd]:
                    node_of[i] = left[nd]
                else:
                    node_of[i] = right[nd]
        level_nodes = nxt
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


@njit(cache=True)
def _leaf_index(X, feature, threshold, left, right, root):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        nd = root
        while feature[nd] >= 0:
            if X[i, feature[nd]] <= threshold[nd]:
                nd = left[nd]
            else:
                nd = right[nd]
        out[i] = nd
    return out


@njit(cache=True)
def _sum_trees(X, feature, threshold, left, right, value, roots):
    n = X.shape[0]
    out = np.zeros(n)
    for r in roots:
        for i in range(n):
            nd = r
            while feature[nd] >= 0:
                if X[i, feature[nd]] <= threshold[nd]:
                    nd = left[nd]
                else:
                    nd = right[nd]
            out[i] += value[nd]
    return out


class _FlatForest:
    """Concatenated node arrays of an ensemble (children offset globally)."""

    def __init__(self, trees):
        feats, thrs, lefts, rights, vals, roots = [], [], [], [], [], []
        offset = 0
        for f, t, l, r, v in trees:
            roots.append(offset)
            feats.append(f)
            thrs.append(t)
            lefts.append(np.where(l >= 0, l + offset, -1))
            rights.append(np.where(r >= 0, r + offset, -1))
            vals.append(v)
            offset += f.shape[0]
        cat = (lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt))
        self.feature = cat(feats, np.int64)
        self.threshold = cat(thrs, np.float64)
        self.left = cat(lefts, np.int64)
        self.right = cat(rights, np.int64)
        self.value = cat(vals, np.float64)
        self.roots = np.asarray(roots, dtype=np.int64)

    @property
    def n_trees(self):
        return self.roots.shape[0]

    def sum(self, X):
        return _sum_trees(X, self.feature, self.threshold, self.left, self.right, self.value, self.roots)

    def leaves(self, X, t):
        return _leaf_index(X, self.feature, self.threshold, self.left, self.right, self.roots[t])


def _as_weights(sample_weight, n):
    if sample_weight is None:
        return np.ones(n)
    w = np.asarray(sample_weight, dtype=np.float64).ravel()
    if w.shape[0] != n or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("sample_weight must be finite, nonnegative and of length n")
    return w


# ---------------------------------------------------------------------------
# random forest


class RandomForest(RegressorMixin, BaseEstimator):
    """Breiman regression forest with bootstrap resampling.

    ``oob_prediction_`` holds out-of-bag predictions for the training rows
    (falling back to the in-sample prediction for rows never left out).
    """

    def __init__(self, n_trees=500, max_depth=None, min_leaf_size=5, features_per_split=None,
                 subsample_fraction=1.0, bootstrap=True, random_state=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf_size = min_leaf_size
        self.features_per_split = features_per_split
        self.subsample_fraction = subsample_fraction
        self.bootstrap = bootstrap
        self.random_state = random_state

    def _config(self):
        cfg = ForestConfig(self.n_trees, self.max_depth, self.min_leaf_size,
                           self.features_per_split, self.subsample_fraction, False,
                           self.random_state)
        cfg.validate()
        return cfg

    def fit(self, X, y, sample_weight=None):
        X = np.ascontiguousarray(check_array(X), dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        n, d = X.shape
        if y.shape[0] != n:
            raise ValueError("X and y have different lengths")
        cfg = self._config()
        if n < 2 * cfg.min_leaf_size:
            raise TreeConfigError(f"n={n} < 2 * min_leaf_size={2 * cfg.min_leaf_size}")
        w = _as_weights(sample_weight, n)
        mtry = cfg.resolve_mtry(d)
        depth = -1 if cfg.max_depth is None else int(cfg.max_depth)
        m = max(1, int(round(cfg.subsample_fraction * n)))
        g, h = -w * y, w
        trees = []
        oob_sum = np.zeros(n)
        oob_cnt = np.zeros(n)
        for seed in tree_seeds(cfg.seed, cfg.n_trees):
            rng = np.random.default_rng(seed)
            idx = rng.integers(0, n, size=m) if self.bootstrap else np.sort(rng.permutation(n)[:m])
            tree = _build_gh_tree(X, g, h, idx.astype(np.int64), mtry, depth,
                                  cfg.min_leaf_size, 0.0, seed)
            trees.append(tree)
            out = np.ones(n, dtype=bool)
            out[idx] = False
            if out.any():
                f, t, l, r, v = tree
                leaf = _leaf_index(X[out], f, t, l, r, 0)
                oob_sum[out] += v[leaf]
                oob_cnt[out] += 1
        self.forest_ = _FlatForest(trees)
        self.n_features_in_ = d
        in_sample = self.forest_.sum(X) / self.forest_.n_trees
        self.oob_prediction_ = np.where(oob_cnt > 0, oob_sum / np.maximum(oob_cnt, 1), in_sample)
        return self

    def predict(self, X):
        check_is_fitted(self, "forest_")
        X = np.ascontiguousarray(check_array(X), dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns; expected {self.n_features_in_}")
        return self.forest_.sum(X) / self.forest_.n_trees


def fit_random_forest(X, y, weights=None, config: ForestConfig = ForestConfig()) -> RandomForest:
    return RandomForest(config.n_trees, config.max_depth, config.min_leaf_size,
                        config.features_per_split, config.subsample_fraction,
                        random_state=config.seed).fit(X, y, weights)


# ---------------------------------------------------------------------------
# gradient boosting


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class GradientBoosting(RegressorMixin, BaseEstimator):
    """Second-order gradient boosting with depth-limited trees.

    Leaf values are Newton steps ``-G / (H + l2_leaf_penalty)`` scaled by
    ``learning_rate``; every feature is considered at every split. For
    ``loss="logistic"`` :meth:`predict` returns probabilities.
    """

    def __init__(self, n_rounds=200, learning_rate=0.1, max_depth=3, min_leaf_size=1,
                 l2_leaf_penalty=1.0, subsample_fraction=1.0, loss="squared", random_state=0):
        self.n_rounds = n_rounds
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_leaf_size = min_leaf_size
        self.l2_leaf_penalty = l2_leaf_penalty
        self.subsample_fraction = subsample_fraction
        self.loss = loss
        self.random_state = random_state

    def _loss(self, y, w, raw):
        if self.loss == "squared":
            return float(w @ (y - raw) ** 2 / w.sum())
        p = np.clip(_sigmoid(raw), 1e-15, 1 - 1e-15)
        return float(-(w @ (y * np.log(p) + (1 - y) * np.log(1 - p))) / w.sum())

    def fit(self, X, y, sample_weight=None):
        if self.loss not in ("squared", "logistic"):
            raise ValueError("loss must be 'squared' or 'logistic'")
        cfg = BoostConfig(self.n_rounds, self.learning_rate, self.max_depth, self.min_leaf_size,
                          self.l2_leaf_penalty, self.subsample_fraction, self.random_state)
        cfg.validate()
        X = np.ascontiguousarray(check_array(X), dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        n, d = X.shape
        if y.shape[0] != n:
            raise ValueError("X and y have different lengths")
        if n < 2 * cfg.min_leaf_size:
            raise TreeConfigError(f"n={n} < 2 * min_leaf_size={2 * cfg.min_leaf_size}")
        w = _as_weights(sample_weight, n)
        if self.loss == "logistic":
            if not np.all((y == 0) | (y == 1)):
                raise ValueError("logistic loss needs 0/1 responses")
            pbar = min(max(float(w @ y / w.sum()), 1e-6), 1 - 1e-6)
            base = math.log(pbar / (1 - pbar))
        else:
            base = float(w @ y / w.sum())
        self.base_score_ = base
        raw = np.full(n, base)
        order = np.ascontiguousarray(np.argsort(X, axis=0, kind="mergesort"), dtype=np.int64)
        trees = []
        losses = [self._loss(y, w, raw)]
        m = max(1, int(round(cfg.subsample_fraction * n)))
        for t in range(cfg.n_rounds):
            if self.loss == "squared":
                g, h = w * (raw - y), w.copy()
            else:
                p = _sigmoid(raw)
                g, h = w * (p - y), w * p * (1 - p)
            inbag = np.ones(n, dtype=np.bool_)
            if m < n:
                rng = np.random.default_rng(derive_seed(cfg.seed, "round", t))
                inbag[:] = False
                inbag[rng.permutation(n)[:m]] = True
            f, thr, l, r, v = _build_levelwise_tree(X, order, g, h, inbag, cfg.max_depth,
                                                    cfg.min_leaf_size, cfg.l2_leaf_penalty)
            v = v * cfg.learning_rate
            trees.append((f, thr, l, r, v))
            raw += v[_leaf_index(X, f, thr, l, r, 0)]
            losses.append(self._loss(y, w, raw))
        self.forest_ = _FlatForest(trees)
        self.train_loss_ = np.asarray(losses)
        self.n_features_in_ = d
        return self

    def decision_function(self, X):
        check_is_fitted(self, "forest_")
        X = np.ascontiguousarray(check_array(X), dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns; expected {self.n_features_in_}")
        return self.base_score_ + self.forest_.sum(X)

    def predict(self, X):
        raw = self.decision_function(X)
        return _sigmoid(raw) if self.loss == "logistic" else raw


def fit_gradient_boosting(X, y, weights=None, config: BoostConfig = BoostConfig(),
                          loss: str = "squared") -> GradientBoosting:
    return GradientBoosting(config.n_rounds, config.learning_rate, config.max_depth,
                            config.min_leaf_size, config.l2_leaf_penalty,
                            config.subsample_fraction, loss, config.seed).fit(X, y, weights)


# ---------------------------------------------------------------------------
# causal forest


@njit(cache=True)
def _centered_slope(n, sa, sy, saa, say):
    den = saa - sa * sa / n
    if den <= 1e-12:
        return 0.0, False
    return (say - sa * sy / n) / den, True


@njit(cache=True)
def _build_causal_tree(X, ry, ra, arm, idx, mtry, max_depth, min_leaf, seed):
    """Tree whose splits maximize n_L n_R (tau_L - tau_R)^2 / n^2, the
    between-child variance of within-child residual-on-residual slopes.
    Each child must keep ``min_leaf`` samples and both treatment arms."""
    np.random.seed(seed)
    n_s = idx.shape[0]
    d = X.shape[1]
    cap = 2 * n_s + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    scratch = np.empty(d, dtype=np.int64)
    stack_node = np.empty(cap, dtype=np.int64)
    stack_lo = np.empty(cap, dtype=np.int64)
    stack_hi = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    idx = idx.copy()
    n_nodes = 1
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n_s
    stack_depth[0] = 0
    top = 1
    vals = np.empty(n_s)
    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        depth = stack_depth[top]
        m = hi - lo
        if m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        SA = 0.0
        SY = 0.0
        SAA = 0.0
        SAY = 0.0
        NT = 0
        for t in range(lo, hi):
            i = idx[t]
            SA += ra[i]
            SY += ry[i]
            SAA += ra[i] * ra[i]
            SAY += ra[i] * ry[i]
            NT += arm[i]
        best = 0.0
        best_f = -1
        best_thr = 0.0
        feats = _sample_features(d, mtry, scratch)
        for f in feats:
            for t in range(m):
                vals[t] = X[idx[lo + t], f]
            order = np.argsort(vals[:m], kind="mergesort")
            la = 0.0
            ly = 0.0
            laa = 0.0
            lay = 0.0
            lt = 0
            for t in range(m - 1):
                i = idx[lo + order[t]]
                la += ra[i]
                ly += ry[i]
                laa += ra[i] * ra[i]
                lay += ra[i] * ry[i]
                lt += arm[i]
                nl = t + 1
                nr = m - nl
                if nl < min_leaf:
                    continue
                if nr < min_leaf:
                    break
                if vals[order[t + 1]] <= vals[order[t]]:
                    continue
                if lt == 0 or lt == nl or NT - lt == 0 or NT - lt == nr:
                    continue
                tl, okl = _centered_slope(nl, la, ly, laa, lay)
                tr, okr = _centered_slope(nr, SA - la, SY - ly, SAA - laa, SAY - lay)
                if not (okl and okr):
                    continue
                crit = nl * nr * (tl - tr) ** 2 / (m * m)
                if crit > best:
                    best = crit
                    best_f = f
                    best_thr = 0.5 * (vals[order[t]] + vals[order[t + 1]])
        if best_f < 0:
            continue
        a = lo
        b = hi - 1
        while a <= b:
            if X[idx[a], best_f] <= best_thr:
                a += 1
            else:
                tmp = idx[a]
                idx[a] = idx[b]
                idx[b] = tmp
                b -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack_node[top] = n_nodes
        stack_lo[top] = lo
        stack_hi[top] = a
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = n_nodes + 1
        stack_lo[top] = a
        stack_hi[top] = hi
        stack_depth[top] = depth + 1
        top += 1
        n_nodes += 2
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


@njit(cache=True)
def _causal_weights(X, feature, threshold, left, right, roots, leaf_count, leaf_num, leaf_den,
                    leaf_treated, leaf_control):
    """Forest-weighted Robinson numerator, denominator and arm masses."""
    n = X.shape[0]
    num = np.zeros(n)
    den = np.zeros(n)
    treated = np.zeros(n)
    control = np.zeros(n)
    for r in roots:
        for i in range(n):
            nd = r
            while feature[nd] >= 0:
                if X[i, feature[nd]] <= threshold[nd]:
                    nd = left[nd]
                else:
                    nd = right[nd]
            c = leaf_count[nd]
            if c > 0:
                num[i] += leaf_num[nd] / c
                den[i] += leaf_den[nd] / c
                treated[i] += leaf_treated[nd] / c
                control[i] += leaf_control[nd] / c
    return num, den, treated, control


class CausalForest(BaseEstimator):
    """Honest causal forest with Robinson residual-on-residual aggregation.

    Each tree draws a subsample without replacement, grows its splits on one
    half and estimates leaf quantities on the other. The CATE at ``x`` is
    ``sum_i a_i(x) ry_i ra_i / sum_i a_i(x) ra_i^2`` with leaf co-occurrence
    weights ``a_i(x)``; when every neighbour shares one arm the global slope
    is returned instead and the row is counted in ``n_fallback_``.

    ``outcome_model`` / ``propensity_model`` give the marginal outcome
    surface and the propensity; when omitted, random forests are fit and their
    out-of-bag predictions are used for the residuals.
    """

    def __init__(self, n_trees=500, max_depth=None, min_leaf_size=10, features_per_split=None,
                 subsample_fraction=0.5, honesty=True, nuisance_trees=500, random_state=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf_size = min_leaf_size
        self.features_per_split = features_per_split
        self.subsample_fraction = subsample_fraction
        self.honesty = honesty
        self.nuisance_trees = nuisance_trees
        self.random_state = random_state

    def fit(self, X, y, treatment, outcome_model=None, propensity_model=None):
        X = np.ascontiguousarray(check_array(X), dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        a = np.asarray(treatment, dtype=np.float64).ravel()
        n, d = X.shape
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("treatment must be 0/1")
        cfg = ForestConfig(self.n_trees, self.max_depth, self.min_leaf_size,
                           self.features_per_split, self.subsample_fraction, self.honesty,
                           self.random_state)
        cfg.validate(allow_empty=True)
        mtry = cfg.resolve_mtry(d)
        if outcome_model is None:
            rf = RandomForest(self.nuisance_trees, random_state=derive_seed(cfg.seed, "m")).fit(X, y)
            m_hat = rf.oob_prediction_
        else:
            m_hat = np.asarray(outcome_model(X), dtype=np.float64)
        if propensity_model is None:
            rf = RandomForest(self.nuisance_trees, random_state=derive_seed(cfg.seed, "pi")).fit(X, a)
            pi_hat = rf.oob_prediction_
        else:
            pi_hat = np.asarray(propensity_model(X), dtype=np.float64)
        pi_hat = np.clip(pi_hat, 1e-3, 1 - 1e-3)
        ry = y - m_hat
        ra = a - pi_hat
        self.residuals_ = (ry, ra)
        self.global_slope_ = float(ry @ ra / (ra @ ra))
        arm = a.astype(np.int64)
        depth = -1 if cfg.max_depth is None else int(cfg.max_depth)
        m = max(2, int(round(cfg.subsample_fraction * n)))
        trees, counts, nums, dens, trs, cts = [], [], [], [], [], []
        for seed in tree_seeds(cfg.seed, cfg.n_trees):
            rng = np.random.default_rng(seed)
            sub = rng.permutation(n)[:m]
            if cfg.honesty:
                grow, est = np.sort(sub[: m // 2]), np.sort(sub[m // 2:])
            else:
                grow = est = np.sort(sub)
            tree = _build_causal_tree(X, ry, ra, arm, grow.astype(np.int64), mtry, depth,
                                      cfg.min_leaf_size, seed)
            f, t, l, r, _ = tree
            k = f.shape[0]
            leaf = _leaf_index(X[est], f, t, l, r, 0)
            counts.append(np.bincount(leaf, minlength=k).astype(np.float64))
            nums.append(np.bincount(leaf, weights=ry[est] * ra[est], minlength=k))
            dens.append(np.bincount(leaf, weights=ra[est] ** 2, minlength=k))
            trs.append(np.bincount(leaf, weights=a[est], minlength=k))
            cts.append(np.bincount(leaf, weights=1 - a[est], minlength=k))
            trees.append(tree)
        self.forest_ = _FlatForest(trees)
        cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0))
        self.leaf_stats_ = tuple(cat(v) for v in (counts, nums, dens, trs, cts))
        self.n_features_in_ = d
        return self

    def predict(self, X):
        """CATE predictions; always finite."""
        check_is_fitted(self, "forest_")
        X = np.ascontiguousarray(check_array(X), dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns; expected {self.n_features_in_}")
        if self.forest_.n_trees == 0:
            self.n_fallback_ = X.shape[0]
            return np.full(X.shape[0], self.global_slope_)
        f = self.forest_
        num, den, treated, control = _causal_weights(
            X, f.feature, f.threshold, f.left, f.right, f.roots, *self.leaf_stats_)
        bad = (den <= 1e-12) | (treated <= 0) | (control <= 0)
        self.n_fallback_ = int(bad.sum())
        return np.where(bad, self.global_slope_, num / np.where(bad, 1.0, den))


def fit_causal_forest(X, y, a, mu_hat=None, pi_hat=None, config: ForestConfig | None = None) -> CausalForest:
    """Functional entry point; ``mu_hat`` / ``pi_hat`` are callables of X."""
    cfg = config or ForestConfig(n_trees=500, min_leaf_size=10, subsample_fraction=0.5, honesty=True)
    return CausalForest(cfg.n_trees, cfg.max_depth, cfg.min_leaf_size, cfg.features_per_split,
                        cfg.subsample_fraction, cfg.honesty, random_state=cfg.seed).fit(
        X, y, a, outcome_model=mu_hat, propensity_model=pi_hat)
