"""Simulated data-generating processes with known CATEs.

Sixteen DGPs cross two treatment-assignment regimes, sparse or non-sparse
modifier sets, linear or non-linear outcome surfaces and identity or block
covariance. A DGP is addressed by a canonical id such as
``rct-sparse-linear-identity``:

========  =============================================================
regime    ``rct``: pi(w) = logit^-1((w1+w2+w3+w4)/5), known to estimators;
          ``obs``: pi(w) = 1/2, treated as unknown
sparsity  ``sparse``: delta has 10 entries equal to 2;
          ``nonsparse``: delta has 50 entries equal to 1/2
surface   ``linear``: mu(w, a) = a + gamma'w + a delta'w;
          ``nonlinear``: mu(w, a) = gamma'w + 2 arctan(a delta'w)
cov       ``identity`` or ``block`` (50 random unit-diagonal blocks)
========  =============================================================

with gamma_1..5 = 2, unit-variance gaussian noise and p = 500 by default.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag, cholesky
from scipy.special import expit

from ._seeding import derive_seed

N_BLOCKS = 50
DEFAULT_BLOCK_SEED = 20_230_501
_REGIMES = {"rct": "pi2_logistic", "obs": "pi1_constant_half"}
_OUTCOMES = {("sparse", "linear"): "mu1", ("nonsparse", "linear"): "mu2",
             ("sparse", "nonlinear"): "mu3", ("nonsparse", "nonlinear"): "mu4"}


class DgpError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Covariates ``W``, treatment ``A`` and outcome ``Y``.

    ``Y0``/``Y1`` hold potential outcomes (test sets only) and ``pi`` the
    true propensity when the generating mechanism is known.
    """

    W: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    Y0: np.ndarray | None = None
    Y1: np.ndarray | None = None
    pi: np.ndarray | None = None

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise DgpError("W must be a matrix")
        n = W.shape[0]
        object.__setattr__(self, "W", W)
        for name in ("A", "Y", "Y0", "Y1", "pi"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.float64).ravel()
            if v.shape[0] != n:
                raise DgpError(f"{name} has length {v.shape[0]}, expected {n}")
            object.__setattr__(self, name, v)
        if not np.all((self.A == 0) | (self.A == 1)):
            raise DgpError("A must be binary")
        if self.has_potential_outcomes:
            if not np.array_equal(self.Y, np.where(self.A == 1, self.Y1, self.Y0)):
                raise DgpError("Y must equal A*Y1 + (1-A)*Y0")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def p(self) -> int:
        return self.W.shape[1]

    @property
    def has_potential_outcomes(self) -> bool:
        return self.Y0 is not None and self.Y1 is not None

    def subset_columns(self, cols) -> "Dataset":
        cols = np.asarray(cols, dtype=np.int64)
        return Dataset(self.W[:, cols], self.A, self.Y, self.Y0, self.Y1, self.pi)

    def subset_rows(self, rows) -> "Dataset":
        pick = (lambda v: None if v is None else v[rows])
        return Dataset(self.W[rows], self.A[rows], self.Y[rows], pick(self.Y0), pick(self.Y1),
                       pick(self.pi))


@dataclass(frozen=True)
class CovarianceModel:
    kind: str
    p: int
    blocks: tuple = ()

    @property
    def matrix(self) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(self.p)
        return block_diag(*self.blocks)

    def leading(self, k: int) -> np.ndarray:
        """Top-left ``k`` x ``k`` submatrix without forming the full matrix."""
        if self.kind == "identity":
            return np.eye(k)
        size = self.blocks[0].shape[0]
        nb = -(-k // size)
        return block_diag(*self.blocks[:nb])[:k, :k]

    def transform(self, Z: np.ndarray) -> np.ndarray:
        """Map iid standard normals (rows) to N(0, Sigma) draws."""
        if self.kind == "identity":
            return Z
        out = np.empty_like(Z)
        size = self.blocks[0].shape[0]
        for b, block in enumerate(self.blocks):
            L = cholesky(block, lower=True)
            sl = slice(b * size, (b + 1) * size)
            out[:, sl] = Z[:, sl] @ L.T
        return out


def random_correlation_block(rng: np.random.Generator, size: int) -> np.ndarray:
    """D^-1/2 (G'G/size + 0.1 I) D^-1/2 for a standard normal ``G``."""
    G = rng.standard_normal((size, size))
    inner = G.T @ G / size + 0.1 * np.eye(size)
    s = 1.0 / np.sqrt(np.diag(inner))
    B = inner * s[:, None] * s[None, :]
    B = 0.5 * (B + B.T)
    np.fill_diagonal(B, 1.0)
    return B


def make_covariance(kind: str, p: int, seed: int = DEFAULT_BLOCK_SEED) -> CovarianceModel:
    if kind == "identity":
        return CovarianceModel("identity", p)
    if kind != "block":
        raise DgpError(f"unknown covariance kind {kind!r}")
    if p % N_BLOCKS:
        raise DgpError(f"block covariance needs p divisible by {N_BLOCKS}, got {p}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    size = p // N_BLOCKS
    return CovarianceModel("block", p, tuple(random_correlation_block(rng, size)
                                             for _ in range(N_BLOCKS)))


def propensity(kind: str, W: np.ndarray) -> np.ndarray:
    """Treatment probability for each row of ``W``.

    >>> float(propensity("pi2_logistic", np.full((1, 4), 5.0))[0])  # doctest: +ELLIPSIS
    0.98201...
    """
    W = np.atleast_2d(W)
    if kind == "pi1_constant_half":
        return np.full(W.shape[0], 0.5)
    if kind == "pi2_logistic":
        return expit(W[:, :4].sum(axis=1) / 5.0)
    raise DgpError(f"unknown propensity kind {kind!r}")


@dataclass(frozen=True)
class DgpSpec:
    p: int = 500
    covariance_kind: str = "identity"
    propensity_kind: str = "pi2_logistic"
    outcome_kind: str = "mu1"
    noise_sd: float = 1.0
    block_seed: int = DEFAULT_BLOCK_SEED
    gamma: np.ndarray = field(init=False, repr=False, compare=False)
    delta: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.outcome_kind not in ("mu1", "mu2", "mu3", "mu4"):
            raise DgpError(f"unknown outcome kind {self.outcome_kind!r}")
        if self.propensity_kind not in _REGIMES.values():
            raise DgpError(f"unknown propensity kind {self.propensity_kind!r}")
        if self.covariance_kind not in ("identity", "block"):
            raise DgpError(f"unknown covariance kind {self.covariance_kind!r}")
        sparse = self.outcome_kind in ("mu1", "mu3")
        k, val = (10, 2.0) if sparse else (50, 0.5)
        if self.p < max(k, 5):
            raise DgpError(f"p={self.p} is smaller than the modifier support {k}")
        gamma = np.zeros(self.p)
        gamma[:5] = 2.0
        delta = np.zeros(self.p)
        delta[:k] = val
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "delta", delta)

    @classmethod
    def from_id(cls, dgp_id: str, p: int = 500, **kwargs) -> "DgpSpec":
        parts = dgp_id.strip().lower().split("-")
        if len(parts) != 4 or parts[0] not in _REGIMES or (parts[1], parts[2]) not in _OUTCOMES \
                or parts[3] not in ("identity", "block"):
            raise DgpError(f"unrecognised DGP id {dgp_id!r}")
        return cls(p=p, covariance_kind=parts[3], propensity_kind=_REGIMES[parts[0]],
                   outcome_kind=_OUTCOMES[parts[1], parts[2]], **kwargs)

    @property
    def id(self) -> str:
        regime = "rct" if self.propensity_kind == "pi2_logistic" else "obs"
        sparsity = "sparse" if self.outcome_kind in ("mu1", "mu3") else "nonsparse"
        surface = "linear" if self.outcome_kind in ("mu1", "mu2") else "nonlinear"
        return f"{regime}-{sparsity}-{surface}-{self.covariance_kind}"

    @property
    def pi_known(self) -> bool:
        return self.propensity_kind == "pi2_logistic"

    @property
    def linear(self) -> bool:
        return self.outcome_kind in ("mu1", "mu2")

    @property
    def true_tems(self) -> np.ndarray:
        return np.flatnonzero(self.delta)

    @property
    def relevant_dim(self) -> int:
        """Number of leading coordinates the outcome surface depends on."""
        return int(max(np.flatnonzero(self.delta)[-1], np.flatnonzero(self.gamma)[-1])) + 1

    def covariance(self) -> CovarianceModel:
        return make_covariance(self.covariance_kind, self.p, self.block_seed)

    def mean_outcome(self, W: np.ndarray, a) -> np.ndarray:
        k = W.shape[1]
        g = W @ self.gamma[:k]
        s = W @ self.delta[:k]
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), g.shape)
        if self.linear:
            return a + g + s * a
        return g + 2.0 * np.arctan(s * a)

    def true_cate(self, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        s = W @ self.delta[: W.shape[1]]
        return 1.0 + s if self.linear else 2.0 * np.arctan(s)

    def propensity(self, W: np.ndarray) -> np.ndarray:
        return propensity(self.propensity_kind, W)


def all_dgp_ids() -> list[str]:
    return [f"{r}-{s}-{f}-{c}" for r in ("rct", "obs") for s in ("sparse", "nonsparse")
            for f in ("linear", "nonlinear") for c in ("identity", "block")]


def true_cate(spec: DgpSpec, w_row) -> float:
    """CATE at a single covariate row.

    >>> true_cate(DgpSpec(p=50), np.zeros(50))
    1.0
    """
    return float(spec.true_cate(np.asarray(w_row, dtype=np.float64)[None, :])[0])


def _stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def sample_dataset(spec: DgpSpec, n: int, seed: int, with_potential_outcomes: bool = False,
                   covariance: CovarianceModel | None = None) -> Dataset:
    """Draw ``n`` observations; a fixed ``seed`` gives bit-identical output.

    The stream draws, in order, the n x p covariate normals, n uniforms for
    treatment and n x 2 outcome-noise normals.
    """
    if n < 1:
        raise DgpError("n must be >= 1")
    cov = covariance or spec.covariance()
    rng = _stream(seed)
    W = cov.transform(rng.standard_normal((n, spec.p)))
    pi = spec.propensity(W)
    A = (rng.random(n) < pi).astype(np.float64)
    noise = rng.standard_normal((n, 2)) * spec.noise_sd
    Y0 = spec.mean_outcome(W, 0.0) + noise[:, 0]
    Y1 = spec.mean_outcome(W, 1.0) + noise[:, 1]
    Y = np.where(A == 1, Y1, Y0)
    if with_potential_outcomes:
        return Dataset(W, A, Y, Y0, Y1, pi)
    return Dataset(W, A, Y, pi=pi)


def _cache_dir() -> Path:
    return Path(os.environ.get("ITR_BENCH_CACHE", Path.home() / ".cache" / "itr_bench"))


def rule_values(spec: DgpSpec, n_mc: int, seed: int, rules=("optimal", "treat", "control"),
                chunk: int = 100_000) -> dict:
    """Monte Carlo means and standard errors of mu(W, rule(W)).

    Outcome noise has mean zero and is omitted. Only the leading coordinates
    the surface depends on are simulated.
    """
    k = spec.relevant_dim
    sub = spec.covariance().leading(k)
    L = np.linalg.cholesky(sub)
    rng = _stream(seed)
    sums = {r: 0.0 for r in rules}
    sq = {r: 0.0 for r in rules}
    done = 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        W = rng.standard_normal((m, k)) @ L.T
        for r in rules:
            if r == "optimal":
                a = (spec.true_cate(W) > 0).astype(np.float64)
            elif r == "treat":
                a = 1.0
            elif r == "control":
                a = 0.0
            else:
                raise DgpError(f"unknown rule {r!r}")
            v = spec.mean_outcome(W, a)
            sums[r] += float(v.sum())
            sq[r] += float((v * v).sum())
        done += m
    out = {}
    for r in rules:
        mean = sums[r] / n_mc
        var = max(sq[r] / n_mc - mean * mean, 0.0) * n_mc / max(n_mc - 1, 1)
        out[r] = (mean, float(np.sqrt(var / n_mc)))
    return out


def monte_carlo_optimal_value(spec: DgpSpec, n_mc: int = 1_000_000, seed: int | None = None,
                              use_cache: bool = True) -> tuple[float, float]:
    """Value of the true optimal rule I(CATE > 0) and its Monte Carlo SE.

    Results are cached on disk under ``$ITR_BENCH_CACHE`` (default
    ``~/.cache/itr_bench``) keyed by the DGP, ``n_mc`` and ``seed``.
    """
    if n_mc < 1000:
        raise DgpError("n_mc must be >= 1000")
    if seed is None:
        seed = derive_seed(0, "mc-optimal", spec.id)
    key = hashlib.sha1(f"{spec.id}|{spec.p}|{spec.block_seed}|{n_mc}|{seed}".encode()).hexdigest()[:16]
    path = _cache_dir() / f"optval-{key}.npy"
    if use_cache and path.exists():
        v = np.load(path)
        return float(v[0]), float(v[1])
    value, se = rule_values(spec, n_mc, seed, rules=("optimal",))["optimal"]
    if use_cache:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".{os.getpid()}.tmp.npy")
            np.save(tmp, np.array([value, se]))
            os.replace(tmp, path)
        except OSError:
            pass
    return value, se


# ---------------------------------------------------------------------------
# export / import


def _columns(p, with_po):
    cols = [f"W{j + 1}" for j in range(p)] + ["A", "Y"]
    return cols + (["Y0", "Y1"] if with_po else [])


def write_csv(data: Dataset, path) -> None:
    po = data.has_potential_outcomes
    parts = [data.W, data.A[:, None], data.Y[:, None]]
    if po:
        parts += [data.Y0[:, None], data.Y1[:, None]]
    np.savetxt(path, np.hstack(parts), delimiter=",", fmt="%.17g",
               header=",".join(_columns(data.p, po)), comments="")


def read_csv(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    idx = {c: i for i, c in enumerate(header)}
    if "A" not in idx or "Y" not in idx:
        raise DgpError("CSV needs A and Y columns")
    wcols = [i for c, i in idx.items() if c.startswith("W") and c[1:].isdigit()]
    if not wcols:
        raise DgpError("CSV has no W columns")
    get = (lambda c: arr[:, idx[c]] if c in idx else None)
    return Dataset(arr[:, wcols], get("A"), get("Y"), get("Y0"), get("Y1"), get("pi"))


def save_npz(data: Dataset, path) -> None:
    fields = {k: getattr(data, k) for k in ("W", "A", "Y", "Y0", "Y1", "pi") if getattr(data, k) is not None}
    np.savez_compressed(path, **fields)


def load_npz(path) -> Dataset:
    with np.load(path) as z:
        return Dataset(**{k: z[k] for k in z.files})
