"""Experiment configuration files.

Configs are INI files read with :mod:`configparser`. Every key is optional;
lists are comma separated. Example::

    [experiment]
    dgps = rct-sparse-linear-identity, obs-sparse-linear-identity
    sample_sizes = 250, 500, 1000
    test_size = 100
    replicates = 100
    estimators = plugin_lasso, aipw_lasso, causal_forest
    filter_states = unfiltered, filtered
    master_seed = 1
    timing_mode = serial
    p = 500
    n_mc = 1000000
    output_dir = results

    [nuisance]
    pi_floor = 0.01
    cross_fit_folds = 5
    cv_folds = 10
    sl_folds = 10
    sl_forest_trees = 200
    sl_boost_rounds = 100

    [strategy]
    forest_trees = 500
    nuisance_trees = 500
    boost_rounds = 200
    boost_depth = 3
    boost_learning_rate = 0.1

    [filter]
    fdr_level = 0.05

``ITR_BENCH_SEED`` in the environment overrides ``master_seed``.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace

from .cate import EXTRA_STRATEGIES, STRATEGIES, StrategySettings
from .dgp import DgpSpec, all_dgp_ids
from .nuisance import NuisanceConfig

SEED_ENV = "ITR_BENCH_SEED"
PROFILES = {
    "desk": {"replicates": 20, "n_mc": 100_000},
    "paper": {"replicates": 100, "n_mc": 1_000_000, "sample_sizes": (250, 500, 1000), "p": 500,
              "test_size": 100, "dgps": tuple(all_dgp_ids()), "estimators": tuple(STRATEGIES),
              "filter_states": (False, True)},
}
_FILTER_STATES = {"unfiltered": False, "filtered": True}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dgps: tuple = ("rct-sparse-linear-identity",)
    sample_sizes: tuple = (250, 500, 1000)
    test_size: int = 100
    replicates: int = 100
    estimators: tuple = tuple(STRATEGIES)
    filter_states: tuple = (False, True)
    master_seed: int = 0
    timing_mode: str = "serial"
    p: int = 500
    n_mc: int = 1_000_000
    fdr_level: float = 0.05
    output_dir: str = "results"
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    strategy: StrategySettings = field(default_factory=StrategySettings)

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.test_size < 1:
            raise ConfigError("test_size must be >= 1")
        if not self.sample_sizes or min(self.sample_sizes) < 2:
            raise ConfigError("sample sizes must be >= 2")
        if self.timing_mode not in ("serial", "parallel"):
            raise ConfigError("timing_mode must be serial or parallel")
        if not self.filter_states:
            raise ConfigError("at least one filter state is required")
        known = {**STRATEGIES, **EXTRA_STRATEGIES}
        for e in self.estimators:
            if e not in known:
                raise ConfigError(f"unknown estimator {e!r}")
        for d in self.dgps:
            try:
                DgpSpec.from_id(d, p=self.p)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

    def with_profile(self, profile: str | None) -> "ExperimentConfig":
        if profile is None:
            return self
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        return replace(self, **PROFILES[profile])

    def with_env(self, environ=None) -> "ExperimentConfig":
        environ = os.environ if environ is None else environ
        raw = environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            return replace(self, master_seed=int(raw))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def _list(raw: str) -> list[str]:
    return [x.strip() for x in raw.replace("\n", ",").split(",") if x.strip()]


def _ints(raw: str) -> tuple:
    try:
        return tuple(int(x) for x in _list(raw))
    except ValueError as exc:
        raise ConfigError(f"expected integers, got {raw!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    allowed = {"experiment", "nuisance", "strategy", "filter"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    kw = {}
    if cp.has_section("experiment"):
        ex = cp["experiment"]
        handlers = {
            "dgps": lambda v: tuple(_list(v)),
            "sample_sizes": _ints,
            "test_size": int,
            "replicates": int,
            "estimators": lambda v: tuple(_list(v)),
            "filter_states": lambda v: tuple(_FILTER_STATES[s] for s in _list(v)),
            "master_seed": int,
            "timing_mode": str.strip,
            "p": int,
            "n_mc": int,
            "output_dir": str.strip,
        }
        for key, value in ex.items():
            if key not in handlers:
                raise ConfigError(f"unknown key experiment.{key}")
            try:
                kw[key] = handlers[key](value)
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad value for experiment.{key}: {value!r}") from exc
    if cp.has_section("filter"):
        for key, value in cp["filter"].items():
            if key != "fdr_level":
                raise ConfigError(f"unknown key filter.{key}")
            kw["fdr_level"] = float(value)
    if cp.has_section("nuisance"):
        types = {"pi_floor": float, "cross_fit_folds": int, "cv_folds": int, "sl_folds": int,
                 "sl_forest_trees": int, "sl_boost_rounds": int}
        nk = {}
        for key, value in cp["nuisance"].items():
            if key not in types:
                raise ConfigError(f"unknown key nuisance.{key}")
            nk[key] = types[key](value)
        kw["nuisance"] = NuisanceConfig(**nk)
    if cp.has_section("strategy"):
        sk, boost = {}, {}
        boost_keys = {"boost_rounds": ("n_rounds", int), "boost_depth": ("max_depth", int),
                      "boost_learning_rate": ("learning_rate", float)}
        for key, value in cp["strategy"].items():
            if key in boost_keys:
                name, typ = boost_keys[key]
                boost[name] = typ(value)
            elif key in ("forest_trees", "nuisance_trees", "cv_folds", "cross_fit_folds"):
                sk[key] = int(value)
            else:
                raise ConfigError(f"unknown key strategy.{key}")
        kw["strategy"] = StrategySettings(boost_params=boost, **sk)
    return ExperimentConfig(**kw)


def load_config(path, profile: str | None = None, environ=None) -> ExperimentConfig:
    with open(path) as fh:
        cfg = parse_config(fh.read())
    return cfg.with_profile(profile).with_env(environ)
