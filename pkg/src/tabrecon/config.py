"""Run configuration: one YAML file per run, a few keys overridable from flags."""

from __future__ import annotations

import copy
import zlib
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .mockdata import MockConfig
from .priors import HyperPriors
from .sampler import ChainConfig, ModelSpec

SECTIONS = {"seed", "threads", "paths", "model", "sampler", "mock", "diagnostics", "coverage"}
PATH_KEYS = {"hierarchy", "counts", "truth", "totals", "archive", "out"}
MODEL_KEYS = {"type", "focal_class", "sigma_err", "suppress_threshold", "hyper"}
DIAG_KEYS = {"n_replicates", "ppc_classes"}


def _check_keys(section: str, got: dict, allowed) -> None:
    extra = set(got) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(extra))}")


def _field_names(cls):
    return {f.name for f in fields(cls)}


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Parse and validate a config file; ``overrides`` replace top-level keys."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config: {exc}".replace("\n", " ")) from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    cfg = copy.deepcopy(raw)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key == "out":
            cfg.setdefault("paths", {})["out"] = val
        else:
            cfg[key] = val
    _check_keys("top level", cfg, SECTIONS)
    for name in ("paths", "model", "sampler", "mock", "diagnostics", "coverage"):
        if cfg.get(name) is None:
            cfg[name] = {}
        if not isinstance(cfg[name], dict):
            raise ConfigError(f"[{name}] must be a mapping")
    _check_keys("paths", cfg["paths"], PATH_KEYS)
    _check_keys("model", cfg["model"], MODEL_KEYS)
    _check_keys("sampler", cfg["sampler"], _field_names(ChainConfig) - {"rng_seed", "threads"})
    _check_keys("mock", cfg["mock"], _field_names(MockConfig) - {"rng_seed"})
    _check_keys("diagnostics", cfg["diagnostics"], DIAG_KEYS)
    _check_keys("coverage", cfg["coverage"], {"replicates"})
    try:
        cfg["seed"] = int(cfg.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError("seed must be an integer") from None
    if cfg["seed"] < 0 or cfg["seed"] >= 2 ** 64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    threads = cfg.get("threads")
    if threads is not None and (not isinstance(threads, int) or threads < 1):
        raise ConfigError("threads must be a positive integer")
    return cfg


def substream(seed: int, name: str) -> np.random.SeedSequence:
    """Named child stream of the root seed, stable across runs and stages."""
    return np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(name.encode())])


def stream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).generate_state(1, np.uint64)[0])


def model_spec(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    hyper = m.get("hyper") or {}
    try:
        hp = HyperPriors(**hyper)
    except TypeError as exc:
        raise ConfigError(f"bad [model.hyper]: {exc}") from None
    focal = int(m.get("focal_class", 1))
    if focal < 1:
        raise ConfigError("model.focal_class is 1-based and must be >= 1")
    sigma = float(m.get("sigma_err", 2.0))
    thr = int(m.get("suppress_threshold", 2))
    if sigma <= 0 or thr < 0:
        raise ConfigError("sigma_err must be > 0 and suppress_threshold >= 0")
    return ModelSpec(kind=m.get("type", "maxent"), focal_class=focal - 1, sigma_err=sigma,
                     suppress_threshold=thr, hyper=hp)


def chain_config(cfg: dict) -> ChainConfig:
    s = dict(cfg["sampler"])
    model = cfg["model"].get("type", "maxent")
    if model == "geostatistical":
        s.setdefault("gibbs_interval", 5)
    try:
        return ChainConfig(rng_seed=stream_seed(cfg["seed"], "fit"), threads=cfg.get("threads"), **s)
    except TypeError as exc:
        raise ConfigError(f"bad [sampler]: {exc}") from None


def mock_config(cfg: dict) -> MockConfig:
    m = dict(cfg["mock"])
    if "focal_class" in m:
        m["focal_class"] = int(m["focal_class"]) - 1
    try:
        return MockConfig(rng_seed=cfg["seed"], **m)
    except TypeError as exc:
        raise ConfigError(f"bad [mock]: {exc}") from None


def echo(cfg: dict) -> dict:
    """JSON-safe copy of the resolved config for manifests."""
    out = copy.deepcopy(cfg)
    out["resolved"] = {
        "model": asdict(model_spec(cfg)),
        "sampler": asdict(chain_config(cfg)),
    }
    return out
