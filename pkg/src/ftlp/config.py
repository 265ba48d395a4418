"""TOML experiment configuration.

Sections and keys (every key optional, defaults below)::

    [data]       seed, source_p, target_p, n_per_env, target_n,
                 corpus_envs, corpus_per_env, corpus_k, corpus_p
    [model]      hidden, activation
    [train]      learning_rate, encoder_lr_multiplier, batch_size, steps, optimizer,
                 pretrain_steps, pretrain_learning_rate
    [objective]  kind, penalty_weight, kernel_bandwidth, mixup_alpha
    [penalty]    gamma, variant, encoder_mode, logvar_min, logvar_max
    [bounds]     beta, sigma, theorem, dist_kind, n_samples, dist_draws, dist_pairs,
                 split_fraction, n_splits, posterior_variance,
                 prop1_resamples, prop1_instances, prop2_instances, prop3_triples
    [sweep]      exponents, gammas, holdout_fraction
    [output]     dir, formats

Unknown sections or keys are rejected with the offending line number.
"""
from __future__ import annotations

import copy
import re
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .dg_objectives import DGObjectiveSpec
from .model import Architecture
from .pac_bayes import DIST_KINDS, BoundConfig, MCConfig
from .trainer import GAMMA_EXPONENTS, TrainConfig

DEFAULTS: dict[str, dict] = {
    "data": {
        "seed": 0, "source_p": [0.1, 0.2], "target_p": 0.9, "n_per_env": 200, "target_n": 1000,
        "corpus_envs": 20, "corpus_per_env": 100, "corpus_k": 3.0, "corpus_p": [],
    },
    "model": {"hidden": [1], "activation": "tanh"},
    "train": {
        "learning_rate": 0.05, "encoder_lr_multiplier": 10.0, "batch_size": 32, "steps": 300,
        "optimizer": "adam", "pretrain_steps": 1000, "pretrain_learning_rate": 0.05,
    },
    "objective": {"kind": "ERM", "penalty_weight": -1.0, "kernel_bandwidth": 0.0,
                  "mixup_alpha": 0.0},
    "penalty": {"gamma": 0.0, "variant": "truncated", "encoder_mode": "elementwise",
                "logvar_min": -10.0, "logvar_max": 4.0},
    "bounds": {
        "beta": 0.5, "sigma": 0.05, "theorem": 1, "dist_kind": "variation", "n_samples": 200,
        "dist_draws": 20, "dist_pairs": 20, "split_fraction": 0.5, "n_splits": 3,
        "posterior_variance": 0.01, "prop1_resamples": 2, "prop1_instances": 5,
        "prop2_instances": 100, "prop3_triples": 500,
    },
    "sweep": {"exponents": list(GAMMA_EXPONENTS), "gammas": [], "holdout_fraction": 0.2},
    "output": {"dir": "", "formats": ["csv", "json"]},
}


class ConfigError(Exception):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        super().__init__(message)
        self.key, self.line = key, line

    def to_dict(self) -> dict:
        return {"error": "config", "message": str(self), "key": self.key, "line": self.line}


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return no
    return None


def _coerce(section: str, key: str, value, default, text: str):
    line = _line_of(text, section, key)
    where = f"[{section}].{key}"
    if isinstance(default, bool) or isinstance(value, bool):
        if not isinstance(value, bool) or not isinstance(default, bool):
            raise ConfigError(f"{where}: expected {type(default).__name__}", where, line)
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number", where, line)
        return float(value)
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer", where, line)
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string", where, line)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list", where, line)
        return value
    return value


class ExperimentConfig:
    """Resolved configuration: defaults overlaid with a TOML document."""

    def __init__(self, sections: dict | None = None):
        self.sections = copy.deepcopy(DEFAULTS)
        for sec, values in (sections or {}).items():
            self.sections[sec].update(values)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            m = re.search(r"line (\d+)", str(exc))
            raise ConfigError(f"malformed TOML: {exc}", None, int(m.group(1)) if m else None)
        resolved = {}
        for sec, values in doc.items():
            if sec not in DEFAULTS:
                raise ConfigError(f"unknown section [{sec}]", sec, _line_of(text, sec))
            if not isinstance(values, dict):
                raise ConfigError(f"[{sec}] must be a table", sec, _line_of(text, sec))
            resolved[sec] = {}
            for key, value in values.items():
                if key not in DEFAULTS[sec]:
                    raise ConfigError(f"unknown key [{sec}].{key}", f"[{sec}].{key}",
                                      _line_of(text, sec, key))
                resolved[sec][key] = _coerce(sec, key, value, DEFAULTS[sec][key], text)
        cfg = cls(resolved)
        cfg.validate(text)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def validate(self, text: str = ""):
        """Build every derived object once so bad values fail at load time."""
        checks = [("train", self.train_config), ("model", self.arch),
                  ("bounds", self.bound_config), ("objective", self.objective)]
        for sec, build in checks:
            try:
                build()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{sec}]: {exc}", sec, _line_of(text, sec)) from None
        rules = [
            ("bounds", "theorem", lambda v: v in (1, 2, 3), "must be 1, 2 or 3"),
            ("bounds", "dist_kind", lambda v: v in DIST_KINDS, f"must be one of {DIST_KINDS}"),
            ("bounds", "split_fraction", lambda v: 0 < v < 1, "must lie in (0, 1)"),
            ("bounds", "posterior_variance", lambda v: v > 0, "must be positive"),
            ("sweep", "holdout_fraction", lambda v: 0 < v < 1, "must lie in (0, 1)"),
            ("sweep", "gammas", lambda v: all(isinstance(g, (int, float)) and g >= 0 for g in v),
             "must hold non-negative numbers"),
            ("data", "source_p", lambda v: len(v) >= 1 and all(0 <= p <= 1 for p in v),
             "must hold at least one probability"),
            ("output", "formats", lambda v: set(v) <= {"csv", "json"} and len(v) > 0,
             "must be a non-empty subset of ['csv', 'json']"),
        ]
        for sec, key, ok, what in rules:
            if not ok(self[sec][key]):
                raise ConfigError(f"[{sec}].{key} {what}", f"[{sec}].{key}",
                                  _line_of(text, sec, key))

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def override_seed(self, seed: int):
        self.sections["data"]["seed"] = seed

    def to_toml(self) -> str:
        return tomli_w.dumps(self.sections)

    def objective(self) -> DGObjectiveSpec:
        o = self["objective"]
        kw = {"kind": o["kind"]}
        if o["penalty_weight"] >= 0:
            kw["penalty_weight"] = o["penalty_weight"]
        if o["kernel_bandwidth"] > 0:
            kw["kernel_bandwidth"] = o["kernel_bandwidth"]
        if o["mixup_alpha"] > 0:
            kw["mixup_alpha"] = o["mixup_alpha"]
        return DGObjectiveSpec(**kw)

    def arch(self) -> Architecture:
        m = self["model"]
        return Architecture.mlp([2, *m["hidden"], 2], m["activation"])

    def train_config(self) -> TrainConfig:
        t, p = self["train"], self["penalty"]
        return TrainConfig(
            learning_rate=t["learning_rate"], encoder_lr_multiplier=t["encoder_lr_multiplier"],
            batch_size=t["batch_size"], steps=t["steps"], gamma=p["gamma"],
            seed=self["data"]["seed"], optimizer=t["optimizer"], objective=self.objective(),
            penalty_variant=p["variant"], encoder_mode=p["encoder_mode"],
            logvar_min=p["logvar_min"], logvar_max=p["logvar_max"])

    def pretrain_config(self) -> TrainConfig:
        t = self["train"]
        return TrainConfig(learning_rate=t["pretrain_learning_rate"], batch_size=64,
                           steps=t["pretrain_steps"], seed=self["data"]["seed"],
                           optimizer=t["optimizer"], encoder_mode=self["penalty"]["encoder_mode"],
                           logvar_min=self["penalty"]["logvar_min"],
                           logvar_max=self["penalty"]["logvar_max"])

    def bound_config(self, m: int = 1) -> BoundConfig:
        b = self["bounds"]
        return BoundConfig(b["beta"], b["sigma"], m)

    def mc_config(self) -> MCConfig:
        b = self["bounds"]
        return MCConfig(b["n_samples"], b["dist_draws"], b["dist_pairs"], self["data"]["seed"])

    def corpus_p(self) -> list[float]:
        d = self["data"]
        return list(d["corpus_p"]) or list(np.linspace(0.0, 1.0, d["corpus_envs"]))

    def gammas(self) -> list[float] | None:
        return [float(g) for g in self["sweep"]["gammas"]] or None
