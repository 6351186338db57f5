"""Experiment configuration: a flat YAML key set with per-scenario defaults.

Every key is optional; unknown keys are rejected. Values given on the command
line (``--set key=value``) override the file.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, List, Optional, Tuple

import yaml

SCENARIOS = ("erasure", "compression", "awgn2", "early_exit", "heterogeneous")

P_GRID = [round(0.1 * i, 1) for i in range(10)]
SNR_GRID = [float(s) for s in range(-10, 11)]

# defaults that differ per scenario; anything absent here is shared
SCENARIO_DEFAULTS = {
    "erasure": {"p_tr_grid": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]},
    "compression": {"p_tr_grid": [0.1], "m_grid": [4, 7, 10]},
    "awgn2": {},
    "early_exit": {"p_tr_grid": [0.1], "lam_grid": [0.1, 0.5, 0.9]},
    "heterogeneous": {"p_tr_grid": [0.0, 0.1, 0.5]},
}


class ConfigError(ValueError):
    """Invalid configuration value; the message names the key, the value and what is allowed."""


@dataclass
class ExperimentConfig:
    scenario: str = "erasure"
    # dataset
    dataset: str = "synth"
    synth_kind: str = "ar1"
    synth_length: int = 4000
    synth_seed: int = 0
    csv_path: Optional[str] = None
    csv_column: Optional[str] = None
    csv_delimiter: str = ","
    split: List[float] = field(default_factory=lambda: [0.6, 0.1, 0.3])
    val_from_train: float = 0.1
    # architecture
    window: int = 30
    M: int = 10
    m_grid: List[int] = field(default_factory=lambda: [4, 7, 10])
    edge_layers: int = 1
    server_layers: int = 3
    het_edge_layers: List[int] = field(default_factory=lambda: [1, 2])
    # channel grids
    p_tr_grid: List[float] = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    p_grid: List[float] = field(default_factory=lambda: list(P_GRID))
    snr_train_grid: List[float] = field(default_factory=lambda: [-5.0, 0.0, 5.0, 10.0])
    m1: int = 5
    m2: Optional[int] = None
    m1_grid: List[int] = field(default_factory=lambda: [3, 5, 7])
    m1_sweep_snr: float = -5.0
    fade_offset_db: float = 5.0
    snr_grid: List[float] = field(default_factory=lambda: list(SNR_GRID))
    # early exit
    lam: float = 0.5
    lam_grid: List[float] = field(default_factory=lambda: [0.1, 0.5, 0.9])
    mode_threshold: Optional[float] = None
    # training
    seeds: List[int] = field(default_factory=lambda: [1, 2, 3])
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    clip_norm: Optional[float] = None
    # evaluation and output
    repeats: int = 10
    report_domain: str = "normalized"
    out_dir: str = "results"
    format: str = "csv"
    save_checkpoints: bool = False
    record_timing: bool = False
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 over the canonical JSON of every setting except output location."""
        d = self.to_dict()
        for k in ("out_dir", "workers"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _fail(key: str, value: Any, allowed: str) -> ConfigError:
    return ConfigError(f"invalid value for {key!r}: {value!r} (allowed: {allowed})")


def _scalar(kind: str, value: Any) -> Any:
    if kind == "bool":
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError
        if not isinstance(value, (bool, int)):
            raise ValueError
        return bool(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ValueError
        return value
    if isinstance(value, bool):
        raise ValueError
    if kind == "int":
        f = float(value)
        if f != int(f):
            raise ValueError
        return int(f)
    return float(value)


def _coerce(key: str, value: Any) -> Any:
    ftype = str(_FIELDS[key].type)
    if ftype.startswith("Optional["):
        if value is None:
            return None
        ftype = ftype[len("Optional["):-1]
    elif value is None:
        raise _fail(key, value, "a non-null value")
    try:
        if ftype.startswith("List["):
            if isinstance(value, str):
                value = yaml.safe_load(value)
            if not isinstance(value, (list, tuple)):
                value = [value]
            return [_scalar(ftype[5:-1], v) for v in value]
        return _scalar(ftype, value)
    except (TypeError, ValueError, OverflowError):
        raise _fail(key, value, f"type {ftype}") from None


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(cond, key, allowed):
        if not cond:
            raise _fail(key, getattr(cfg, key), allowed)

    need(cfg.scenario in SCENARIOS, "scenario", f"one of {list(SCENARIOS)}")
    need(cfg.dataset in ("synth", "csv"), "dataset", "'synth' or 'csv'")
    need(cfg.synth_kind in ("ar1", "sine_noise"), "synth_kind", "'ar1' or 'sine_noise'")
    need(cfg.synth_length > cfg.window + 1, "synth_length", f"> window + 1 = {cfg.window + 1}")
    if cfg.dataset == "csv":
        need(bool(cfg.csv_path), "csv_path", "a file path when dataset is 'csv'")
        need(bool(cfg.csv_column), "csv_column", "a column name when dataset is 'csv'")
    need(len(cfg.split) in (2, 3) and all(f >= 0 for f in cfg.split)
         and math.isclose(sum(cfg.split), 1.0, abs_tol=1e-9),
         "split", "2 or 3 nonnegative fractions summing to 1")
    need(0.0 <= cfg.val_from_train < 1.0, "val_from_train", "[0, 1)")
    need(cfg.window >= 1, "window", ">= 1")
    need(cfg.M >= 1, "M", ">= 1")
    need(cfg.m_grid and all(m >= 1 for m in cfg.m_grid), "m_grid", "nonempty list of positive ints")
    need(cfg.edge_layers >= 1, "edge_layers", ">= 1")
    need(cfg.server_layers >= 1, "server_layers", ">= 1")
    need(cfg.het_edge_layers and all(n >= 1 for n in cfg.het_edge_layers), "het_edge_layers",
         "nonempty list of positive ints")
    for key in ("p_tr_grid", "p_grid"):
        need(getattr(cfg, key) and all(0.0 <= p <= 1.0 for p in getattr(cfg, key)), key,
             "nonempty list of probabilities in [0, 1]")
    for key in ("snr_train_grid", "snr_grid"):
        need(getattr(cfg, key) and all(math.isfinite(s) for s in getattr(cfg, key)), key,
             "nonempty list of finite dB values")
    # an explicit m2 must agree with m1 whatever the scenario
    if cfg.m2 is not None and cfg.m1 + cfg.m2 != cfg.M:
        raise ConfigError(
            f"invalid values for 'm1'/'m2': m1={cfg.m1} + m2={cfg.m2} != M={cfg.M} (allowed: m1 + m2 == M)"
        )
    if cfg.scenario == "awgn2":
        need(0 <= cfg.m1 <= cfg.M, "m1", f"0..M (M={cfg.M}); m2 = M - m1 so m1 + m2 = M")
        need(cfg.m1_grid and all(0 <= m <= cfg.M for m in cfg.m1_grid), "m1_grid",
             f"nonempty list in 0..M (M={cfg.M}) so that m1 + m2 = M")
    need(cfg.fade_offset_db >= 0, "fade_offset_db", ">= 0")
    need(0.0 <= cfg.lam <= 1.0, "lam", "[0, 1]")
    need(cfg.lam_grid and all(0.0 <= v <= 1.0 for v in cfg.lam_grid), "lam_grid",
         "nonempty list in [0, 1]")
    need(bool(cfg.seeds), "seeds", "a nonempty list of ints")
    need(cfg.batch_size >= 1, "batch_size", ">= 1")
    if cfg.scenario == "heterogeneous":
        need(cfg.batch_size >= len(cfg.het_edge_layers), "batch_size", ">= number of devices")
    need(cfg.lr > 0, "lr", "> 0")
    need(0 <= cfg.beta1 < 1, "beta1", "[0, 1)")
    need(0 <= cfg.beta2 < 1, "beta2", "[0, 1)")
    need(cfg.eps > 0, "eps", "> 0")
    need(cfg.max_epochs >= 1, "max_epochs", ">= 1")
    need(cfg.patience >= 1, "patience", ">= 1")
    need(cfg.clip_norm is None or cfg.clip_norm > 0, "clip_norm", "null or > 0")
    need(cfg.repeats >= 1, "repeats", ">= 1")
    need(cfg.report_domain in ("normalized", "raw"), "report_domain", "'normalized' or 'raw'")
    need(cfg.format in ("csv", "json"), "format", "'csv' or 'json'")
    need(cfg.workers >= 1, "workers", ">= 1")
    return cfg


def parse_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                 scenario: Optional[str] = None) -> ExperimentConfig:
    """Load a flat YAML mapping, apply scenario defaults and overrides, validate."""
    raw: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping of keys to values")
        raw.update(loaded)
    raw.update(overrides or {})
    if scenario is not None:
        raw["scenario"] = scenario
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}; known keys: {sorted(_FIELDS)}")
    scen = raw.get("scenario", "erasure")
    if scen not in SCENARIOS:
        raise _fail("scenario", scen, f"one of {list(SCENARIOS)}")
    merged = {**SCENARIO_DEFAULTS[scen], **raw}
    values = {k: _coerce(k, v) for k, v in merged.items()}
    return validate(ExperimentConfig(**values))


def parse_override(item: str) -> Tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, value = item.split("=", 1)
    return key.strip(), yaml.safe_load(value)
