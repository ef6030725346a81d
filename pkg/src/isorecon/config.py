"""Run configuration: a YAML document with fixed sections, validated up front.

Schema (all keys optional; defaults shown by ``isorecon show-config``)::

    data:     input, checkpoint, output_dir, gt, format
    operator: kind, f, sigma, method          # degradation assumed at reconstruction
    simulate: sigma, f                         # true PSF for synthetic anisotropy
    steps:    T, s, R, encode_steps, decode_steps, first_slice_steps, chain
    train:    lr, batch, steps, crop, count, seed, ema_decay, log_every
    model:    base_channels, channel_multipliers, attention_resolutions,
              time_embed_dim, num_res_blocks, sigma_data
    eval:     metrics, external, peak
    axes:     x | y | both
    seed:     sampling seed
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .degrade import KINDS, METHODS
from .model import DenoiserConfig, TrainConfig
from .sampler import StepPlan

DEFAULTS: dict[str, Any] = {
    "data": {"input": None, "checkpoint": None, "output_dir": "out", "gt": None, "format": None},
    "operator": {"kind": "interpolation", "f": 8, "sigma": None, "method": "linear"},
    "simulate": {"sigma": 4.0, "f": None},
    "steps": {"T": 1000, "s": 0.008, "R": 200, "encode_steps": 4, "decode_steps": 50,
              "first_slice_steps": None, "chain": True},
    "train": {"lr": 2e-5, "batch": 4, "steps": 100_000, "crop": 256, "count": 4096, "seed": 0,
              "ema_decay": 0.9999, "log_every": 100},
    "model": {"base_channels": 64, "channel_multipliers": [1, 2, 2, 4], "attention_resolutions": [2, 3],
              "time_embed_dim": 256, "num_res_blocks": 2, "sigma_data": 0.5},
    "eval": {"metrics": ["psnr", "ms_ssim"], "external": None, "peak": None},
    "axes": "both",
    "seed": 0,
}

METRICS = ("psnr", "ms_ssim")


class ConfigError(Exception):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _merge(base: dict, override: dict, prefix: str, errors: list[str]) -> None:
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            errors.append(f"unknown key '{name}'")
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                errors.append(f"'{name}' must be a mapping")
            else:
                _merge(base[key], value, name + ".", errors)
        else:
            base[key] = value


def parse_assignment(text: str) -> dict:
    """``a.b=c`` -> {'a': {'b': c}} with ``c`` parsed as YAML."""
    if "=" not in text:
        raise ConfigError([f"override '{text}' is not of the form key=value"])
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path: str | Path | None = None, overrides: list[dict] | None = None) -> dict:
    """Defaults <- config file <- overrides; unknown keys are collected and raised together."""
    cfg = copy.deepcopy(DEFAULTS)
    errors: list[str] = []
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file not found: {path}"])
        doc = yaml.safe_load(path.read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError([f"config file {path} must contain a mapping"])
        _merge(cfg, doc, "", errors)
    for ov in overrides or []:
        _merge(cfg, ov, "", errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def _positive_int(cfg: dict, section: str, key: str, errors: list[str], allow_none: bool = False) -> None:
    v = cfg[section][key]
    if v is None and allow_none:
        return
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        errors.append(f"{section}.{key} must be a positive integer, got {v!r}")


def validate(cfg: dict, command: str) -> list[str]:
    """Return every constraint violation relevant to ``command``."""
    errors: list[str] = []
    data = cfg["data"]

    def need_file(key: str, value) -> None:
        if not value:
            errors.append(f"missing required key '{key}'")
        elif not Path(value).exists():
            errors.append(f"'{key}' does not exist: {value}")

    if command in ("train", "simulate", "reconstruct", "evaluate", "pipeline"):
        need_file("data.input", data["input"])
    if command == "reconstruct":
        need_file("data.checkpoint", data["checkpoint"])
    if command in ("evaluate",):
        need_file("data.gt", data["gt"])
    if data["format"] not in (None, "tif", "tiff", "raw"):
        errors.append(f"data.format must be tif or raw, got {data['format']!r}")

    op = cfg["operator"]
    if op["kind"] not in KINDS:
        errors.append(f"operator.kind must be one of {KINDS}, got {op['kind']!r}")
    _positive_int(cfg, "operator", "f", errors)
    if op["method"] not in METHODS:
        errors.append(f"operator.method must be one of {METHODS}, got {op['method']!r}")
    sim_sigma = cfg["simulate"]["sigma"]
    if op["kind"] == "exact-psf":
        sigma = op["sigma"] if op["sigma"] is not None else sim_sigma
        if not isinstance(sigma, (int, float)) or sigma < 0:
            errors.append(f"operator.sigma must be a non-negative number for exact-psf, got {sigma!r}")
    if command in ("simulate", "pipeline"):
        if not isinstance(sim_sigma, (int, float)) or sim_sigma < 0:
            errors.append(f"simulate.sigma must be a non-negative number, got {sim_sigma!r}")
        _positive_int(cfg, "simulate", "f", errors, allow_none=True)
        if cfg["simulate"]["f"] not in (None, op["f"]) and command == "pipeline":
            errors.append("simulate.f must equal operator.f in a pipeline run")

    st = cfg["steps"]
    try:
        plan_from(cfg)
    except (ValueError, TypeError) as exc:
        errors.append(f"steps: {exc}")
    if not isinstance(st["s"], (int, float)) or st["s"] <= 0:
        errors.append(f"steps.s must be positive, got {st['s']!r}")
    if not isinstance(st["chain"], bool):
        errors.append("steps.chain must be true or false")

    if command in ("train", "pipeline"):
        try:
            train_config_from(cfg)
        except (ValueError, TypeError) as exc:
            errors.append(f"train: {exc}")
        _positive_int(cfg, "train", "crop", errors)
        _positive_int(cfg, "train", "count", errors)
        try:
            denoiser_config_from(cfg)
        except (ValueError, TypeError) as exc:
            errors.append(f"model: {exc}")

    bad_metrics = [m for m in cfg["eval"]["metrics"] or [] if m not in METRICS]
    if bad_metrics:
        errors.append(f"eval.metrics entries must be in {METRICS}, got {bad_metrics}")
    if cfg["eval"]["external"] and not Path(cfg["eval"]["external"]).exists():
        errors.append(f"'eval.external' does not exist: {cfg['eval']['external']}")
    if cfg["axes"] not in ("x", "y", "both"):
        errors.append(f"axes must be x, y or both, got {cfg['axes']!r}")
    if not isinstance(cfg["seed"], int):
        errors.append(f"seed must be an integer, got {cfg['seed']!r}")
    return errors


def plan_from(cfg: dict) -> StepPlan:
    st = cfg["steps"]
    return StepPlan(T=st["T"], R=st["R"], encode_steps=st["encode_steps"], decode_steps=st["decode_steps"],
                    first_slice_steps=st["first_slice_steps"])


def train_config_from(cfg: dict) -> TrainConfig:
    tr = cfg["train"]
    return TrainConfig(lr=float(tr["lr"]), batch=tr["batch"], steps=tr["steps"], ema_decay=float(tr["ema_decay"]),
                       seed=tr["seed"], log_every=tr["log_every"])


def denoiser_config_from(cfg: dict) -> DenoiserConfig:
    m = cfg["model"]
    return DenoiserConfig(in_size=cfg["train"]["crop"], base_channels=m["base_channels"],
                          channel_multipliers=tuple(m["channel_multipliers"]),
                          attention_resolutions=tuple(m["attention_resolutions"]),
                          time_embed_dim=m["time_embed_dim"], num_res_blocks=m["num_res_blocks"],
                          sigma_data=m["sigma_data"])


def dump(cfg: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path
