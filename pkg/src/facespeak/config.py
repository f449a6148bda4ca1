"""Run configuration: presets plus a single YAML file with flag overrides.

The "desk" preset is the minutes-scale configuration every test exercises; the
"paper" preset records the full-scale hyperparameters verbatim for reference
and is not exercised by the test suite.
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .codec import MelConfig, RVQTrainConfig
from .data import CorpusConfig
from .decoding import DecodeOptions
from .encoders import ContrastiveConfig
from .errors import ConfigError
from .speechlm import LMConfig, TrainLMConfig


@dataclass(frozen=True)
class RVQSpec:
    levels: int = 4
    size: int = 64
    train: RVQTrainConfig = field(default_factory=RVQTrainConfig)


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    mel: MelConfig = field(default_factory=MelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    rvq: RVQSpec = field(default_factory=RVQSpec)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    lm_train: TrainLMConfig = field(default_factory=TrainLMConfig)
    decode: DecodeOptions = field(default_factory=DecodeOptions)


def desk_config() -> RunConfig:
    return RunConfig()


def paper_config() -> RunConfig:
    """Full-scale hyperparameters, stored verbatim; not exercised by tests."""
    return RunConfig(
        preset="paper",
        rvq=RVQSpec(levels=9, size=1024),
        contrastive=ContrastiveConfig(tau_init=0.07, batch_size=256, lr=5e-5, steps=30_000),
        lm=LMConfig(
            layers=24, heads=16, d_model=1024, d_ff=4096,
            levels=9, codebook_size=1024, max_positions=4096,
        ),
        lm_train=TrainLMConfig(steps=500_000, batch_size=24, lr=5e-4, warmup=5000),
        decode=DecodeOptions(top_k=30, repetition_penalty=1.2, temperature=1.0),
    )


PRESETS = {"desk": desk_config, "paper": paper_config}

_SECTIONS = {
    "mel": MelConfig,
    "corpus": CorpusConfig,
    "rvq": RVQSpec,
    "contrastive": ContrastiveConfig,
    "lm": LMConfig,
    "lm_train": TrainLMConfig,
    "decode": DecodeOptions,
}


def _apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    updates = {}
    for section, values in overrides.items():
        if section == "preset":
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        current = getattr(cfg, section)
        valid = set(type(current).__dataclass_fields__)
        bad = set(values) - valid
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
        coerced = {}
        for k, v in values.items():
            existing = getattr(current, k)
            if dataclasses.is_dataclass(existing) and isinstance(v, dict):
                inner = {
                    ik: tuple(iv) if isinstance(iv, list) else iv for ik, iv in v.items()
                }
                bad_inner = set(inner) - set(type(existing).__dataclass_fields__)
                if bad_inner:
                    raise ConfigError(
                        f"unknown keys in {section}.{k}: {sorted(bad_inner)}"
                    )
                coerced[k] = replace(existing, **inner)
            elif isinstance(v, list):
                coerced[k] = tuple(v)
            else:
                coerced[k] = v
        updates[section] = replace(current, **coerced)
    return replace(cfg, **updates)


def load_run_config(path: Path | None = None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a YAML mapping")
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    cfg = _apply_overrides(cfg, raw)
    if overrides:
        cfg = _apply_overrides(cfg, overrides)
    return cfg


def dump_run_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(asdict(cfg), sort_keys=True)
