"""Declarative run configuration: one TOML file drives every command.

A run file holds named sections mirroring the module configs::

    seed = 7
    out_dir = "runs/exp1"

    [pretrain]
    lam = 0.5
    epochs = 30

    [finetune]
    task = "nc"
    proportion = 10

    [encoder]
    input_size = 32

    [augment]
    blur_prob = 0.5

    [split]
    fold = 0

    [actmap]
    thresholds = [0.3, 0.5, 0.7]

Every key is validated against its config dataclass and unknown keys are
rejected — a typo fails loudly instead of silently using a default.  The
top-level ``seed`` is the root of all randomness: sections that do not
pin their own ``seed`` inherit it.  Command-line flags override file
values, and the merged effective config is serialized (with a content
hash) next to every output so any artifact can be traced to its exact
settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .analysis import ActivationMapConfig
from .augment import AugmentSpec
from .data import SplitPlan
from .errors import ConfigError
from .finetune import FinetuneConfig
from .models import EncoderConfig
from .pretrain import PretrainConfig

_SECTION_TYPES = {
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "encoder": EncoderConfig,
    "augment": AugmentSpec,
    "split": SplitPlan,
    "actmap": ActivationMapConfig,
}
_TOP_LEVEL_KEYS = {"seed", "out_dir"}
_SEEDED_SECTIONS = ("pretrain", "finetune")


@dataclass(frozen=True)
class RunConfig:
    """Validated bundle of every module's configuration plus a root seed."""

    seed: int = 0
    out_dir: str = "runs"
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    split: SplitPlan = field(default_factory=SplitPlan)
    actmap: ActivationMapConfig = field(default_factory=ActivationMapConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            **{name: getattr(self, name).to_dict() for name in _SECTION_TYPES},
        }


def _merge_section(name: str, file_values: dict, overrides: dict) -> dict:
    merged = dict(file_values)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def build_run_config(file_values: dict | None = None,
                     overrides: dict | None = None) -> RunConfig:
    """Assemble a RunConfig from parsed file values and CLI overrides.

    ``file_values`` is the parsed TOML document; ``overrides`` maps section
    name -> {key: value} (None values are ignored, so unset flags never
    mask file settings).  Top-level overrides live under the ``""`` key.
    Unknown sections or keys raise ConfigError.
    """
    file_values = dict(file_values or {})
    overrides = overrides or {}

    unknown_sections = set(file_values) - set(_SECTION_TYPES) - _TOP_LEVEL_KEYS
    if unknown_sections:
        raise ConfigError(
            f"unknown config sections/keys: {sorted(unknown_sections)} "
            f"(expected sections {sorted(_SECTION_TYPES)} and keys "
            f"{sorted(_TOP_LEVEL_KEYS)})")
    for name in _SECTION_TYPES:
        section = file_values.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section [{name}] must be a table, "
                              f"got {type(section).__name__}")

    top_over = overrides.get("", {})
    seed = top_over.get("seed")
    if seed is None:
        seed = file_values.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    out_dir = top_over.get("out_dir") or file_values.get("out_dir", "runs")

    sections = {}
    for name, cfg_type in _SECTION_TYPES.items():
        values = _merge_section(name, file_values.get(name, {}),
                                overrides.get(name, {}))
        if name in _SEEDED_SECTIONS:
            values.setdefault("seed", seed)
        try:
            sections[name] = cfg_type.from_dict(values)
        except ConfigError as exc:
            raise ConfigError(f"config section [{name}]: {exc}") from None
        except TypeError as exc:
            raise ConfigError(f"config section [{name}]: {exc}") from None
    return RunConfig(seed=seed, out_dir=str(out_dir), **sections)


def load_run_config(path: str | Path | None,
                    overrides: dict | None = None) -> RunConfig:
    """Parse a TOML run file (None → defaults) and apply CLI overrides."""
    file_values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                file_values = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid TOML: {exc}") from None
    return build_run_config(file_values, overrides)


def config_json(config: RunConfig) -> str:
    """Canonical JSON form of the effective config (stable key order)."""
    return json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n"


def config_hash(config: RunConfig) -> str:
    """Content hash identifying the exact effective configuration."""
    blob = json.dumps(config.to_dict(), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_effective_config(config: RunConfig, artifact_path: str | Path) -> Path:
    """Store the merged config next to an output artifact.

    For an artifact ``X`` the config lands at ``X.config.json`` holding the
    full effective settings and their hash.
    """
    artifact_path = Path(artifact_path)
    out = artifact_path.with_name(artifact_path.name + ".config.json")
    payload = {"config": config.to_dict(), "config_hash": config_hash(config)}
    out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                   encoding="utf-8")
    return out
