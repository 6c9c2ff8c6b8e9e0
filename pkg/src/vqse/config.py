"""Experiment configuration: TOML file with sections, overridable by flags.

Precedence is flags > file > defaults. Every default lives in the dataclasses
below; ``configs/default.toml`` lists them with comments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .datagen import MixConfig, ToyCorpusSpec
from .dsp import ConfigurationError, StftConfig
from .enhancer import EnhancerConfig, SemiSupConfig, TrainMode
from .vqvae import VqVaeConfig, VqVaeTrainConfig


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    unpaired_manifest: str = ""
    paired_fraction: float = 1.0
    eval_mixtures: int = 50
    margin_mixtures: int = 16
    snr_grid: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0)


@dataclass(frozen=True)
class SweepConfig:
    fractions: tuple = (0.1, 0.2, 0.3, 0.4)
    modes: tuple = tuple(m.value for m in TrainMode)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    floor_epsilon: float = 1e-10
    stft: StftConfig = field(default_factory=StftConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    corpus: ToyCorpusSpec = field(default_factory=ToyCorpusSpec)
    vqvae: VqVaeConfig = field(default_factory=VqVaeConfig)
    vqvae_train: VqVaeTrainConfig = field(default_factory=VqVaeTrainConfig)
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    semisup: SemiSupConfig = field(default_factory=SemiSupConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self, require_manifest: bool = False) -> "ExperimentConfig":
        if not 0.0 < self.data.paired_fraction <= 1.0:
            raise ConfigurationError(f"paired_fraction must lie in (0, 1], got {self.data.paired_fraction}")
        if self.enhancer.n_bins != self.stft.n_bins:
            raise ConfigurationError(f"enhancer.n_bins ({self.enhancer.n_bins}) != STFT bins ({self.stft.n_bins})")
        for f in self.sweep.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigurationError(f"sweep fraction must lie in (0, 1], got {f}")
        for m in self.sweep.modes:
            TrainMode(m)
        if require_manifest and not self.data.manifest:
            raise ConfigurationError("no paired manifest configured (data.manifest)")
        for p in (self.data.manifest, self.data.unpaired_manifest):
            if p and not Path(p).is_file():
                raise ConfigurationError(f"manifest not found: {p!r}")
        return self

    def snapshot(self) -> dict:
        d = asdict(self)
        d["semisup"]["mode"] = self.semisup.mode.value
        return d


_SECTIONS = {
    "stft": StftConfig, "mix": MixConfig, "corpus": ToyCorpusSpec, "vqvae": VqVaeConfig,
    "vqvae_train": VqVaeTrainConfig, "enhancer": EnhancerConfig, "semisup": SemiSupConfig,
    "data": DataConfig, "sweep": SweepConfig,
}


def _build(cls, values: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"unknown keys for [{cls.__name__}]: {sorted(unknown)}")
    fixed = {}
    for k, v in values.items():
        fixed[k] = tuple(v) if isinstance(v, list) else v
    if cls is SemiSupConfig and "mode" in fixed:
        fixed["mode"] = TrainMode(fixed["mode"])
    return cls(**fixed)


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    top = {k: v for k, v in raw.items() if k not in _SECTIONS}
    unknown = set(top) - {"seed", "out_dir", "floor_epsilon"}
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
    sections = {name: _build(cls, raw.get(name, {})) for name, cls in _SECTIONS.items()}
    return ExperimentConfig(**top, **sections)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a TOML file (optional) and apply dotted-key overrides such as
    ``{"semisup.mode": "Baseline", "seed": 3}``."""
    raw: dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        base = Path(path).parent
        for key in ("manifest", "unpaired_manifest"):
            value = raw.get("data", {}).get(key)
            if value and not Path(value).is_absolute():
                raw["data"][key] = str((base / value).resolve())
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(raw)


def parse_assignment(text: str) -> tuple[str, Any]:
    """``"vqvae.beta=0.5"`` -> ``("vqvae.beta", 0.5)``; values use TOML syntax,
    falling back to a bare string."""
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"expected KEY=VALUE, got {text!r}")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key.strip(), parsed
