"""Run configuration: one JSON document, strictly validated.

Sections map onto the library's dataclasses.  Any key the loader does not
know is an error, so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .audio import F0Config, SpectrogramConfig
from .blocks import BlockConfig
from .linguistic import SRAConfig
from .model import AblationFlags, ModelConfig
from .training import LossWeights, TrainConfig

PRESETS = ("default", "smoke")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProviderConfig:
    visual: str = "synthetic"       # synthetic | file
    phonemes: str = "transcript"    # transcript | file (the "phonemes" array in the visual-feature file)
    g2p_table: str | None = None    # None -> bundled toy table
    timbre: str = "stub"


@dataclass(frozen=True)
class UnitConfig:
    k: int = 200
    n_cepstra: int = 40             # cepstral features pooled to 50 Hz feed the k-means
    max_iter: int = 100


@dataclass(frozen=True)
class VocoderConfig:
    kind: str = "griffin_lim"
    iterations: int = 60


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    f0: F0Config = field(default_factory=F0Config)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    providers: ProviderConfig = field(default_factory=ProviderConfig)
    units: UnitConfig = field(default_factory=UnitConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.providers.visual not in ("synthetic", "file"):
            raise ConfigError(f"providers.visual must be 'synthetic' or 'file', got {self.providers.visual!r}")
        if self.providers.phonemes not in ("transcript", "file"):
            raise ConfigError(f"providers.phonemes must be 'transcript' or 'file', got {self.providers.phonemes!r}")
        if self.providers.timbre != "stub":
            raise ConfigError(f"providers.timbre must be 'stub', got {self.providers.timbre!r}")
        if self.vocoder.kind != "griffin_lim":
            raise ConfigError(f"vocoder.kind must be 'griffin_lim', got {self.vocoder.kind!r}")
        if self.model.n_mels != self.spectrogram.n_mels:
            raise ConfigError("model.n_mels must equal spectrogram.n_mels")
        if self.model.n_units != self.units.k:
            raise ConfigError("model.n_units must equal units.k")

    def train_config(self) -> TrainConfig:
        """Training settings with the run seed and ablation flags folded in."""
        return dataclasses.replace(self.train, seed=self.seed, flags=self.flags)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("seed", "flags"):
            d["train"].pop(k)
        d["train"]["betas"] = list(d["train"]["betas"])
        return d

    def feature_key(self) -> str:
        """Hash of every setting that changes cached features."""
        d = self.to_dict()
        relevant = {k: d[k] for k in ("spectrogram", "f0", "providers", "units")}
        relevant["visual_dim"] = self.model.visual_dim
        relevant["seed"] = self.seed
        blob = json.dumps(relevant, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{path}.{k}'.lstrip('.') for k in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        sub = f"{path}.{name}".lstrip(".")
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, sub)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{sub}: expected true/false, got {value!r}")
        elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    train = data.get("train", {})
    if isinstance(train, dict) and ({"seed", "flags"} & set(train)):
        raise ConfigError("train.seed and train.flags are not config keys; use the top-level seed and flags")
    return _build(RunConfig, data, "")


def load_config(path_or_preset: str | os.PathLike | None) -> RunConfig:
    """Load a JSON config file, or a bundled preset by name (``default``, ``smoke``)."""
    if path_or_preset is None:
        return RunConfig()
    name = os.fspath(path_or_preset)
    if name in PRESETS and not os.path.exists(name):
        text = resources.files("lip2speech").joinpath("data").joinpath(f"{name}.json").read_text(encoding="utf-8")
        source = f"preset {name}"
    else:
        try:
            text = Path(name).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {name}: {exc}") from exc
        source = name
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(path: str | os.PathLike, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def smoke_model_config() -> ModelConfig:
    """Narrow model used by the overfit smoke run (about 1M parameters)."""
    return ModelConfig(
        block=BlockConfig(hidden_dim=32, heads=2, conformer_layers=2, dropout=0.1),
        sra=SRAConfig(2, 1, 1),
        visual_dim=64, phoneme_dim=32, timbre_dim=64, mel_decoder_channels=32,
    )
