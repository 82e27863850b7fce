"""Run configuration: one TOML file fully determines a run.

Sections map onto the component configs ([codec], [model], [schedule],
[decode], [gen], [run]); every field is defaulted, unknown keys are
rejected. A single master seed fans out to the per-component seeds so a run
is reproducible from the config file plus ``--seed`` alone.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .inference import DecodeParams
from .model import ModelConfig
from .toycodec import CodecSpec, vocab_for_codec
from .training import TrainSchedule
from .vocab import JointVocab

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_utts: int = 2400
    len_min: int = 3
    len_max: int = 12
    long_form_frac: float = 0.0
    splice_target_len: int = 120

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunSettings:
    text_fraction: float = 0.5
    text_size: int = 32
    log_every: int = 10
    save_every: int = 0  # 0: only the final checkpoint
    eval_max_items: int = 120

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    codec: CodecSpec = field(default_factory=CodecSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    decode: DecodeParams = field(default_factory=DecodeParams)
    gen: GenConfig = field(default_factory=GenConfig)
    run: RunSettings = field(default_factory=RunSettings)
    seed: int = 0

    def vocab(self) -> JointVocab:
        return vocab_for_codec(self.codec, self.run.text_size)

    def with_seed(self, seed: int) -> "RunConfig":
        """Fan the master seed out to the seeded components."""
        cfg = RunConfig(
            codec=dataclasses.replace(self.codec, seed=seed),
            model=self.model,
            schedule=dataclasses.replace(self.schedule, seed=seed + 1),
            decode=dataclasses.replace(self.decode, seed=seed + 2),
            gen=self.gen,
            run=self.run,
            seed=seed,
        )
        return cfg

    def resolved(self) -> dict:
        return {
            "seed": self.seed,
            "codec": self.codec.to_dict(),
            "model": self.model.to_dict(),
            "schedule": self.schedule.to_dict(),
            "decode": dataclasses.asdict(self.decode),
            "gen": self.gen.to_dict(),
            "run": self.run.to_dict(),
        }


_SECTIONS = {
    "codec": CodecSpec,
    "model": ModelConfig,
    "schedule": TrainSchedule,
    "decode": DecodeParams,
    "gen": GenConfig,
    "run": RunSettings,
}


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a TOML run config; missing file -> FileNotFoundError, bad keys
    or values -> ConfigError."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e

    kwargs: dict = {}
    for key, value in data.items():
        if key == "seed":
            kwargs["seed"] = int(value)
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{key}]")
        cls = _SECTIONS[key]
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(value) - allowed
        if unknown:
            raise ConfigError(f"{path}: unknown keys in [{key}]: {sorted(unknown)}")
        try:
            kwargs[key] = cls(**value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: invalid [{key}]: {e}") from e
    return RunConfig(**kwargs)
