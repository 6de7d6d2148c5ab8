"""Run configuration and dataset splits for the command-line tools.

A config file is plain JSON whose keys are RunConfig field names; flags
passed on the command line override file values. The validated config is
echoed into every report so a run can be replayed from its output alone.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from .captioner import VARIANTS, ModelConfig
from .errors import ConfigError, FileFormatError

DATA_DIR_ENV = "DIETCAP_DATA_DIR"
SPLIT_IDS = (1, 2, 3)


def fixture_root() -> Path:
    """Directory holding shipped fixtures; DIETCAP_DATA_DIR overrides the
    repository's data/ directory."""
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data"


@dataclass(frozen=True)
class RunConfig:
    """Everything a subcommand needs beyond its positional inputs.

    model holds ModelConfig overrides (vocab_size excluded, it always comes
    from the vocabulary file at hand).
    """

    seed: int = 0
    threads: int = 1
    variant: str = "gl"
    batch_size: int = 10
    lr: float = 5e-4
    max_epochs: int = 10
    beam_width: int | None = None
    pre_eating_window: int = 5
    split: int | None = None
    vocab: str | None = None
    lexicon: str | None = None
    checkpoint: str | None = None
    model: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant {self.variant!r} not one of {VARIANTS}")
        for name in ("threads", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.beam_width is not None and self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.pre_eating_window < 1:
            raise ConfigError(
                f"pre_eating_window must be >= 1, got {self.pre_eating_window}")
        if self.split is not None and self.split not in SPLIT_IDS:
            raise ConfigError(f"split must be one of {SPLIT_IDS}, got {self.split}")
        bad = set(self.model) - {f.name for f in fields(ModelConfig)}
        if bad:
            raise ConfigError(f"unknown model config fields {sorted(bad)}")
        if "vocab_size" in self.model or "variant" in self.model:
            raise ConfigError(
                "vocab_size and variant are set by the run, not the model block")

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FileFormatError(f"{path}: {e}") from e
        if not isinstance(raw, dict):
            raise FileFormatError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"{path}: unknown config fields {sorted(extra)}")
        return cls(**raw)

    def override(self, **flags) -> "RunConfig":
        """A copy with the non-None flags applied; flags win over the file."""
        changes = {k: v for k, v in flags.items() if v is not None}
        return replace(self, **changes) if changes else self

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, variant=self.variant,
                           **self.model)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SplitSpec:
    """A named train/test partition of episode ids."""

    name: str
    train: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.train or not self.test:
            raise ConfigError(f"split {self.name!r} has an empty side")
        overlap = sorted(set(self.train) & set(self.test))
        if overlap:
            raise ConfigError(
                f"split {self.name!r}: train and test share {overlap[:5]}")

    @classmethod
    def numbered(cls, split: int, episode_ids: Sequence[str]) -> "SplitSpec":
        """The three standard deterministic partitions of a sorted id list:
        1 alternates ids, 2 cuts in half, 3 holds out every third id."""
        ids = sorted(episode_ids)
        if len(ids) < 2:
            raise ConfigError(f"need at least 2 episodes to split, got {len(ids)}")
        if split == 1:
            train = tuple(e for i, e in enumerate(ids) if i % 2 == 0)
            test = tuple(e for i, e in enumerate(ids) if i % 2 == 1)
        elif split == 2:
            half = (len(ids) + 1) // 2
            train, test = tuple(ids[:half]), tuple(ids[half:])
        elif split == 3:
            train = tuple(e for i, e in enumerate(ids) if i % 3 != 2)
            test = tuple(e for i, e in enumerate(ids) if i % 3 == 2)
        else:
            raise ConfigError(f"split must be one of {SPLIT_IDS}, got {split}")
        return cls(name=f"split-{split}", train=train, test=test)
