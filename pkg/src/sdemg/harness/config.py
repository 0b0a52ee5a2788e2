"""Experiment configuration: profiles plus a plain ``key = value`` file format.

Keys are dotted paths into :class:`ExperimentConfig`, e.g.::

    # desk run with a wider network
    model.base_channels = 32
    optimizer.epochs = 40
    snr_grid_test = -10
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from ..score_net import ScoreNetConfig

PROFILES = ("smoke", "desk", "full")
DEVICE_ENV = "SDEMG_DEVICE"

TRAIN_SNRS = (-5.0, -7.0, -9.0, -11.0, -13.0, -15.0)
TEST_SNRS = tuple(float(v) for v in range(-14, 1, 2))


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 2e-4
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    # re-draw ECG source and SNR for every pair after the first epoch
    remix: bool = True


@dataclass(frozen=True)
class CorpusConfig:
    semg_fs: int = 2000
    ecg_fs: int = 128
    semg_record_s: float = 50.0
    ecg_record_s: float = 60.0
    semg_train: int = 4
    semg_val: int = 1
    semg_test: int = 2
    ecg_train: int = 6
    ecg_val: int = 2
    ecg_test: int = 3
    contaminations_per_segment: int = 5
    # validation recordings are cut to this many segments (0 keeps all)
    val_segments: int = 4


@dataclass(frozen=True)
class Paths:
    corpus_dir: str = "work/corpus"
    train_dir: str = "work/train"
    val_dir: str = "work/val"
    test_dir: str = "work/test"
    checkpoint: str = "work/model.ckpt"
    report: str = "work/report"


@dataclass(frozen=True)
class ExperimentConfig:
    segment_s: float = 5.0
    fs: int = 1000
    snr_grid_train: tuple = TRAIN_SNRS
    snr_grid_test: tuple = TEST_SNRS
    T: int = 25
    sched_s: float = 0.008
    sigma_mode: str = "beta_tilde"
    # sampler bound on the clean-signal estimate; 0 applies the bare update
    clip_x0: float = 1.0
    seed: int = 0
    model: ScoreNetConfig = field(default_factory=lambda: ScoreNetConfig(segment_len=5000, base_channels=16))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        if not self.snr_grid_train or not self.snr_grid_test:
            raise ConfigError("SNR grids must be non-empty")
        opt = self.optimizer
        if opt.epochs < 1 or opt.batch_size < 1 or opt.learning_rate <= 0:
            raise ConfigError("need epochs >= 1, batch_size >= 1 and learning_rate > 0")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.clip_x0 < 0:
            raise ConfigError("clip_x0 must be >= 0")
        if self.sigma_mode not in ("beta_tilde", "beta", "zero"):
            raise ConfigError(f"unknown sigma_mode {self.sigma_mode!r}")
        if self.model.segment_len != self.segment_len:
            raise ConfigError(
                f"model.segment_len={self.model.segment_len} but segment_s*fs={self.segment_len}"
            )

    @property
    def segment_len(self) -> int:
        return int(round(self.segment_s * self.fs))


def profile(name: str) -> ExperimentConfig:
    """Built-in settings: ``smoke`` for CI, ``desk`` for a laptop, ``full`` for a large corpus and network."""
    if name == "smoke":
        return ExperimentConfig(
            segment_s=1.0,
            T=10,
            model=ScoreNetConfig(segment_len=1000, base_channels=8, n_blocks=1, embed_dim=32),
            optimizer=OptimizerConfig(learning_rate=1e-3, batch_size=4, epochs=2),
            corpus=CorpusConfig(
                semg_record_s=4.0, ecg_record_s=10.0, semg_train=2, semg_val=1, semg_test=1,
                ecg_train=2, ecg_val=1, ecg_test=1, contaminations_per_segment=1, val_segments=2,
            ),
        )
    if name == "desk":
        return ExperimentConfig()
    if name == "full":
        return ExperimentConfig(
            T=200,
            model=ScoreNetConfig(segment_len=5000, base_channels=128),
            optimizer=OptimizerConfig(epochs=100),
            corpus=CorpusConfig(
                semg_record_s=120.0, ecg_record_s=600.0, semg_train=30, semg_val=3, semg_test=10,
                ecg_train=12, ecg_val=3, ecg_test=3, contaminations_per_segment=10, val_segments=0,
            ),
        )
    raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")


def _coerce(text: str, current):
    text = text.strip()
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(current, tuple):
        items = [s for s in text.replace(";", ",").split(",") if s.strip()]
        kind = type(current[0]) if current else float
        return tuple(kind(s.strip()) for s in items)
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


_SECTIONS = {"model": ScoreNetConfig, "optimizer": OptimizerConfig, "corpus": CorpusConfig, "paths": Paths}


def _set(tree: dict, key: str, value):
    head, _, rest = key.partition(".")
    if head not in tree:
        raise ConfigError(f"unknown configuration key {key!r}")
    if rest:
        if not isinstance(tree[head], dict):
            raise ConfigError(f"{head!r} has no sub-keys")
        _set(tree[head], rest, value)
    elif isinstance(tree[head], dict):
        raise ConfigError(f"{key!r} is a section, not a value")
    else:
        try:
            tree[head] = _coerce(value, tree[head]) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None


def _build(tree: dict) -> ExperimentConfig:
    try:
        sections = {name: cls(**tree[name]) for name, cls in _SECTIONS.items()}
        return ExperimentConfig(**{**tree, **sections})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def override(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Return a copy with dotted keys replaced; string values are coerced.

    Changing ``segment_s`` or ``fs`` also moves ``model.segment_len`` unless
    that key is given explicitly.
    """
    tree = dataclasses.asdict(config)
    for key, value in overrides.items():
        _set(tree, key, value)
    if "model.segment_len" not in overrides and ({"segment_s", "fs"} & set(overrides)):
        tree["model"]["segment_len"] = int(round(tree["segment_s"] * tree["fs"]))
    return _build(tree)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, profile_name: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    """Start from a profile, apply a config file, then explicit overrides."""
    pairs = {}
    if path is not None:
        pairs.update(parse_config_text(Path(path).read_text()))
    pairs.update(overrides or {})
    return override(profile(profile_name), pairs)


def config_text(config) -> str:
    """Serialize back to the ``key = value`` format."""
    lines = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                walk(v, f"{prefix}{f.name}.")
            elif isinstance(v, tuple):
                lines.append(f"{prefix}{f.name} = {','.join(str(x) for x in v)}")
            else:
                lines.append(f"{prefix}{f.name} = {v}")

    walk(config, "")
    return "\n".join(lines) + "\n"


def device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu") or "cpu"
