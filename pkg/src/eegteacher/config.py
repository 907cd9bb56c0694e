"""Pipeline configuration: one YAML file with nested sections, unknown keys rejected.

``full_config()`` holds the full-scale settings; ``toy_config()`` shrinks
data, model and epochs so the whole chain runs on one CPU core in minutes.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import yaml

from .model import ModelConfig
from .synthetic import SyntheticSpec
from .teacher_features import CONTEXT_WINDOWS


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    max_s: float = 240.0
    excerpt_s: float = 30.0
    window_s: float = 8.0
    stride_s: float = 1.6
    segment_s: float = 3.0
    delay_ms: float = 200.0
    sample_rate: float = 125.0
    split_ratio: float = 0.75
    split_seed: int = 42


@dataclass
class TeacherConfig:
    kinds: list = field(default_factory=lambda: ["muq", "surprisal", "entropy"])
    context: object = 16
    n_bins: int = 128
    k: int = 128
    kmeans_seed: int = 0
    kmeans_restarts: int = 10
    provider: str = "markov"     # markov (stimuli/*.transition.f64) | file (stimuli/*.logits.f32)

    def __post_init__(self):
        if self.context != "chunk" and self.context not in CONTEXT_WINDOWS:
            raise ConfigError(f"teacher.context must be one of {CONTEXT_WINDOWS} or 'chunk', got {self.context!r}")
        bad = set(self.kinds) - {"muq", "surprisal", "entropy"}
        if bad or not self.kinds:
            raise ConfigError(f"unknown teacher kinds {sorted(bad)}")
        if not 1 <= self.n_bins <= 256 or not 1 <= self.k <= 256:
            raise ConfigError("n_bins and k must lie in [1, 256] (tokens are stored as u8)")
        if self.provider not in ("markov", "file"):
            raise ConfigError("teacher.provider must be 'markov' or 'file'")


@dataclass
class TrainConfig:
    pretrain_epochs: int = 10000
    finetune_epochs: int = 3500
    fullscratch_epochs: int = 3500
    batch_size: int = 48
    lr: float = 0.003
    seed: int = 42
    seeds: list = field(default_factory=lambda: [0, 1, 42])

    def __post_init__(self):
        for name in ("pretrain_epochs", "finetune_epochs", "fullscratch_epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def hash(self):
        """Short SHA-1 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    def model_for(self, kind=None, embed_dim=None):
        """Model config with the teacher geometry of ``kind`` filled in."""
        from .features import teacher_shape
        d = self.model.to_dict()
        if kind is not None:
            length, dim = teacher_shape(kind, embed_dim)
            d.update(teacher_kind=kind, teacher_len=length, teacher_dim=dim,
                     vocab=self.teacher.k if kind == "muq" else self.teacher.n_bins)
        return ModelConfig(**d)


_SECTIONS = {"data": DataConfig, "teacher": TeacherConfig, "model": ModelConfig,
             "train": TrainConfig, "synth": SyntheticSpec}


def _build(cls, section, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(values) - known)
    if extra:
        raise ConfigError(f"unknown keys in {section!r}: {extra}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def config_from_dict(d, base=None):
    """Overlay ``d`` on ``base`` (default: full-scale settings), validating every key."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    extra = sorted(set(d) - set(_SECTIONS))
    if extra:
        raise ConfigError(f"unknown top-level keys: {extra}")
    merged = (base or PipelineConfig()).to_dict()
    for name in _SECTIONS:
        if name in d and d[name] is not None:
            if not isinstance(d[name], dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            merged[name].update(d[name])
    return PipelineConfig(**{name: _build(cls, name, merged[name]) for name, cls in _SECTIONS.items()})


def load_config(path, base=None):
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc, base)


def dump_config(cfg, path=None):
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def full_config():
    cfg = PipelineConfig()
    cfg.synth = SyntheticSpec(channels=128, duration_s=240.0, vocab=128)
    return cfg


def toy_config():
    """Desk-scale preset: 8 channels, 120-s synthetic recordings, 32 tokens/bins, short training."""
    return config_from_dict({
        "data": {"max_s": 120.0},
        "teacher": {"n_bins": 32, "k": 32, "kmeans_restarts": 2},
        "model": {"channels": 8, "embed_dim": 32, "heads": 4, "classifier_hidden": 32,
                  "vocab": 32, "conv_channels": [16, 32, 32]},
        "train": {"pretrain_epochs": 20, "finetune_epochs": 20, "fullscratch_epochs": 20},
        "synth": {"channels": 8, "duration_s": 120.0, "vocab": 32},
    })


PRESETS = {"full": full_config, "toy": toy_config}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name]())
