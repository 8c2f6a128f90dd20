"""Run configuration: one YAML document with data/model/train/eval/report sections.

Unknown keys are rejected at every level. ``resolve`` fills defaults so the
written copy fully determines a run.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import ShiftConfig, SplitPlan, default_shifts
from .losses import ConfigError
from .segmodel import ModelConfig
from .trainer import TrainingConfig, check_mode


@dataclass
class SynthConfig:
    seed: int = 0
    per_center_count: int | dict[str, int] = 40
    shifts: dict[str, ShiftConfig] = field(default_factory=default_shifts)


@dataclass
class DataConfig:
    # existing corpus root (<root>/<center>/{images,masks}); null -> synthesize under <out>/data
    root: str | None = None
    train_centers: list[str] = field(default_factory=lambda: ["c1", "c2", "c3", "c4", "c5"])
    test_centers: list[str] = field(default_factory=lambda: ["c6"])
    synth: SynthConfig = field(default_factory=SynthConfig)

    def plan(self) -> SplitPlan:
        return SplitPlan(list(self.train_centers), list(self.test_centers), self.synth.per_center_count)


@dataclass
class TrainSection(TrainingConfig):
    mode: str = "dcsd"

    def validate(self) -> None:
        super().validate()
        check_mode(self.mode)

    def training_config(self) -> TrainingConfig:
        d = asdict(self)
        d.pop("mode")
        return TrainingConfig(**d)


@dataclass
class EvalConfig:
    threshold: float = 0.5
    splits: list[str] = field(default_factory=lambda: ["train", "test"])
    average: str = "macro"
    per_image_csv: bool = False

    def __post_init__(self):
        if self.average not in ("macro", "micro"):
            raise ConfigError(f"eval.average must be 'macro' or 'micro', got {self.average!r}")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("eval.threshold must lie in [0, 1]")


@dataclass
class ReportConfig:
    out: str = "runs/default"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def __post_init__(self):
        if tuple(self.train.input_size) != tuple(self.model.input_size):
            raise ConfigError(
                f"train.input_size {tuple(self.train.input_size)} != model.input_size {tuple(self.model.input_size)}"
            )
        self.data.plan()

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where: str):
    """Construct dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        elif (cls, name) == (SynthConfig, "shifts"):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.shifts: expected a mapping of center id -> shift config")
            kwargs[name] = {k: _build(ShiftConfig, v, f"{where}.shifts.{k}") for k, v in value.items()}
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainSection,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "report"): ReportConfig,
    (DataConfig, "synth"): SynthConfig,
}


def _deep_update(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "shifts":
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


PRESETS: dict[str, dict] = {
    # quick CPU check: 20 train / 4 unseen images, 2 epochs
    "smoke": {
        "data": {"synth": {"per_center_count": 4}},
        "model": {"base_channels": 8, "rfb_channels": 16, "input_size": [64, 64]},
        "train": {"epochs": 2, "input_size": [64, 64]},
        "report": {"out": "runs/smoke"},
    },
    # desk-scale reproduction: 200 train / 50 unseen images at 64x64, 30 epochs
    "desk": {
        "data": {"synth": {"per_center_count": {"c1": 40, "c2": 40, "c3": 40, "c4": 40, "c5": 40, "c6": 50}}},
        "model": {"base_channels": 8, "rfb_channels": 16, "input_size": [64, 64]},
        "train": {"epochs": 30, "input_size": [64, 64]},
        "report": {"out": "runs/desk"},
    },
    # the published protocol's sizes; far too slow for a CPU
    "paper": {
        "data": {"synth": {"per_center_count": 200}},
        "model": {"base_channels": 16, "rfb_channels": 32, "input_size": [256, 256]},
        "train": {"epochs": 30, "input_size": [256, 256]},
        "report": {"out": "runs/paper"},
    },
}


def from_dict(d: dict | None, preset: str | None = None) -> RunConfig:
    base = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(PRESETS)}")
        base = PRESETS[preset]
    return _build(RunConfig, _deep_update(base, d or {}), "config")


def load_config(path=None, preset: str | None = None) -> RunConfig:
    d = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        d = yaml.safe_load(path.read_text()) or {}
    return from_dict(d, preset)


def with_overrides(cfg: RunConfig, **over) -> RunConfig:
    """Return a validated copy with dotted-path overrides, e.g. ``{"train.mode": "sd"}``."""
    d = cfg.to_dict()
    for dotted, value in over.items():
        if value is None:
            continue
        node = d
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return from_dict(d)
