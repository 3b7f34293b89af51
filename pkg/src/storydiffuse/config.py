"""Run configuration: one nested dataclass tree, serialized as JSON."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataset import CorpusConfig


class ConfigFieldError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"config field {path}: {msg}")
        self.path = path


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ModelConfig:
    d_feat: int = 64
    d_model: int = 32
    n_blocks: int = 4
    heads: int = 4
    ff_mult: int = 4
    backbone_seed: int = 1234
    embed_seed: int = 7
    use_adapters: bool = True
    io_scale: bool = True
    layout_bias: bool = True


@dataclass
class GuidanceSettings:
    w: float = 0.3
    p_unguide: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-2
    t_prime: int = 30
    # how many elements of each story's sampled subset enter the loss per step;
    # null = all of them
    steps_per_story: int | None = None
    c_weighted: bool = False
    pad_is_content: bool = True
    dtype: str = "float64"


@dataclass
class SamplerSettings:
    steps: int = 30
    text_guidance_source: str = "none"
    rule: str = "renoise"
    clamp: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigFieldError("<root>", f"malformed JSON in {path}: {e}") from None
        return cls.from_dict(raw)

    def replace(self, **dotted) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"train.epochs": 3})``."""
        d = self.to_dict()
        for key, val in dotted.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigFieldError(key, "unknown section")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigFieldError(key, "unknown field")
            node[parts[-1]] = val
        return RunConfig.from_dict(d)


def _build(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigFieldError(path or "<root>", f"expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigFieldError(f"{path}{sorted(unknown)[0]}", "unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        fp = f"{path}{f.name}"
        tp = hints[f.name]
        val = d[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, val, fp + ".")
        else:
            kwargs[f.name] = _coerce(tp, val, fp)
    return cls(**kwargs)


def _coerce(tp, val, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if val is None:
            return None
        return _coerce(args[0], val, path)
    if tp is bool:
        if not isinstance(val, bool):
            raise ConfigFieldError(path, f"expected a boolean, got {val!r}")
        return val
    if tp is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigFieldError(path, f"expected an integer, got {val!r}")
        return val
    if tp is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigFieldError(path, f"expected a number, got {val!r}")
        return float(val)
    if tp is str:
        if not isinstance(val, str):
            raise ConfigFieldError(path, f"expected a string, got {val!r}")
        return val
    return val


def toy_config(preset: str = "pororo-like", seed: int = 0, **overrides) -> RunConfig:
    """Desk-scale training preset used by the acceptance suite and scripts."""
    cfg = RunConfig(seed=seed, corpus=CorpusConfig.from_preset(preset, seed=seed))
    cfg = cfg.replace(
        **{
            "train.lr": 2e-3,
            "train.steps_per_story": 1,
            "train.dtype": "float32",
            "train.batch_size": 4,
        }
    )
    return cfg.replace(**overrides) if overrides else cfg
