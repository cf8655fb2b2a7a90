"""Experiment configuration stored as sectioned ``key = value`` text (INI).

Every section maps onto one dataclass; values are parsed by the field's
annotated type, so ``parse(serialize(cfg)) == cfg`` holds exactly (floats
are written with ``repr``).
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .federation import FlConfig
from .vae import VaeConfig

OUTPUT_DIR_ENV = "FEDVAE_OUTPUT_DIR"


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | idx | grouped
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    image_size: int = 8
    num_classes: int = 10
    per_class: int = 60
    test_per_class: int = 50
    num_groups: int = 30
    pattern_seed: int = 0
    partition: str = "iid"  # iid | group

    def __post_init__(self):
        if self.source not in ("synthetic", "idx", "grouped"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.partition not in ("iid", "group"):
            raise ValueError(f"unknown partition scheme {self.partition!r}")
        if self.partition == "group" and self.source != "grouped":
            raise ValueError("group partitioning needs a grouped data source")
        if self.source == "idx" and not (self.train_images and self.train_labels
                                         and self.test_images and self.test_labels):
            raise ValueError("idx source needs train/test image and label paths")
        if self.image_size < 4:
            raise ValueError("image_size must be >= 4")


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 8
    beta: float = 0.01
    architecture: str = "small"
    likelihood: str = "bernoulli"
    channels: tuple[int, ...] = ()

    def vae_config(self, data: DataConfig) -> VaeConfig:
        return VaeConfig((data.image_size, data.image_size), data.num_classes, self.latent_dim,
                         self.beta, self.architecture, self.likelihood, self.channels or None)


@dataclass(frozen=True)
class MetricsConfig:
    replicates: int = 5
    samples: int = 1000
    classifiers: tuple[str, ...] = ("logreg", "mlp", "cnn")
    eval_every: int = 0
    embedder_epochs: int = 10
    cnn_epochs: int = 10
    grid_per_class: int = 10

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.samples < 2:
            raise ValueError("samples must be >= 2")
        bad = set(self.classifiers) - {"logreg", "mlp", "cnn"}
        if bad:
            raise ValueError(f"unknown classifiers {sorted(bad)}")


@dataclass(frozen=True)
class SearchConfig:
    strategy: str = "auto"  # auto | grid | random
    trials: int = 100
    grid_threshold: int = 150
    space: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        if self.strategy not in ("auto", "grid", "random"):
            raise ValueError(f"unknown search strategy {self.strategy!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FlConfig = field(default_factory=FlConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    @property
    def vae(self) -> VaeConfig:
        return self.model.vae_config(self.data)

    def validate(self) -> "ExperimentConfig":
        """Check cross-section constraints before any training starts."""
        vae = self.vae
        fl = self.federation
        if fl.privacy == "ldp" and vae.architecture != "small":
            raise ValueError("LDP training needs the small architecture")
        if self.data.source == "synthetic" and self.data.partition == "iid":
            total = self.data.per_class * self.data.num_classes
            if fl.num_clients > total:
                raise ValueError("more clients than training samples")
        return self

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


_SECTIONS = ("data", "model", "federation", "metrics", "search")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) and value > 0 else repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _parse(text, args[0])
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_parse(part.strip(), inner) for part in text.split(",") if part.strip())
    if tp is bool:
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _section_to_dict(obj) -> dict[str, str]:
    return {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def _section_from(cls, items: dict[str, str]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(items) - names
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**{k: _parse(v, hints[k]) for k, v in items.items()})


def serialize(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {"seed": str(cfg.seed), "output_dir": cfg.output_dir}
    for name in _SECTIONS:
        section = getattr(cfg, name)
        items = _section_to_dict(section)
        if name == "search":
            items.pop("space")
        parser[name] = items
    parser["search.space"] = {axis: ", ".join(values) for axis, values in cfg.search.space}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    known = {"run", "search.space", *_SECTIONS}
    extra = set(parser.sections()) - known
    if extra:
        raise ValueError(f"unknown config sections: {sorted(extra)}")
    kwargs = {}
    classes = {"data": DataConfig, "model": ModelConfig, "federation": FlConfig,
               "metrics": MetricsConfig, "search": SearchConfig}
    for name, cls in classes.items():
        items = dict(parser[name]) if parser.has_section(name) else {}
        if name == "search" and parser.has_section("search.space"):
            space = tuple((axis, tuple(v.strip() for v in values.split(",") if v.strip()))
                          for axis, values in parser["search.space"].items())
            kwargs[name] = dataclasses.replace(_section_from(cls, items), space=space)
        else:
            kwargs[name] = _section_from(cls, items)
    run = dict(parser["run"]) if parser.has_section("run") else {}
    return ExperimentConfig(seed=int(run.get("seed", 0)),
                            output_dir=run.get("output_dir", "runs/default"), **kwargs)


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text())


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(serialize(cfg))
