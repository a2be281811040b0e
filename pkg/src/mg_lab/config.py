"""Experiment configuration: TOML files with fixed sections and typed keys.

Sections: ``[data]``, ``[model]``, ``[train]``, ``[sampler]``, ``[eval]``,
``[run]``. Unknown sections or keys are rejected; missing keys take defaults.
"""
import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

from .errors import ConfigError
from .mixture import LabeledMixture, grid_two_class
from .trainer import ModelConfig, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SAMPLER_KINDS = {"ddpm": "vp", "euler": "flow", "em": "flow"}


@dataclass
class DataConfig:
    rows: int = 5
    cols: int = 5
    spacing: float = 2.0
    std: float = 0.15

    def validate(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise ConfigError("data grid needs at least two cells")
        if self.spacing <= 0 or self.std <= 0:
            raise ConfigError("data.spacing and data.std must be positive")

    def mixture(self) -> LabeledMixture:
        return grid_two_class(self.rows, self.cols, self.spacing, self.std)


@dataclass
class SamplerConfig:
    kind: str = "ddpm"
    steps: int = 0  # 0: full chain for ddpm, 250 for flow samplers
    noise_scale: float = 0.5
    guidance: str = "none"
    w_infer: float = 1.0

    def validate(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"sampler.kind must be one of {sorted(SAMPLER_KINDS)}")
        if self.guidance not in ("none", "cfg"):
            raise ConfigError("sampler.guidance must be 'none' or 'cfg'")
        if self.steps < 0 or self.noise_scale < 0:
            raise ConfigError("sampler.steps and sampler.noise_scale must be >= 0")

    @property
    def cfg_weight(self) -> float | None:
        return self.w_infer if self.guidance == "cfg" else None


@dataclass
class EvalConfig:
    n_samples: int = 2000
    n_reference: int = 2000
    class_id: int = 0
    outlier_k: float = 3.0
    recall_r: float = 3.0
    kde_bandwidth: float = 0.0  # 0: Scott's rule
    kde_grid: int = 101
    n_trajectories: int = 64

    def validate(self):
        if self.n_samples < 1 or self.n_reference < 2:
            raise ConfigError("eval needs n_samples >= 1 and n_reference >= 2")
        if self.outlier_k <= 0 or self.recall_r <= 0 or self.kde_bandwidth < 0:
            raise ConfigError("eval.outlier_k and eval.recall_r must be positive")
        if self.kde_grid < 2 or self.n_trajectories < 1:
            raise ConfigError("eval.kde_grid must be >= 2 and eval.n_trajectories >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    init_checkpoint: str = ""

    def validate(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("run.seed must be an unsigned 64-bit integer")
        if self.init_checkpoint and not Path(self.init_checkpoint).is_file():
            raise ConfigError(f"run.init_checkpoint {self.init_checkpoint!r} does not exist")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        for section in dataclasses.fields(self):
            getattr(self, section.name).validate()
        if SAMPLER_KINDS[self.sampler.kind] != self.train.process:
            raise ConfigError(f"sampler {self.sampler.kind!r} does not match process {self.train.process!r}")
        if self.sampler.kind == "ddpm" and self.sampler.steps not in (0, self.train.diffusion_steps):
            raise ConfigError("ddpm sampling runs the full chain; set sampler.steps = 0 or diffusion_steps")
        if not 0 <= self.eval.class_id < self.data.mixture().num_classes:
            raise ConfigError(f"eval.class_id {self.eval.class_id} is not a class of the dataset")
        return self

    @property
    def sampler_steps(self) -> int:
        if self.sampler.steps:
            return self.sampler.steps
        return self.train.diffusion_steps if self.sampler.kind == "ddpm" else 250

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section field overrides, e.g. ``replace(train={"w": 0.25})``."""
        out = from_dict(self.to_dict())
        for name, updates in sections.items():
            out_section = getattr(out, name)
            for key, value in updates.items():
                if not hasattr(out_section, key):
                    raise ConfigError(f"unknown key {name}.{key}")
                setattr(out_section, key, value)
        return out.validate()


def _coerce(section: str, f: dataclasses.Field, value):
    kind = f.type
    where = f"{section}.{f.name}"
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise ConfigError(f"unsupported field type for {where}")


def from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    for name, values in raw.items():
        if name not in sections:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        section = getattr(cfg, name)
        fields_ = {f.name: f for f in dataclasses.fields(section)}
        for key, value in values.items():
            if key not in fields_:
                raise ConfigError(f"unknown key {name}.{key}")
            setattr(section, key, _coerce(name, fields_[key], value))
    return cfg


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return from_dict(raw).validate()


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg))


def loads_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(str(e)) from e
    return from_dict(raw).validate()
