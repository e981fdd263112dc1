"""Run configuration: strict JSON with documented defaults.

Every section is a dataclass; unknown keys anywhere fail with the dotted
key path.  Seeds left as ``null`` are derived from the master seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..extraction import ExtractionConfig, desk_preset

TASKS = ("train-target", "attack", "evaluate", "serve-target", "theory-bound", "theory-validate", "report")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "two_moons"  # two_moons | blobs | idx | glyphs
    n_train: int = 1000
    n_test: int = 1000
    noise: float = 0.1
    num_classes: int = 3
    spread: float = 1.0
    images_path: str | None = None
    labels_path: str | None = None
    test_fraction: float = 0.2
    image_size: int = 12
    seed: int = 3


@dataclass
class NetConfig:
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    activation: str = "relu"
    seed: int | None = None


@dataclass
class GeneratorConfig:
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    activation: str = "relu"
    latent_dim: int = 8
    # "auto": box over the training bounds for vector data, sigmoid for images
    output_activation: str = "auto"
    seed: int | None = None


@dataclass
class TrainSection:
    epochs: int = 200
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 0.01
    momentum: float = 0.9


@dataclass
class OracleConfig:
    kind: str = "local"  # local | noisy | remote
    url: str | None = None
    timeout: float = 10.0
    retries: int = 2
    flip_probability: float = 0.0
    budget_guard: int | None = None


@dataclass
class EvalConfig:
    epsilons: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3])
    step_size: float = 0.01
    attacks: list[str] = field(default_factory=lambda: ["fgsm", "bim", "pgd"])
    targeted: list[bool] = field(default_factory=lambda: [False, True])
    # vector data: epsilon and step are multiples of the mean feature range
    scale_to_bounds: bool = True
    probe_grid: int = 50
    noise_baseline: bool = True


@dataclass
class TheoryConfig:
    phi: float = 0.1
    epsilon: float = 0.05
    delta: float = 0.1
    trials: int = 500
    q: int | None = None


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8765
    budget_guard: int | None = None


@dataclass
class RunConfig:
    task: str = "attack"
    seed: int = 0
    out: str = "runs/default"
    # where attack/evaluate/serve-target find the victim; default <out>/target
    target_checkpoint: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    target: NetConfig = field(default_factory=NetConfig)
    target_training: TrainSection = field(default_factory=TrainSection)
    substitute: NetConfig = field(default_factory=lambda: NetConfig(activation="tanh"))
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    # attack keys given in a config file override the desk preset, not the
    # large-scale dataclass defaults
    attack: ExtractionConfig = field(default_factory=desk_preset)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)

    def derived_seeds(self) -> dict[str, int]:
        """Per-component seeds from the master seed (explicit values win)."""
        state = np.random.SeedSequence(self.seed).generate_state(4, dtype=np.uint32)
        return {
            "target": self.target.seed if self.target.seed is not None else int(state[0]),
            "substitute": self.substitute.seed if self.substitute.seed is not None else int(state[1]),
            "generator": self.generator.seed if self.generator.seed is not None else int(state[2]),
            "attack": int(state[3]),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        return d


_SECTIONS = {
    "dataset": DatasetConfig,
    "target": NetConfig,
    "target_training": TrainSection,
    "substitute": NetConfig,
    "generator": GeneratorConfig,
    "oracle": OracleConfig,
    "evaluate": EvalConfig,
    "theory": TheoryConfig,
    "serve": ServeConfig,
}


def _section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be an object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{path}.{key}'")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{path}': {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
    kwargs = {}
    for key, value in doc.items():
        if key == "substitute":
            kwargs[key] = _section(NetConfig, {"activation": "tanh", **value} if isinstance(value, dict) else value, key)
        elif key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value, key)
        elif key == "attack":
            if not isinstance(value, dict):
                raise ConfigError("'attack' must be an object")
            try:
                kwargs[key] = ExtractionConfig.from_dict({**desk_preset().to_dict(), **value})
            except KeyError as exc:
                raise ConfigError(f"unknown config key in 'attack': {exc.args[0]}") from exc
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid 'attack': {exc}") from exc
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.task not in TASKS:
        raise ConfigError(f"unknown task '{cfg.task}'")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if cfg.dataset.kind not in ("two_moons", "blobs", "idx", "glyphs"):
        raise ConfigError(f"unknown dataset kind '{cfg.dataset.kind}'")
    if cfg.oracle.kind not in ("local", "noisy", "remote"):
        raise ConfigError(f"unknown oracle kind '{cfg.oracle.kind}'")
    if cfg.oracle.kind == "remote" and not cfg.oracle.url:
        raise ConfigError("remote oracle needs 'oracle.url'")
    if not 0.0 <= cfg.oracle.flip_probability < 0.5:
        raise ConfigError("oracle.flip_probability must lie in [0, 0.5)")
    for a in cfg.evaluate.attacks:
        if a not in ("fgsm", "bim", "pgd"):
            raise ConfigError(f"unknown attack '{a}' in evaluate.attacks")


def load_config(path=None) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc)
