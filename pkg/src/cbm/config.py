"""Experiment configuration: one JSON document with six sections.

Every field has a default; unknown keys anywhere raise :class:`ConfigError`.
The fully resolved document is written next to every run's outputs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cmi import ESTIMATORS
from .dynamics import DynConfig
from .env import POLICIES, EnvSpec, RewardSpec, build_env
from .loop import MASK_SOURCES, LoopConfig
from .reward import RewardConfig
from .sac import SacConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _strict(cls, d: dict | None, section: str):
    d = dict(d or {})
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


@dataclass
class EnvSection:
    kind: str = "discrete-chain"
    params: dict = field(default_factory=dict)
    reward_specs: list | None = None
    spec_path: str | None = None

    def build(self, seed: int) -> EnvSpec:
        if self.spec_path:
            return EnvSpec.load(self.spec_path)
        kwargs = dict(self.params)
        kwargs.setdefault("seed", seed)
        if self.reward_specs is not None:
            if self.kind == "discrete-chain":
                raise ConfigError("discrete-chain uses its built-in reward; drop env.reward_specs")
            kwargs["reward_specs"] = [RewardSpec(**r) for r in self.reward_specs]
        try:
            return build_env(self.kind, **kwargs)
        except TypeError as exc:
            raise ConfigError(f"env.params: {exc}") from None


@dataclass
class DynSection:
    trunk_widths: list = field(default_factory=lambda: [32, 32])
    label_widths: list = field(default_factory=lambda: [32])
    feature_dim: int = 32
    n_negatives: int = 512
    lam1: float = 1e-6
    lam2: float = 1e-6
    batch_size: int = 32
    lr: float = 3e-4
    label_mode: str = "absolute"
    range_widen: float = 0.05
    mask_schedule: str = "random-unit"
    horizon_steps: int = 1
    train_predict_samples: int = 256
    n_predict_samples: int = 8192
    spot_check_every: int = 500
    estimator_kind: str = "cbm-g-minus-psi"
    steps: int = 20_000
    buffer_path: str | None = None
    n_transitions: int = 22_000
    behavior_policy: str = "uniform-random"
    heldout_fraction: float = 2000 / 22_000
    n_eval: int = 2000
    eps: float = 0.02
    demi_steps: int = 2000

    _MODEL_KEYS = {f.name for f in fields(DynConfig)}

    def __post_init__(self):
        if self.estimator_kind not in ESTIMATORS:
            raise ValueError(f"estimator_kind must be one of {ESTIMATORS}")
        if self.behavior_policy not in POLICIES or self.behavior_policy == "external":
            raise ValueError("behavior_policy must be uniform-random or scripted-sweep")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ValueError("heldout_fraction must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        self.model_config()

    def model_config(self) -> DynConfig:
        return DynConfig(**{k: v for k, v in asdict(self).items() if k in self._MODEL_KEYS})


@dataclass
class RewardSection:
    hidden: list = field(default_factory=lambda: [64, 64])
    lr: float = 3e-4
    batch_size: int = 32
    eps: float = 0.02
    steps: int = 50_000

    def model_config(self) -> RewardConfig:
        return RewardConfig(tuple(self.hidden), self.lr, self.batch_size, self.eps)


@dataclass
class AbstractionSection:
    provenance: str = "bisimulation"
    eval_cadence: int = 2000
    eps: float = 0.02
    n_eval: int = 2000
    n_negatives: int = 256
    reset_updates: int = 1000
    dyn_online: bool = False
    dyn_updates_per_step: int = 1
    reward_updates_per_step: int = 2

    def __post_init__(self):
        if self.provenance not in MASK_SOURCES:
            raise ValueError(f"provenance must be one of {MASK_SOURCES}")


@dataclass
class SacSection:
    hidden: list = field(default_factory=lambda: [64, 64])
    gamma: float = 0.99
    tau: float = 5e-3
    batch_size: int = 256
    lr: float = 3e-4
    alpha_start: float = 0.2
    alpha_finish: float = 0.01
    alpha_decay: float = 5.0
    grad_clip: float = 10.0
    start_steps: int = 1000
    updates_per_step: int = 1
    buffer_size: int = 1_000_000

    def model_config(self) -> SacConfig:
        d = asdict(self)
        d.pop("buffer_size")
        return SacConfig(**d)


@dataclass
class RunSection:
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs/default"
    tasks: list = field(default_factory=lambda: [0])
    steps_per_task: int = 10_000
    simultaneous: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("run.seeds must list at least one seed")
        self.seeds = [int(s) for s in self.seeds]
        self.tasks = [int(k) for k in self.tasks]


SECTIONS = {
    "env": EnvSection,
    "dyn": DynSection,
    "reward": RewardSection,
    "abstraction": AbstractionSection,
    "sac": SacSection,
    "run": RunSection,
}


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    dyn: DynSection = field(default_factory=DynSection)
    reward: RewardSection = field(default_factory=RewardSection)
    abstraction: AbstractionSection = field(default_factory=AbstractionSection)
    sac: SacSection = field(default_factory=SacSection)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(**{name: _strict(kind, d.get(name), name) for name, kind in SECTIONS.items()})

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def loop_config(self) -> LoopConfig:
        a = asdict(self.abstraction)
        return LoopConfig(
            tasks=tuple(self.run.tasks),
            steps_per_task=self.run.steps_per_task,
            simultaneous=self.run.simultaneous,
            **a,
        )

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
