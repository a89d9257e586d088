"""Run configuration: YAML in, validated dataclasses out, and back again."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .model import (
    BENCHMARK_PARAMS,
    GameModel,
    ParameterError,
    affine_mean_model,
    entropy_regularizer,
    benchmark_model,
    tabular_model,
)

PRESETS = ("paper-sec5", "static-demo")


class ConfigError(ValueError):
    pass


@dataclass
class ModelSpec:
    preset: Optional[str] = "paper-sec5"
    params: dict = field(default_factory=dict)
    kernel: Optional[list] = None        # [x][a][y]; low end when kernel_tag == "mean_interp"
    kernel_high: Optional[list] = None
    kernel_tag: str = "static"           # static | mean_interp
    reward: Optional[list] = None        # [x][a]
    reward_slope: Optional[list] = None
    reward_tag: str = "static"           # static | affine_mean


@dataclass
class RegularizerSpec:
    kind: str = "entropy"
    weight: float = 0.15


@dataclass
class ExactSpec:
    tol: float = 1e-10
    max_iter: int = 1000


@dataclass
class LearnerSpec:
    N: int = 1000
    L: int = 10
    M: int = 1000
    K: int = 20
    seed: int = 0
    repetitions: int = 20


@dataclass
class NashSpec:
    n_agents: list = field(default_factory=lambda: [10, 50, 100])
    horizon: Optional[int] = None
    episodes: int = 2000
    seed: int = 0
    grid: int = 11
    vertices: bool = True
    include_learned: bool = True
    candidates_only_shared: bool = False
    epsilon: Optional[float] = None     # mean-field accuracy for the bound; None = realized error


@dataclass
class ConstantsSpec:
    sample_budget: int = 1000
    seed: int = 0
    lipschitz: Optional[list] = None     # analytic [L1, K1] override
    epsilon_grid: list = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2, 0.5])
    m2_pairs: list = field(default_factory=lambda: [[0.1, 0.05], [0.05, 0.05], [0.01, 0.01]])
    m1_epsilon: float = 0.1
    m1_delta: float = 0.05
    m1_rounds: int = 10
    V_F: float = 2.0
    V_Fmax: float = 2.0
    alpha: float = 0.5


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    discount: float = BENCHMARK_PARAMS["beta"]
    exact: ExactSpec = field(default_factory=ExactSpec)
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    nash: NashSpec = field(default_factory=NashSpec)
    constants: ConstantsSpec = field(default_factory=ConstantsSpec)
    output: str = "out"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_SECTIONS = {
    "model": ModelSpec, "regularizer": RegularizerSpec, "exact": ExactSpec,
    "learner": LearnerSpec, "nash": NashSpec, "constants": ConstantsSpec,
}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS and cls is RunConfig:
            value = _build(_SECTIONS[key], value, key)
        kwargs[key] = value
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "config")
    validate(cfg)
    return cfg


def load_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return parse_config(data or {})


def preset_config(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    cfg = RunConfig()
    cfg.model.preset = name
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    def check(cond, msg):
        if not cond:
            raise ConfigError(msg)

    check(isinstance(cfg.discount, (int, float)) and 0 < cfg.discount < 1, "discount must lie in (0, 1)")
    check(cfg.regularizer.kind == "entropy", "only the entropy regularizer is supported")
    check(cfg.regularizer.weight > 0, "regularizer weight must be positive")
    check(cfg.exact.tol > 0 and cfg.exact.max_iter >= 1, "exact: need tol > 0 and max_iter >= 1")
    lr = cfg.learner
    check(lr.K >= 0 and min(lr.N, lr.L, lr.M, lr.repetitions) >= 1, "learner: need K >= 0, N, L, M, repetitions >= 1")
    check(all(int(n) >= 1 for n in cfg.nash.n_agents) and cfg.nash.episodes >= 2, "nash: bad agent counts or episodes")
    check(cfg.nash.horizon is None or cfg.nash.horizon >= 1, "nash: horizon must be >= 1")
    check(cfg.nash.epsilon is None or 0 <= cfg.nash.epsilon < 1, "nash: epsilon must lie in [0, 1)")
    spec = cfg.model
    if spec.preset is not None:
        check(spec.preset in PRESETS, f"unknown preset {spec.preset!r}")
        if spec.preset == "paper-sec5":
            bad = set(spec.params) - (set(BENCHMARK_PARAMS) - {"beta", "gamma"})
            check(not bad, f"model.params: unknown keys {sorted(bad)}")
    else:
        check(spec.kernel is not None and spec.reward is not None, "inline model needs kernel and reward tables")
        check(spec.kernel_tag in ("static", "mean_interp"), "kernel_tag must be static or mean_interp")
        check(spec.reward_tag in ("static", "affine_mean"), "reward_tag must be static or affine_mean")
    try:
        build_model(cfg)
    except (ParameterError, ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def build_model(cfg: RunConfig) -> GameModel:
    spec, beta = cfg.model, float(cfg.discount)
    if spec.preset == "paper-sec5":
        return benchmark_model(beta=beta, **spec.params)
    if spec.preset == "static-demo":
        # mean-field-free variant of the benchmark kernel with its reward frozen at <mu> = 1/2
        return tabular_model([[[0.4, 0.6], [0.3, 0.7]], [[0.3, 0.7], [0.2, 0.8]]],
                             [[0.2, 0.1], [0.1, 0.0]], beta, name="static-demo")
    if spec.kernel_tag == "static" and spec.reward_tag == "static":
        return tabular_model(spec.kernel, spec.reward, beta)
    high = spec.kernel_high if spec.kernel_tag == "mean_interp" else spec.kernel
    if high is None:
        raise ConfigError("mean_interp kernel needs kernel_high")
    slope = spec.reward_slope if spec.reward_tag == "affine_mean" else None
    if slope is None:
        import numpy as np

        slope = np.zeros_like(np.asarray(spec.reward, dtype=float)).tolist()
    return affine_mean_model(spec.kernel, high, spec.reward, slope, beta)


def build_regularizer(cfg: RunConfig, n_actions: int):
    return entropy_regularizer(cfg.regularizer.weight, n_actions)
