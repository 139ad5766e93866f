"""Run configuration: a flat ``key = value`` text format with dotted keys.

Reward specs are declared as ``reward.<k>.<field>``; vector values are
comma-separated. Every default is written back into the run directory so a
snapshot alone reproduces the run.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .rewards import RewardSpec, default_benchmark_specs

MODES = ("apex", "static", "wo_dsan", "only_lp", "wo_lp", "wo_cp", "wo_pn")
_SPECIALIST = re.compile(r"specialist_(\d+)$")

# Utopia of the default benchmark, from 600-step single-objective runs
# (best 50-step mean of each specialist, seed 0).
DEFAULT_UTOPIA = (0.94, 0.0436, 0.048, 0.0412)


@dataclass(frozen=True)
class RunConfig:
    mode: str = "apex"
    seed: int = 0
    G: int = 24
    B: int = 4
    T: int = 10
    steps: int = 600
    tau: float = 1.0
    gamma: float = 0.8
    eps: float = 1e-8
    eps_clip: float = 0.2
    beta_kl: float = 0.01
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    a: float = 0.7
    clamp_delta: float = 0.05
    d: int = 2
    features: int = 64
    feature_seed: int = 0
    contexts_n: int = 16
    contexts_spread: float = 0.2
    contexts_seed: int = 123
    microbatch_size: int = 8
    scheduler_every: int = 1
    minibatches: int = 1
    utopia_source: str = "configured"
    utopia_values: tuple[float, ...] = DEFAULT_UTOPIA
    utopia_runs: tuple[str, ...] = ()
    hv_window: int = 50
    hv_reference: str = "initial"          # "initial" or comma-separated values
    hv_reference_samples: int = 64
    checkpoint_every: int = 100
    log_timing: bool = False
    rewards: tuple[RewardSpec, ...] = field(default_factory=lambda: tuple(default_benchmark_specs()))

    def __post_init__(self):
        if self.mode not in MODES and not _SPECIALIST.match(self.mode):
            raise ConfigError(f"unknown mode {self.mode!r}")
        k = self.specialist_target
        if k is not None and k >= self.K:
            raise ConfigError(f"{self.mode} needs objective {k} but K = {self.K}")
        if self.K < 2:
            raise ConfigError("at least two reward objectives are required")
        for name in ("G", "B", "T", "steps", "d", "features", "contexts_n", "microbatch_size",
                     "scheduler_every", "minibatches", "hv_window", "checkpoint_every",
                     "hv_reference_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.G < 2 or self.microbatch_size < 2:
            raise ConfigError("groups and scheduler micro-batches need at least two rollouts")
        for name in ("tau", "eps", "lr", "a", "adam_eps"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive and finite")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0 < self.clamp_delta < 0.5:
            raise ConfigError("clamp_delta must lie in (0, 0.5)")
        if self.utopia_source not in ("configured", "specialist_run"):
            raise ConfigError(f"unknown utopia source {self.utopia_source!r}")
        if self.utopia_source == "configured" and len(self.utopia_values) != self.K:
            raise ConfigError(f"{len(self.utopia_values)} utopia values for K = {self.K}")
        if self.utopia_source == "specialist_run" and len(self.utopia_runs) != self.K:
            raise ConfigError("specialist utopia needs one run directory per objective")
        if self.hv_reference != "initial":
            ref = _floats(self.hv_reference, "hv.reference")
            if len(ref) != self.K:
                raise ConfigError("hv.reference must have K values")

    @property
    def K(self) -> int:
        return len(self.rewards)

    @property
    def specialist_target(self) -> int | None:
        m = _SPECIALIST.match(self.mode)
        return int(m.group(1)) if m else None

    @property
    def divisors(self) -> tuple[float, ...]:
        return tuple(s.r_max for s in self.rewards)


# ---------------------------------------------------------------------------
# text format

_KEYS = {f.name.replace("_", ".", 1) if f.name.startswith(("contexts_", "utopia_", "hv_",
                                                              "adam_", "log_")) else f.name: f.name
         for f in fields(RunConfig) if f.name != "rewards"}
_VECTOR_PARAMS = ("center", "direction", "axis", "offset")


def _floats(text: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


def _coerce(name: str, text: str):
    default = RunConfig.__dataclass_fields__[name].default
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None
    if name == "utopia_values":
        return _floats(text, name)
    if name == "utopia_runs":
        return tuple(s.strip() for s in text.split(",") if s.strip())
    return text


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "tolist"):
        return _format_value(v.tolist())
    return str(v)


def parse_config_text(text: str) -> RunConfig:
    values: dict[str, object] = {}
    reward_fields: dict[int, dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        m = re.fullmatch(r"reward\.(\d+)\.(\w+)", key)
        if m:
            reward_fields.setdefault(int(m.group(1)), {})[m.group(2)] = val
            continue
        if key == "K":
            values["_K"] = int(val)
            continue
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[_KEYS[key]] = _coerce(_KEYS[key], val)
    K = values.pop("_K", None)
    if reward_fields:
        if sorted(reward_fields) != list(range(len(reward_fields))):
            raise ConfigError("reward indices must be 0..K-1 without gaps")
        values["rewards"] = tuple(_reward_from_fields(i, reward_fields[i])
                                  for i in range(len(reward_fields)))
    cfg = RunConfig(**values)
    if K is not None and K != cfg.K:
        raise ConfigError(f"K = {K} but {cfg.K} reward specs are declared")
    return cfg


def _reward_from_fields(i: int, f: dict[str, str]) -> RewardSpec:
    f = dict(f)
    try:
        kind = f.pop("kind")
    except KeyError:
        raise ConfigError(f"reward.{i}.kind is required") from None
    name = f.pop("name", "")
    r_max = float(f.pop("r_max", "1.0"))
    params = {}
    for k, v in f.items():
        vals = _floats(v, f"reward.{i}.{k}")
        params[k] = vals if k in _VECTOR_PARAMS else vals[0]
    return RewardSpec(kind, params, r_max, name)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text)


def format_config(cfg: RunConfig) -> str:
    inv = {v: k for k, v in _KEYS.items()}
    lines = ["# apexlab run configuration (all values, including defaults)"]
    for f in fields(RunConfig):
        if f.name == "rewards":
            continue
        lines.append(f"{inv[f.name]} = {_format_value(getattr(cfg, f.name))}")
    lines.append(f"K = {cfg.K}")
    for i, spec in enumerate(cfg.rewards):
        lines.append(f"reward.{i}.kind = {spec.kind}")
        lines.append(f"reward.{i}.name = {spec.name}")
        lines.append(f"reward.{i}.r_max = {_format_value(float(spec.r_max))}")
        for k in sorted(spec.params):
            lines.append(f"reward.{i}.{k} = {_format_value(spec.params[k])}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
