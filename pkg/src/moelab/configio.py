"""TOML config loading with strict schema validation and --set overrides.

Dotted keys address nested sections (`moe.n_experts`). Unknown sections or
keys are errors naming the offending key; every field not present falls back
to the dataclass default, and the fully resolved mapping is returned for the
run manifest so a run is reproducible from the manifest alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import tomli

from .errors import ConfigError
from .experts import validate_policy
from .losses import LossConfig
from .routing import MoEConfig
from .synthetic import TaskConfig, TrainerConfig

__all__ = ["ResolvedConfig", "load_config", "parse_config_dict", "apply_overrides"]

# The [task] generator dims are injected from [moe] so the two can never
# disagree; explicit task.d / task.d_g are accepted (manifests echo them)
# but must match the [moe] values.
_TASK_KEYS = tuple(f.name for f in fields(TaskConfig) if f.name not in ("d", "d_g"))

_SCHEMA = {
    "moe": tuple(f.name for f in fields(MoEConfig)),
    "loss": tuple(f.name for f in fields(LossConfig)),
    "train": tuple(f.name for f in fields(TrainerConfig)),
    "task": _TASK_KEYS + ("d", "d_g"),
    "sweep": ("k_values", "latency_batches", "warmup"),
}
_ROOT_KEYS = ("policy",)

_SWEEP_DEFAULTS = {"k_values": [1, 2, 4], "latency_batches": 30, "warmup": 5}


@dataclass
class ResolvedConfig:
    policy: str
    moe: MoEConfig
    loss: LossConfig
    train: TrainerConfig
    task: TaskConfig
    sweep: dict

    def resolved_dict(self) -> dict:
        """Fully resolved mapping (defaults filled in), manifest-ready."""

        def section(obj, keys):
            out = {}
            for k in keys:
                v = getattr(obj, k)
                if k == "route_to_experts":
                    v = [list(r) for r in v]
                out[k] = v
            return out

        return {
            "policy": self.policy,
            "moe": section(self.moe, _SCHEMA["moe"]),
            "loss": section(self.loss, _SCHEMA["loss"]),
            "train": section(self.train, _SCHEMA["train"]),
            "task": section(self.task, ("d", "d_g") + _TASK_KEYS),
            "sweep": dict(self.sweep),
        }


def _check_keys(raw: dict) -> None:
    for key, val in raw.items():
        if key in _ROOT_KEYS:
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config section or key: {key!r}")
        if not isinstance(val, dict):
            raise ConfigError(f"config section {key!r} must be a table")
        for sub in val:
            if sub not in _SCHEMA[key]:
                raise ConfigError(f"unknown config key: {key}.{sub}")


def parse_config_dict(raw: dict) -> ResolvedConfig:
    """Build validated config objects from a raw nested mapping."""
    _check_keys(raw)
    moe_kw = dict(raw.get("moe", {}))
    if "route_to_experts" in moe_kw and moe_kw["route_to_experts"] is not None:
        moe_kw["route_to_experts"] = tuple(tuple(r) for r in moe_kw["route_to_experts"])
    task_kw = dict(raw.get("task", {}))
    explicit_dims = {dim: task_kw.pop(dim) for dim in ("d", "d_g") if dim in task_kw}
    try:
        moe = MoEConfig(**moe_kw)
        loss = LossConfig(**raw.get("loss", {}))
        trainer = TrainerConfig(**raw.get("train", {}))
        task = TaskConfig(d=moe.d, d_g=moe.d_g, **task_kw)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    for dim, value in explicit_dims.items():
        if value != getattr(moe, dim):
            raise ConfigError(
                f"task.{dim}={value} conflicts with moe.{dim}={getattr(moe, dim)}"
            )
    policy = validate_policy(raw.get("policy", "hierarchical"))
    sweep = {**_SWEEP_DEFAULTS, **raw.get("sweep", {})}
    ks = sweep["k_values"]
    if not isinstance(ks, list) or not ks or not all(
        isinstance(k, int) and not isinstance(k, bool) for k in ks
    ):
        raise ConfigError(f"sweep.k_values must be a non-empty list of integers, got {ks!r}")
    return ResolvedConfig(policy=policy, moe=moe, loss=loss, train=trainer, task=task, sweep=sweep)


def _parse_override_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text  # bare string override, e.g. --set policy=dense


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply repeatable --set key=value entries onto the raw mapping."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        key = key.strip()
        parts = key.split(".")
        if len(parts) == 1:
            raw[parts[0]] = _parse_override_value(value)
        elif len(parts) == 2:
            raw.setdefault(parts[0], {})
            if not isinstance(raw[parts[0]], dict):
                raise ConfigError(f"override {key!r} addresses a non-table section")
            raw[parts[0]][parts[1]] = _parse_override_value(value)
        else:
            raise ConfigError(f"override key {key!r} has more than one dot")
    return raw


def load_config(path, overrides=(), seed: int | None = None) -> ResolvedConfig:
    """Read a TOML config, apply overrides (and the --seed shortcut)."""
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw.setdefault("train", {})["seed"] = int(seed)
    return parse_config_dict(raw)
