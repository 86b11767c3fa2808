"""Run configuration: one strict JSON document for a whole experiment.

Unknown keys are rejected at every level so a typo fails loudly instead
of silently training with a default. parse -> serialize -> parse is an
identity on the structured config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .adapter import AdapterSpec, AdapterSpecError
from .dmrg import RankSchedule, ScheduleError
from .model import ModelConfig
from .training import OptimizerConfig

DEFAULT_SEEDS = (33305628, 2025, 42)


class ConfigError(ValueError):
    """Config document is malformed."""


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "teacher_regression"
    delta_rank: int = 4
    delta_scale: float = 0.1
    n_train: int = 256
    n_eval: int = 128
    num_tasks: int = 1

    def __post_init__(self):
        if self.kind not in ("teacher_regression", "teacher_classification"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.delta_rank < 1 or self.n_train < 1 or self.n_eval < 1 or self.num_tasks < 1:
            raise ConfigError("delta_rank, n_train, n_eval and num_tasks must be positive")
        if self.delta_scale < 0:
            raise ConfigError(f"delta_scale must be nonnegative, got {self.delta_scale}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    adapter: AdapterSpec
    task: TaskConfig
    optimizer: OptimizerConfig
    epochs: int
    schedule: RankSchedule = None
    seeds: tuple = DEFAULT_SEEDS
    out_dir: str = "runs"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


def _checked(section, mapping, allowed) -> dict:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{section} must be a JSON object, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(unknown)}")
    return mapping


_MODEL_KEYS = ("num_layers", "hidden_dim", "num_heads", "ffn_dim",
               "vocab_size", "max_seq_len", "out_dim", "seed")
_ADAPTER_KEYS = ("variant", "d_in", "d_out", "num_layers", "target_modules",
                 "bond_ranks", "alpha", "num_heads", "num_tasks", "init_strategy")
_TASK_KEYS = ("kind", "delta_rank", "delta_scale", "n_train", "n_eval", "num_tasks")
_OPT_KEYS = ("learning_rate", "betas", "epsilon", "weight_decay",
             "warmup_ratio", "clip_max_norm", "batch_size")
_TOP_KEYS = ("model", "adapter", "task", "optimizer", "epochs",
             "schedule", "seeds", "out_dir")


def _tupled(mapping: dict, *keys) -> dict:
    out = dict(mapping)
    for key in keys:
        if key in out and isinstance(out[key], list):
            out[key] = tuple(out[key])
    return out


def _parse_schedule(raw):
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise ConfigError(f"schedule must be a list of entries, got {type(raw).__name__}")
    entries = []
    for entry in raw:
        _checked("schedule entry", entry, ("epoch", "ranks"))
        if "epoch" not in entry or "ranks" not in entry:
            raise ConfigError(f"schedule entry needs epoch and ranks, got {sorted(entry)}")
        ranks = entry["ranks"]
        entries.append((entry["epoch"], tuple(ranks) if isinstance(ranks, list) else ranks))
    return RankSchedule(entries=tuple(entries))


def parse_config(text: str) -> RunConfig:
    """Parse a JSON config document; any structural problem is a ConfigError."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    _checked("config", raw, _TOP_KEYS)
    for key in ("model", "adapter", "optimizer", "epochs"):
        if key not in raw:
            raise ConfigError(f"config is missing required key {key!r}")
    try:
        model = ModelConfig(**_checked("model", raw["model"], _MODEL_KEYS))
        adapter = AdapterSpec(**_tupled(
            _checked("adapter", raw["adapter"], _ADAPTER_KEYS), "target_modules", "bond_ranks"))
        task = TaskConfig(**_checked("task", raw.get("task", {}), _TASK_KEYS))
        optimizer = OptimizerConfig(**_tupled(
            _checked("optimizer", raw["optimizer"], _OPT_KEYS), "betas"))
        schedule = _parse_schedule(raw.get("schedule"))
        return RunConfig(
            model=model, adapter=adapter, task=task, optimizer=optimizer,
            epochs=raw["epochs"], schedule=schedule,
            seeds=tuple(raw.get("seeds", DEFAULT_SEEDS)),
            out_dir=raw.get("out_dir", "runs"))
    except (AdapterSpecError, ScheduleError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def serialize_config(cfg: RunConfig) -> str:
    """Emit the JSON form; parse(serialize(cfg)) equals cfg."""
    doc = {
        "model": {
            "num_layers": cfg.model.num_layers, "hidden_dim": cfg.model.hidden_dim,
            "num_heads": cfg.model.num_heads, "ffn_dim": cfg.model.ffn_dim,
            "vocab_size": cfg.model.vocab_size, "max_seq_len": cfg.model.max_seq_len,
            "out_dim": cfg.model.out_dim, "seed": cfg.model.seed,
        },
        "adapter": {
            "variant": cfg.adapter.variant, "d_in": cfg.adapter.d_in,
            "d_out": cfg.adapter.d_out, "num_layers": cfg.adapter.num_layers,
            "target_modules": list(cfg.adapter.target_modules),
            "bond_ranks": list(cfg.adapter.bond_ranks), "alpha": cfg.adapter.alpha,
            "num_heads": cfg.adapter.num_heads, "num_tasks": cfg.adapter.num_tasks,
            "init_strategy": cfg.adapter.init_strategy,
        },
        "task": {
            "kind": cfg.task.kind, "delta_rank": cfg.task.delta_rank,
            "delta_scale": cfg.task.delta_scale, "n_train": cfg.task.n_train,
            "n_eval": cfg.task.n_eval, "num_tasks": cfg.task.num_tasks,
        },
        "optimizer": {
            "learning_rate": cfg.optimizer.learning_rate,
            "betas": list(cfg.optimizer.betas), "epsilon": cfg.optimizer.epsilon,
            "weight_decay": cfg.optimizer.weight_decay,
            "warmup_ratio": cfg.optimizer.warmup_ratio,
            "clip_max_norm": cfg.optimizer.clip_max_norm,
            "batch_size": cfg.optimizer.batch_size,
        },
        "epochs": cfg.epochs,
        "schedule": None if cfg.schedule is None else [
            {"epoch": e, "ranks": list(r)} for e, r in cfg.schedule.entries
        ],
        "seeds": list(cfg.seeds),
        "out_dir": cfg.out_dir,
    }
    return json.dumps(doc, indent=2) + "\n"
