"""Experiment configuration: JSON in, validated dataclasses out.

Every field has a default; unknown keys are rejected with the offending
field path so config typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .errors import InvalidConfig
from .svr import GATE_MODES, MEM_TERM_SETS, OTHERS_MODES, SvrConfig

METHODS = ("svr", "finetune", "sep_model", "er", "kd", "lwf", "fta")
MEMORY_POLICIES = ("fixed", "increasing", "none")
REHEARSAL_METHODS = ("svr", "er", "kd")


@dataclass(frozen=True)
class BenchmarkSpec:
    n_tasks: int = 4
    drift: float = 0.4
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    n_groups: int = 1
    seeds: tuple = (1, 2, 3, 4, 5)
    task1_epochs: int = 40
    task1_lr: float = 1e-3

    def validate(self):
        if self.n_tasks < 2:
            raise InvalidConfig("benchmark.n_tasks: must be >= 2")
        if self.drift < 0:
            raise InvalidConfig("benchmark.drift: must be >= 0")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise InvalidConfig("benchmark: split sizes must be positive")
        if self.n_groups < 1:
            raise InvalidConfig("benchmark.n_groups: must be >= 1")
        if not self.seeds:
            raise InvalidConfig("benchmark.seeds: need at least one seed")


@dataclass(frozen=True)
class MethodSpec:
    name: str = "svr"
    # shared training knobs
    c: float = 0.3
    batch_size: int = 64
    # baseline knobs; lam None means grid-select on the first adaptation
    lam: float | None = None
    epochs: int = 10
    lr: float = 1e-4
    mem_loss: str = "ce"
    # two-stage method knobs (mirror SvrConfig)
    stage1_epochs: int = 10
    stage1_lr: float = 1e-4
    stage2_epochs: int = 3
    stage2_lr: float = 1e-2
    alpha_init: float = -4.0
    reg_scale_with_t: bool = True
    mem_loss_terms: str = "ce+kd"
    mem_loss_scale: float = 1.0
    gate_mode: str = "sigmoid"
    others_mode: str = "average"

    def validate(self):
        if self.name not in METHODS:
            raise InvalidConfig(f"method.name: unknown method {self.name!r}")
        if self.lam is not None and self.lam < 0:
            raise InvalidConfig("method.lam: must be >= 0")
        if self.mem_loss_terms not in MEM_TERM_SETS:
            raise InvalidConfig(f"method.mem_loss_terms: one of {MEM_TERM_SETS}")
        if self.gate_mode not in GATE_MODES:
            raise InvalidConfig(f"method.gate_mode: one of {GATE_MODES}")
        if self.others_mode not in OTHERS_MODES:
            raise InvalidConfig(f"method.others_mode: one of {OTHERS_MODES}")
        if not 0.0 <= self.c <= 1.0:
            raise InvalidConfig("method.c: must be in [0, 1]")

    def svr_config(self, **overrides) -> SvrConfig:
        kw = dict(stage1_epochs=self.stage1_epochs, stage1_lr=self.stage1_lr,
                  stage2_epochs=self.stage2_epochs, stage2_lr=self.stage2_lr,
                  alpha_init=self.alpha_init, reg_scale_with_t=self.reg_scale_with_t,
                  mem_loss_terms=self.mem_loss_terms, mem_loss_scale=self.mem_loss_scale,
                  c=self.c, batch_size=self.batch_size, gate_mode=self.gate_mode,
                  others_mode=self.others_mode)
        kw.update(overrides)
        return SvrConfig(**kw)


@dataclass(frozen=True)
class MemorySpec:
    policy: str = "increasing"
    m: int = 1
    balance_groups: bool = False

    def validate(self):
        if self.policy not in MEMORY_POLICIES:
            raise InvalidConfig(f"memory.policy: one of {MEMORY_POLICIES}")
        if self.policy != "none" and self.m < 1:
            raise InvalidConfig("memory.m: must be >= 1")

    def label(self) -> str:
        if self.policy == "none":
            return "none"
        if self.policy == "increasing":
            return f"{self.m}t"
        return str(self.m)


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkSpec = BenchmarkSpec()
    method: MethodSpec = MethodSpec()
    memory: MemorySpec = MemorySpec()
    out_dir: str = "runs"
    arms: tuple | None = None  # ablation arm names; None selects the default set

    def validate(self):
        self.benchmark.validate()
        self.method.validate()
        self.memory.validate()
        if self.method.name in REHEARSAL_METHODS and self.memory.policy == "none":
            raise InvalidConfig(
                f"memory.policy: method {self.method.name!r} needs a memory")


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise InvalidConfig(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise InvalidConfig(f"{path}.{key}: unknown key")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise InvalidConfig("config root: expected an object")
    known = {"benchmark", "method", "memory", "out_dir", "arms"}
    for key in data:
        if key not in known:
            raise InvalidConfig(f"config.{key}: unknown key")
    cfg = ExperimentConfig(
        benchmark=_build(BenchmarkSpec, data.get("benchmark", {}), "benchmark"),
        method=_build(MethodSpec, data.get("method", {}), "method"),
        memory=_build(MemorySpec, data.get("memory", {}), "memory"),
        out_dir=data.get("out_dir", "runs"),
        arms=tuple(data["arms"]) if data.get("arms") else None,
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}")
    except OSError as exc:
        raise InvalidConfig(f"{path}: {exc}")
    return config_from_dict(data)


def parse_memory_flag(text: str) -> MemorySpec:
    """CLI shorthand: "none", "20" (fixed), or "1t" (per-task increasing)."""
    text = text.strip().lower()
    if text == "none":
        return MemorySpec(policy="none")
    if text.endswith("t"):
        return MemorySpec(policy="increasing", m=int(text[:-1]))
    return MemorySpec(policy="fixed", m=int(text))


def config_to_dict(cfg: ExperimentConfig, include_out_dir: bool = False) -> dict:
    data = {
        "benchmark": asdict(cfg.benchmark),
        "method": asdict(cfg.method),
        "memory": asdict(cfg.memory),
    }
    data["benchmark"]["seeds"] = list(cfg.benchmark.seeds)
    if cfg.arms:
        data["arms"] = list(cfg.arms)
    if include_out_dir:
        data["out_dir"] = cfg.out_dir
    return data
