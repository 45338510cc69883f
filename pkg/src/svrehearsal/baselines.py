"""Comparison methods: replay, distillation, teacher-on-new-data
distillation, parameter averaging, and the per-task separate-model bound.

All adapt operations are pure with respect to theta_prev and deterministic
given their seed. Replay-style methods draw one memory mini-batch per
new-task mini-batch; a regularization weight of zero makes their trajectory
bit-identical to plain fine-tuning under the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, nnet
from .errors import EmptyMemory, InvalidConfig, ShapeError
from .memory import MemoryBuffer, sample_memory
from .nnet import LossTerm, ParamSet
from .svr import _STREAM_MEMORY, _STREAM_STAGE1, SvrConfig, fine_tune
from .taskgen import TaskData

METHOD_FINETUNE = "finetune"
METHOD_SEP_MODEL = "sep_model"
METHOD_ER = "er"
METHOD_KD = "kd"
METHOD_LWF = "lwf"
METHOD_FTA = "fta"

LAMBDA_GRID = (0.1, 1.0)


@dataclass(frozen=True)
class BaselineConfig:
    method: str
    lam: float = 0.1
    epochs: int = 10
    lr: float = 1e-4
    c: float = 0.3
    batch_size: int = 64
    mem_loss: str = "ce"  # "ce" (replay), "kd", or "ce+kd" (combined at half weight each)

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidConfig("lambda must be >= 0")
        if self.mem_loss not in ("ce", "kd", "ce+kd"):
            raise InvalidConfig(f"unknown mem_loss {self.mem_loss!r}")

    def as_svr_stage1(self) -> SvrConfig:
        return SvrConfig(stage1_epochs=self.epochs, stage1_lr=self.lr,
                         c=self.c, batch_size=self.batch_size)


def _rehearsal_adapt(theta_prev: ParamSet, task: TaskData, buffer: MemoryBuffer,
                     cfg: BaselineConfig, seed: int, mem_loss: str) -> ParamSet:
    if cfg.lam > 0 and len(buffer) == 0:
        raise EmptyMemory("rehearsal baseline needs a non-empty memory")
    shuffle_rng = np.random.Generator(np.random.Philox(key=[seed, _STREAM_STAGE1]))
    mem_rng = np.random.Generator(np.random.Philox(key=[seed, _STREAM_MEMORY]))

    def build_terms(batch):
        terms = [LossTerm(batch, 1.0, "ce", cfg.c)]
        if cfg.lam > 0:
            mem_batch = sample_memory(buffer, cfg.batch_size, mem_rng)
            if mem_loss == "ce":
                terms.append(LossTerm(mem_batch, cfg.lam, "ce", cfg.c))
            elif mem_loss == "kd":
                teacher_out = nnet.forward(theta_prev, mem_batch)
                terms.append(LossTerm(mem_batch, cfg.lam, "kd", cfg.c, teacher_out))
            else:
                teacher_out = nnet.forward(theta_prev, mem_batch)
                terms.append(LossTerm(mem_batch, 0.5 * cfg.lam, "ce", cfg.c))
                terms.append(LossTerm(mem_batch, 0.5 * cfg.lam, "kd", cfg.c, teacher_out))
        return terms

    return nnet.train_loop(theta_prev, task.train, epochs=cfg.epochs, lr=cfg.lr,
                           batch_size=cfg.batch_size, shuffle_rng=shuffle_rng,
                           term_builder=build_terms)


def er_adapt(theta_prev, task, buffer, cfg: BaselineConfig, seed: int = 0) -> ParamSet:
    """Joint training on new-task and memory mini-batches (replay loss on both)."""
    return _rehearsal_adapt(theta_prev, task, buffer, cfg, seed, cfg.mem_loss)


def kd_adapt(theta_prev, task, buffer, cfg: BaselineConfig, seed: int = 0) -> ParamSet:
    """Like replay, but the memory mini-batch uses the distillation loss
    against theta_prev instead of cross-entropy."""
    return _rehearsal_adapt(theta_prev, task, buffer, cfg, seed, "kd")


def lwf_adapt(theta_prev, task, cfg: BaselineConfig, seed: int = 0) -> ParamSet:
    """Memory-free: distillation from theta_prev on the new task's own data."""
    shuffle_rng = np.random.Generator(np.random.Philox(key=[seed, _STREAM_STAGE1]))

    def build_terms(batch):
        terms = [LossTerm(batch, 1.0, "ce", cfg.c)]
        if cfg.lam > 0:
            teacher_out = nnet.forward(theta_prev, batch)
            terms.append(LossTerm(batch, cfg.lam, "kd", cfg.c, teacher_out))
        return terms

    return nnet.train_loop(theta_prev, task.train, epochs=cfg.epochs, lr=cfg.lr,
                           batch_size=cfg.batch_size, shuffle_rng=shuffle_rng,
                           term_builder=build_terms)


def fta_merge(theta_prev: ParamSet, theta_tilde: ParamSet, t: int) -> ParamSet:
    """Convex combination (1 - eta) * theta_prev + eta * theta_tilde, eta = 1/t."""
    if t < 1:
        raise InvalidConfig("task index must be >= 1")
    theta_prev.check_same_shapes(theta_tilde)
    if t == 1:
        return theta_tilde.copy()
    eta = 1.0 / t
    # lerp form: exactly idempotent when both parameter sets coincide
    arrays = [p + eta * (q - p)
              for p, q in zip(theta_prev.flat(), theta_tilde.flat())]
    return ParamSet.from_flat(arrays, theta_prev.groups)


def fta_adapt(theta_prev, task, cfg: BaselineConfig, t: int, seed: int = 0) -> ParamSet:
    theta_tilde = fine_tune(theta_prev, task, cfg.as_svr_stage1(), seed)
    return fta_merge(theta_prev, theta_tilde, t)


def sep_model_eval(per_task_models, tasks) -> metrics.RunRecord:
    """Evaluate model k on task k; zero forgetting by construction."""
    if len(per_task_models) != len(tasks):
        raise InvalidConfig(
            f"{len(per_task_models)} models for {len(tasks)} tasks")
    n = len(tasks)
    r = np.full((n, n), np.nan)
    per_example = []
    for k, (model, (_, data)) in enumerate(zip(per_task_models, tasks)):
        err, indicators = metrics.evaluate(model, data)
        per_example.append(indicators)
        for row in range(k, n):
            r[row, k] = err
    return metrics.RunRecord(n_tasks=n, r=r, per_example_errors=per_example)
