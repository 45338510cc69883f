"""Two-stage gated rehearsal: fine-tune, decompose the weight deltas, then
train per-direction gates on new data plus memory.

Stage 1 is plain fine-tuning on the new task (the memory is never touched).
Stage 2 decomposes each linear layer's delta W_tilde - W_prev into singular
triplets and learns a gate per rank-one direction; the effective weight is

    W = W_prev + U diag(g * s) V^T

where g is the sigmoid of a trainable vector alpha (one scalar per singular
direction by default; ablation modes use an unconstrained gate, a single
scalar per layer, or one global scalar). All other parameters are frozen at
the average of their old and fine-tuned values. Only the alphas train in
stage 2, against the new-task loss plus a memory term whose weight scales
with the number of previous tasks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .errors import EmptyMemory, InvalidConfig, ShapeError
from .linalg import svd
from .memory import MemoryBuffer, sample_memory
from .nnet import Batch, ForwardOut, LossTerm, ParamSet
from .serialize import read_container, write_container
from .taskgen import TaskData

GATE_SIGMOID = "sigmoid"
GATE_UNCONSTRAINED = "unconstrained"
GATE_SCALAR_PER_LAYER = "scalar_per_layer"
GATE_GLOBAL_ETA = "global_eta"
GATE_MODES = (GATE_SIGMOID, GATE_UNCONSTRAINED, GATE_SCALAR_PER_LAYER, GATE_GLOBAL_ETA)

OTHERS_AVERAGE = "average"
OTHERS_OLD = "old"
OTHERS_NEW = "new"
OTHERS_MODES = (OTHERS_AVERAGE, OTHERS_OLD, OTHERS_NEW)

MEM_TERM_SETS = ("ce+kd", "ce", "kd")

# Stream indices for deriving named Philox substreams from one seed.
_STREAM_STAGE1 = 1
_STREAM_STAGE2 = 2
_STREAM_MEMORY = 3


@dataclass(frozen=True)
class SvrConfig:
    stage1_epochs: int = 10
    stage1_lr: float = 1e-4
    stage2_epochs: int = 3
    stage2_lr: float = 1e-2
    alpha_init: float = -4.0
    reg_scale_with_t: bool = True
    mem_loss_terms: str = "ce+kd"
    mem_loss_scale: float = 1.0
    c: float = 0.3
    batch_size: int = 64
    gate_mode: str = GATE_SIGMOID
    others_mode: str = OTHERS_AVERAGE

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise InvalidConfig("epoch counts must be >= 1")
        if self.stage1_lr < 0 or self.stage2_lr < 0:
            raise InvalidConfig("learning rates must be >= 0")
        if self.mem_loss_terms not in MEM_TERM_SETS:
            raise InvalidConfig(f"mem_loss_terms must be one of {MEM_TERM_SETS}")
        if self.gate_mode not in GATE_MODES:
            raise InvalidConfig(f"gate_mode must be one of {GATE_MODES}")
        if self.others_mode not in OTHERS_MODES:
            raise InvalidConfig(f"others_mode must be one of {OTHERS_MODES}")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class GatedLayer:
    """Frozen (w_prev, u, s, v) for one linear layer plus its gate parameters.

    alpha is None in global-eta mode, where a single model-wide parameter
    on the GatedModel replaces the per-layer vectors.
    """

    w_prev: np.ndarray
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    alpha: np.ndarray | None

    @property
    def k(self) -> int:
        return self.s.shape[0]


@dataclass
class GatedModel:
    layers: list
    frozen_biases: list
    groups: tuple
    gate_mode: str
    global_alpha: np.ndarray | None = None

    def gates(self, i: int) -> np.ndarray:
        layer = self.layers[i]
        if self.gate_mode == GATE_SIGMOID:
            return _sigmoid(layer.alpha)
        if self.gate_mode == GATE_UNCONSTRAINED:
            return layer.alpha.copy()
        if self.gate_mode == GATE_SCALAR_PER_LAYER:
            return np.full(layer.k, _sigmoid(layer.alpha[0]))
        return np.full(layer.k, _sigmoid(self.global_alpha[0]))

    def trainable_alphas(self) -> list:
        if self.gate_mode == GATE_GLOBAL_ETA:
            return [self.global_alpha]
        return [layer.alpha for layer in self.layers]

    def set_alphas(self, arrays):
        if self.gate_mode == GATE_GLOBAL_ETA:
            self.global_alpha = arrays[0]
            return
        for layer, a in zip(self.layers, arrays):
            layer.alpha = a

    def trainable_count(self) -> int:
        return sum(a.size for a in self.trainable_alphas())


def fine_tune(theta_prev: ParamSet, task: TaskData, cfg: SvrConfig, seed: int = 0) -> ParamSet:
    """Stage 1: Adam on the supervised loss over the task's training set.

    The rehearsal memory plays no part here; the optimizer state is fresh.
    """
    if task.train.n < 1:
        raise InvalidConfig("cannot fine-tune on an empty training set")
    rng = np.random.Generator(np.random.Philox(key=[seed, _STREAM_STAGE1]))
    return nnet.train_loop(
        theta_prev, task.train,
        epochs=cfg.stage1_epochs, lr=cfg.stage1_lr, batch_size=cfg.batch_size,
        shuffle_rng=rng,
        term_builder=lambda batch: [LossTerm(batch, 1.0, "ce", cfg.c)])


def prepare_gated(theta_prev: ParamSet, theta_tilde: ParamSet, cfg: SvrConfig) -> GatedModel:
    """Stage 2a: decompose per-layer deltas and attach gate parameters.

    Gates start at cfg.alpha_init (sigmoid modes) so the effective weights
    begin close to theta_prev; non-gated parameters are frozen at the
    old/new average (or at the old or new values under ablation).
    """
    theta_prev.check_same_shapes(theta_tilde)
    layers = []
    for w_prev, w_tilde in zip(theta_prev.weights, theta_tilde.weights):
        fac = svd(w_tilde - w_prev)
        k = fac.k
        if cfg.gate_mode == GATE_SIGMOID:
            alpha = np.full(k, float(cfg.alpha_init))
        elif cfg.gate_mode == GATE_UNCONSTRAINED:
            alpha = np.zeros(k)
        elif cfg.gate_mode == GATE_SCALAR_PER_LAYER:
            alpha = np.array([float(cfg.alpha_init)])
        else:
            alpha = None
        layers.append(GatedLayer(w_prev.copy(), fac.u, fac.s.copy(), fac.v, alpha))
    if cfg.others_mode == OTHERS_AVERAGE:
        biases = [(bp + bt) / 2.0 for bp, bt in zip(theta_prev.biases, theta_tilde.biases)]
    elif cfg.others_mode == OTHERS_OLD:
        biases = [bp.copy() for bp in theta_prev.biases]
    else:
        biases = [bt.copy() for bt in theta_tilde.biases]
    global_alpha = np.array([float(cfg.alpha_init)]) if cfg.gate_mode == GATE_GLOBAL_ETA else None
    return GatedModel(layers, biases, theta_prev.groups, cfg.gate_mode, global_alpha)


def effective_weights(gm: GatedModel, forced_gate: float | None = None) -> ParamSet:
    """Materialize W_prev + U diag(g * s) V^T per layer; biases stay frozen.

    forced_gate overrides every gate with a constant (0 recovers the previous
    weights, 1 the fine-tuned weights, 0.5 the midpoint average).
    """
    weights = []
    for i, layer in enumerate(gm.layers):
        g = np.full(layer.k, forced_gate) if forced_gate is not None else gm.gates(i)
        weights.append(layer.w_prev + (layer.u * (g * layer.s)) @ layer.v.T)
    return ParamSet(weights, [b.copy() for b in gm.frozen_biases], gm.groups)


def memory_weight(t: int, cfg: SvrConfig) -> float:
    """Weight of the memory loss: (t-1)/2 by default, 1/2 when unscaled."""
    if t < 2:
        raise InvalidConfig("adaptation requires t >= 2")
    base = (t - 1) / 2.0 if cfg.reg_scale_with_t else 0.5
    return base * cfg.mem_loss_scale


def stage2_terms(new_batch: Batch, mem_batch: Batch, teacher_out: ForwardOut,
                 t: int, cfg: SvrConfig) -> list:
    w = memory_weight(t, cfg)
    terms = [LossTerm(new_batch, 1.0, "ce", cfg.c)]
    if "ce" in cfg.mem_loss_terms:
        terms.append(LossTerm(mem_batch, w, "ce", cfg.c))
    if "kd" in cfg.mem_loss_terms:
        terms.append(LossTerm(mem_batch, w, "kd", cfg.c, teacher_out))
    return terms


def stage2_loss(gm: GatedModel, new_batch: Batch, mem_batch: Batch,
                teacher: ParamSet, t: int, cfg: SvrConfig) -> float:
    """Joint loss of one stage-2 step: new-task term plus weighted memory terms."""
    teacher_out = nnet.forward(teacher, mem_batch)
    params = effective_weights(gm)
    return nnet.loss_value(params, stage2_terms(new_batch, mem_batch, teacher_out, t, cfg))


def grad_alpha(gm: GatedModel, weight_grads) -> list:
    """Chain dL/dW into the gate parameters: dL/d(alpha_i) passes through the
    gate derivative times s_i u_i^T (dL/dW) v_i; everything else is frozen."""
    if len(weight_grads) != len(gm.layers):
        raise ShapeError("one weight gradient per gated layer is required")
    per_layer = []
    for layer, g_w in zip(gm.layers, weight_grads):
        if g_w.shape != layer.w_prev.shape:
            raise ShapeError(f"gradient shape {g_w.shape} != weight {layer.w_prev.shape}")
        per_layer.append(layer.s * np.sum(layer.u * (g_w @ layer.v), axis=0))
    if gm.gate_mode == GATE_SIGMOID:
        out = []
        for layer, raw in zip(gm.layers, per_layer):
            sig = _sigmoid(layer.alpha)
            out.append(sig * (1.0 - sig) * raw)
        return out
    if gm.gate_mode == GATE_UNCONSTRAINED:
        return per_layer
    if gm.gate_mode == GATE_SCALAR_PER_LAYER:
        out = []
        for layer, raw in zip(gm.layers, per_layer):
            sig = _sigmoid(layer.alpha[0])
            out.append(np.array([sig * (1.0 - sig) * raw.sum()]))
        return out
    sig = _sigmoid(gm.global_alpha[0])
    total = sum(raw.sum() for raw in per_layer)
    return [np.array([sig * (1.0 - sig) * total])]


def stage2_train(gm: GatedModel, task: TaskData, buffer: MemoryBuffer,
                 teacher: ParamSet, t: int, cfg: SvrConfig, seed: int) -> GatedModel:
    """Stage 2b: Adam on the gate parameters only, fresh optimizer state.

    One memory mini-batch is drawn per new-task mini-batch; iteration order
    over the new task is a seeded shuffle. A zero memory weight skips the
    memory terms (and their sampling) entirely.
    """
    shuffle_rng = np.random.Generator(np.random.Philox(key=[seed, _STREAM_STAGE2]))
    mem_rng = np.random.Generator(np.random.Philox(key=[seed, _STREAM_MEMORY]))
    w_mem = memory_weight(t, cfg)
    if w_mem != 0.0 and len(buffer) == 0:
        raise EmptyMemory("stage 2 needs a non-empty memory")
    alphas = gm.trainable_alphas()
    state = nnet.adam_init(alphas, cfg.stage2_lr)
    for _ in range(cfg.stage2_epochs):
        for new_batch in nnet.minibatches(task.train, cfg.batch_size, shuffle_rng):
            if w_mem != 0.0:
                mem_batch = sample_memory(buffer, cfg.batch_size, mem_rng)
                teacher_out = nnet.forward(teacher, mem_batch)
                terms = stage2_terms(new_batch, mem_batch, teacher_out, t, cfg)
            else:
                terms = [LossTerm(new_batch, 1.0, "ce", cfg.c)]
            params = effective_weights(gm)
            _, grads = nnet.backward(params, terms)
            alphas = nnet.adam_step(alphas, grad_alpha(gm, grads.weights), state)
            gm.set_alphas(alphas)
    return gm


def svr_adapt(theta_prev: ParamSet, task: TaskData, buffer: MemoryBuffer,
              t: int, cfg: SvrConfig, seed: int = 0) -> tuple[ParamSet, GatedModel]:
    """Full adaptation to task t: stage 1, gate construction, stage 2.

    Returns the materialized parameters and the trained gated model (whose
    gate vectors feed the gating statistics). The caller updates the memory
    afterwards.
    """
    if t < 2:
        raise InvalidConfig("adaptation requires t >= 2")
    theta_tilde = fine_tune(theta_prev, task, cfg, seed)
    gm = prepare_gated(theta_prev, theta_tilde, cfg)
    gm = stage2_train(gm, task, buffer, theta_prev, t, cfg, seed)
    return effective_weights(gm), gm


def save_checkpoint(path, params: ParamSet, gm: GatedModel | None = None):
    """Model snapshot; includes gate state when a gated model is given."""
    arrays = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"weight{i}"] = w.astype("<f8")
        arrays[f"bias{i}"] = b.astype("<f8")
    meta = {"kind": "checkpoint", "groups": list(params.groups), "gate_mode": None}
    if gm is not None:
        meta["gate_mode"] = gm.gate_mode
        for i, a in enumerate(gm.trainable_alphas()):
            arrays[f"alpha{i}"] = a.astype("<f8")
    write_container(path, arrays, meta)


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    arrays, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise InvalidConfig(f"{path}: not a checkpoint file")
    groups = tuple(meta["groups"])
    weights = [arrays[f"weight{i}"] for i in range(len(groups))]
    biases = [arrays[f"bias{i}"] for i in range(len(groups))]
    alphas = []
    i = 0
    while f"alpha{i}" in arrays:
        alphas.append(arrays[f"alpha{i}"])
        i += 1
    extra = {"gate_mode": meta.get("gate_mode"), "alphas": alphas}
    return ParamSet(weights, biases, groups), extra
