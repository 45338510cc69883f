"""A small two-branch classifier with analytic gradients and Adam.

The model mirrors an encoder with two output heads: a per-frame head
(softmax over classes for every frame) and a sequence head (softmax over
classes on the mean-pooled encoding). Training losses combine the two
branches with weight c on the frame branch and 1-c on the sequence branch.

Everything is dense float64 numpy; forward/backward are pure functions of
(params, batch) and all reductions are means, so loss magnitudes are
comparable across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, InvalidInput, ShapeError

ENCODER = "encoder"
HEAD_CTC = "head_ctc"
HEAD_DEC = "head_dec"


@dataclass(frozen=True)
class ModelDims:
    d_in: int = 16
    d_hidden: int = 32
    n_classes: int = 4
    seq_len: int = 6


@dataclass(frozen=True)
class Batch:
    """b labeled sequences: inputs (b, l, d), frame labels (b, l), sequence labels (b,)."""

    inputs: np.ndarray
    frame_labels: np.ndarray
    seq_labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise ShapeError(f"inputs must be (b, l, d), got {self.inputs.shape}")
        b, l, _ = self.inputs.shape
        if b < 1 or l < 1:
            raise ShapeError("batch needs at least one example and one frame")
        if self.frame_labels.shape != (b, l) or self.seq_labels.shape != (b,):
            raise ShapeError("label shapes do not match inputs")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.frame_labels[idx], self.seq_labels[idx])


@dataclass(frozen=True)
class ForwardOut:
    ctc_probs: np.ndarray  # (b, l, C)
    dec_probs: np.ndarray  # (b, C)


@dataclass
class ParamSet:
    """All trainable values: linear weights (each tagged with a layer group)
    plus the remaining per-layer bias vectors."""

    weights: list
    biases: list
    groups: tuple

    def copy(self) -> "ParamSet":
        return ParamSet([w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.groups)

    def flat(self) -> list:
        return list(self.weights) + list(self.biases)

    @classmethod
    def from_flat(cls, arrays, groups) -> "ParamSet":
        n = len(groups)
        return cls(list(arrays[:n]), list(arrays[n:]), tuple(groups))

    def check_same_shapes(self, other: "ParamSet"):
        if len(self.weights) != len(other.weights) or len(self.biases) != len(other.biases):
            raise ShapeError("parameter sets have different layer counts")
        for a, b in zip(self.flat(), other.flat()):
            if a.shape != b.shape:
                raise ShapeError(f"parameter block shapes differ: {a.shape} vs {b.shape}")


def init_params(dims: ModelDims = ModelDims(), seed: int = 0) -> ParamSet:
    """Symmetric uniform init, +-sqrt(6/(fan_in+fan_out)) per layer; zero biases."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    shapes = [
        (dims.d_hidden, dims.d_in),
        (dims.d_hidden, dims.d_hidden),
        (dims.n_classes, dims.d_hidden),
        (dims.n_classes, dims.d_hidden),
    ]
    groups = (ENCODER, ENCODER, HEAD_CTC, HEAD_DEC)
    weights = []
    for d_o, d_i in shapes:
        a = np.sqrt(6.0 / (d_i + d_o))
        weights.append(rng.uniform(-a, a, size=(d_o, d_i)))
    biases = [np.zeros(s[0]) for s in shapes]
    return ParamSet(weights, biases, groups)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_batch(params: ParamSet, batch: Batch):
    w1 = params.weights[0]
    if batch.inputs.shape[2] != w1.shape[1]:
        raise ShapeError(
            f"batch frame dimension {batch.inputs.shape[2]} != model input {w1.shape[1]}")
    n_classes = params.weights[2].shape[0]
    if batch.frame_labels.min() < 0 or batch.frame_labels.max() >= n_classes:
        raise InvalidInput("frame label out of range")
    if batch.seq_labels.min() < 0 or batch.seq_labels.max() >= n_classes:
        raise InvalidInput("sequence label out of range")


def _forward_cache(params: ParamSet, batch: Batch):
    _check_batch(params, batch)
    w1, w2, wc, wd = params.weights
    b1, b2, bc, bd = params.biases
    x = batch.inputs.astype(np.float64)
    h1 = np.tanh(x @ w1.T + b1)
    h2 = np.tanh(h1 @ w2.T + b2)
    ctc_logp = _log_softmax(h2 @ wc.T + bc)
    pooled = h2.mean(axis=1)
    dec_logp = _log_softmax(pooled @ wd.T + bd)
    return {"x": x, "h1": h1, "h2": h2, "pooled": pooled,
            "ctc_logp": ctc_logp, "dec_logp": dec_logp}


def forward(params: ParamSet, batch: Batch) -> ForwardOut:
    cache = _forward_cache(params, batch)
    return ForwardOut(np.exp(cache["ctc_logp"]), np.exp(cache["dec_logp"]))


@dataclass(frozen=True)
class LossTerm:
    """One weighted component of a training loss on one mini-batch.

    kind "ce" is the branch-weighted cross-entropy against the batch labels;
    kind "kd" is the branch-weighted cross-entropy against a teacher's output
    distributions (gradient vanishes when student matches teacher).
    """

    batch: Batch
    weight: float = 1.0
    kind: str = "ce"
    c: float = 0.3
    teacher: ForwardOut | None = None

    def __post_init__(self):
        if self.kind not in ("ce", "kd"):
            raise InvalidConfig(f"unknown loss kind {self.kind!r}")
        if self.kind == "kd" and self.teacher is None:
            raise InvalidConfig("kd loss needs teacher outputs")


def _term_loss(cache, term: LossTerm) -> float:
    b, l, _ = cache["ctc_logp"].shape
    if term.kind == "ce":
        ctc = -cache["ctc_logp"][np.arange(b)[:, None], np.arange(l), term.batch.frame_labels]
        dec = -cache["dec_logp"][np.arange(b), term.batch.seq_labels]
        l_ctc, l_dec = ctc.mean(), dec.mean()
    else:
        t = term.teacher
        if t.ctc_probs.shape != cache["ctc_logp"].shape or t.dec_probs.shape != cache["dec_logp"].shape:
            raise ShapeError("teacher output shapes do not match student")
        l_ctc = -(t.ctc_probs * cache["ctc_logp"]).sum(axis=-1).mean()
        l_dec = -(t.dec_probs * cache["dec_logp"]).sum(axis=-1).mean()
    return float(term.c * l_ctc + (1.0 - term.c) * l_dec)


def _term_dlogits(cache, term: LossTerm):
    # d(loss)/d(logits) for both heads, including the mean reductions.
    b, l, n_c = cache["ctc_logp"].shape
    ctc_p = np.exp(cache["ctc_logp"])
    dec_p = np.exp(cache["dec_logp"])
    if term.kind == "ce":
        ctc_t = np.zeros_like(ctc_p)
        ctc_t[np.arange(b)[:, None], np.arange(l), term.batch.frame_labels] = 1.0
        dec_t = np.zeros_like(dec_p)
        dec_t[np.arange(b), term.batch.seq_labels] = 1.0
    else:
        ctc_t, dec_t = term.teacher.ctc_probs, term.teacher.dec_probs
    d_ctc = (ctc_p - ctc_t) * (term.c / (b * l))
    d_dec = (dec_p - dec_t) * ((1.0 - term.c) / b)
    return d_ctc, d_dec


def loss_ce(params: ParamSet, batch: Batch, c: float = 0.3) -> float:
    """Branch-weighted cross-entropy: c * frame branch + (1-c) * sequence branch."""
    return _term_loss(_forward_cache(params, batch), LossTerm(batch, 1.0, "ce", c))


def loss_kd(params: ParamSet, teacher_out: ForwardOut, batch: Batch, c: float = 0.3) -> float:
    """Distillation cross-entropy toward teacher output distributions."""
    return _term_loss(_forward_cache(params, batch),
                      LossTerm(batch, 1.0, "kd", c, teacher_out))


def loss_value(params: ParamSet, terms) -> float:
    total = 0.0
    for term in terms:
        if term.weight == 0.0:
            continue
        total += term.weight * _term_loss(_forward_cache(params, term.batch), term)
    return total


def zero_grads(params: ParamSet) -> ParamSet:
    return ParamSet([np.zeros_like(w) for w in params.weights],
                    [np.zeros_like(b) for b in params.biases], params.groups)


def backward(params: ParamSet, terms) -> tuple[float, ParamSet]:
    """Loss value and analytic gradient of the weighted sum of terms.

    The gradient is shaped exactly like params; terms with weight 0 are
    skipped entirely so they neither cost compute nor perturb the result.
    """
    if isinstance(terms, LossTerm):
        terms = [terms]
    w1, w2, wc, wd = params.weights
    total = 0.0
    grads = zero_grads(params)
    for term in terms:
        if term.weight == 0.0:
            continue
        cache = _forward_cache(params, term.batch)
        total += term.weight * _term_loss(cache, term)
        d_ctc, d_dec = _term_dlogits(cache, term)
        x, h1, h2, pooled = cache["x"], cache["h1"], cache["h2"], cache["pooled"]
        b, l, _ = x.shape

        h2f = h2.reshape(b * l, -1)
        d_ctcf = d_ctc.reshape(b * l, -1)
        g_wc = d_ctcf.T @ h2f
        g_bc = d_ctcf.sum(axis=0)
        g_wd = d_dec.T @ pooled
        g_bd = d_dec.sum(axis=0)

        d_h2 = d_ctc @ wc + (d_dec @ wd)[:, None, :] / l
        d_z2 = d_h2 * (1.0 - h2 * h2)
        d_z2f = d_z2.reshape(b * l, -1)
        g_w2 = d_z2f.T @ h1.reshape(b * l, -1)
        g_b2 = d_z2f.sum(axis=0)

        d_h1 = d_z2 @ w2
        d_z1 = d_h1 * (1.0 - h1 * h1)
        d_z1f = d_z1.reshape(b * l, -1)
        g_w1 = d_z1f.T @ x.reshape(b * l, -1)
        g_b1 = d_z1f.sum(axis=0)

        w = term.weight
        for acc, g in zip(grads.weights, (g_w1, g_w2, g_wc, g_wd)):
            acc += w * g
        for acc, g in zip(grads.biases, (g_b1, g_b2, g_bc, g_bd)):
            acc += w * g
    return total, grads


@dataclass
class AdamState:
    """Adam moments for a list of parameter arrays; reset at every task and
    stage boundary by constructing a fresh state."""

    lr: float
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(arrays, lr: float) -> AdamState:
    if lr < 0:
        raise InvalidConfig("learning rate must be >= 0")
    return AdamState(lr=lr, m=[np.zeros_like(a) for a in arrays],
                     v=[np.zeros_like(a) for a in arrays])


def adam_step(arrays, grads, state: AdamState) -> list:
    """One bias-corrected Adam update; returns new arrays, mutates state."""
    if len(arrays) != len(grads) or any(a.shape != g.shape for a, g in zip(arrays, grads)):
        raise ShapeError("gradient shapes do not match parameters")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = []
    for i, (a, g) in enumerate(zip(arrays, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(a - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def adam_step_params(params: ParamSet, grads: ParamSet, state: AdamState) -> ParamSet:
    return ParamSet.from_flat(adam_step(params.flat(), grads.flat(), state), params.groups)


def minibatches(data: Batch, batch_size: int, rng):
    """Seeded shuffle, then contiguous slices (final partial batch included)."""
    order = rng.permutation(data.n)
    for start in range(0, data.n, batch_size):
        yield data.subset(order[start:start + batch_size])


def train_loop(params: ParamSet, data: Batch, *, epochs: int, lr: float,
               batch_size: int, shuffle_rng, term_builder) -> ParamSet:
    """Adam over seeded-shuffled mini-batches; term_builder(batch) -> loss terms."""
    if data.n < 1:
        raise InvalidConfig("empty training set")
    if epochs < 1:
        raise InvalidConfig("epochs must be >= 1")
    arrays = [a.copy() for a in params.flat()]
    state = adam_init(arrays, lr)
    groups = params.groups
    for _ in range(epochs):
        for batch in minibatches(data, batch_size, shuffle_rng):
            cur = ParamSet.from_flat(arrays, groups)
            _, grads = backward(cur, term_builder(batch))
            arrays = adam_step(arrays, grads.flat(), state)
    return ParamSet.from_flat(arrays, groups)
