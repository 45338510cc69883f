"""Deterministic synthetic task sequences for desk-scale forgetting studies.

Class means sit on a regular simplex whose orientation is drawn from the
global seed. Each task applies a seeded orthogonal rotation to the previous
task's means, so the cumulative rotation away from the initial frame grows
proportionally to drift * t, then adds Gaussian frame noise. The rotation
planes are anchored to the current span of the class means: one plane inside
the span (classes move through each other's old territory, which is what
induces interference and forgetting), one plane tilting the span into a
fresh ambient direction, and one purely ambient plane (benign drift).

All randomness flows through the counter-based Philox generator keyed on
(seed, stream), which is platform-independent, so identical seeds yield
byte-identical datasets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig
from .nnet import Batch
from .serialize import read_container, write_container


@dataclass(frozen=True)
class Geometry:
    n_classes: int = 4
    d_in: int = 16
    seq_len: int = 6
    radius: float = 3.0
    noise_sigma: float = 0.5
    # radians of rotation per unit drift; calibrated so the default drift
    # makes naive fine-tuning forget visibly while consecutive tasks stay
    # learnable from the previous model
    angle_per_drift: float = 2.0


@dataclass(frozen=True)
class SplitSizes:
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    group_id: int
    rotation_seed: int
    noise_seed: int
    n_train: int
    n_val: int
    n_test: int


@dataclass(frozen=True)
class TaskData:
    train: Batch
    val: Batch
    test: Batch


def _rng(seed: int, stream: int):
    return np.random.Generator(np.random.Philox(key=[seed, stream]))


def _simplex_means(rng, geom: Geometry) -> np.ndarray:
    # Gram-Schmidt on seeded Gaussians, then center and rescale: a regular
    # simplex of circumradius `radius` with seed-dependent orientation.
    basis = []
    while len(basis) < geom.n_classes:
        v = rng.standard_normal(geom.d_in)
        for b in basis:
            v -= (v @ b) * b
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            basis.append(v / norm)
    q = np.stack(basis)
    centered = q - q.mean(axis=0)
    return geom.radius * centered / np.linalg.norm(centered, axis=1, keepdims=True)


def _span_basis(means: np.ndarray) -> list:
    # Orthonormal basis of the centered class-mean span (C-1 directions).
    centered = means - means.mean(axis=0)
    basis = []
    for v in centered:
        w = v.copy()
        for b in basis:
            w -= (w @ b) * b
        norm = np.linalg.norm(w)
        if norm > 1e-9:
            basis.append(w / norm)
    return basis


def _unit_in_span(basis, rng, orthogonal_to=()):
    for _ in range(64):
        v = rng.standard_normal(len(basis)) @ np.stack(basis)
        for b in orthogonal_to:
            v -= (v @ b) * b
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            return v / norm
    raise InvalidConfig("could not draw a unit vector in the span")


def _unit_orthogonal(vectors, rng, d):
    for _ in range(64):
        v = rng.standard_normal(d)
        for b in vectors:
            v -= (v @ b) * b
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            return v / norm
    raise InvalidConfig("could not draw an orthogonal unit vector")


def _plane_rotation(u, v, angle, d) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return (np.eye(d) + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
            + s * (np.outer(u, v) - np.outer(v, u)))


def drift_rotation(means: np.ndarray, angle: float, seed: int) -> np.ndarray:
    """The seeded orthogonal step applied to one task's class means.

    Composes three plane rotations by `angle`: one inside the current mean
    span, one pairing a span direction with an ambient direction, and one
    fully ambient.
    """
    d = means.shape[1]
    rng = _rng(seed, 0)
    span = _span_basis(means)
    u1 = _unit_in_span(span, rng)
    u2 = _unit_in_span(span, rng, orthogonal_to=(u1,))
    q = _plane_rotation(u1, u2, angle, d)
    used = list(span)
    a1 = _unit_orthogonal(used, rng, d)
    u3 = _unit_in_span(span, rng, orthogonal_to=(u1, u2))
    q = _plane_rotation(u3, a1, angle, d) @ q
    a2 = _unit_orthogonal(used + [a1], rng, d)
    a3 = _unit_orthogonal(used + [a1, a2], rng, d)
    q = _plane_rotation(a2, a3, angle, d) @ q
    return q


def _balanced_labels(n: int, n_classes: int, rng) -> np.ndarray:
    # Class counts within +-1 of n / n_classes; remainder to lowest classes.
    base, rem = divmod(n, n_classes)
    labels = np.concatenate(
        [np.full(base + (1 if c < rem else 0), c, dtype=np.int64) for c in range(n_classes)])
    return labels[rng.permutation(n)]


def _make_split(n, means, geom, rng) -> Batch:
    labels = _balanced_labels(n, geom.n_classes, rng)
    noise = rng.standard_normal((n, geom.seq_len, geom.d_in)) * geom.noise_sigma
    inputs = (means[labels][:, None, :] + noise).astype(np.float32)
    frame_labels = np.repeat(labels[:, None], geom.seq_len, axis=1)
    return Batch(inputs, frame_labels, labels)


def generate_sequence(global_seed: int, n_tasks: int, sizes: SplitSizes = SplitSizes(),
                      drift: float = 0.4, n_groups: int = 1,
                      geom: Geometry = Geometry()) -> list[tuple[TaskSpec, TaskData]]:
    """Generate n_tasks seeded tasks with round-robin group assignment."""
    if n_tasks < 2:
        raise InvalidConfig("a task sequence needs at least 2 tasks")
    if min(sizes.n_train, sizes.n_val, sizes.n_test) < 1:
        raise InvalidConfig("split sizes must be positive")
    if drift < 0:
        raise InvalidConfig("drift must be >= 0")
    if geom.d_in < geom.n_classes + 2:
        raise InvalidConfig("input dimension too small for the rotation planes")
    master = _rng(global_seed, 0)
    means = _simplex_means(master, geom)
    seeds = [(int(master.integers(2**62)), int(master.integers(2**62)))
             for _ in range(n_tasks)]

    out = []
    for t in range(1, n_tasks + 1):
        rotation_seed, noise_seed = seeds[t - 1]
        angle = drift * geom.angle_per_drift
        means = means @ drift_rotation(means, angle, rotation_seed).T
        spec = TaskSpec(task_id=t, group_id=(t - 1) % n_groups,
                        rotation_seed=rotation_seed, noise_seed=noise_seed,
                        n_train=sizes.n_train, n_val=sizes.n_val, n_test=sizes.n_test)
        splits = []
        for stream, n in enumerate((sizes.n_train, sizes.n_val, sizes.n_test)):
            splits.append(_make_split(n, means, geom, _rng(noise_seed, stream + 1)))
        out.append((spec, TaskData(*splits)))
    return out


def class_means(global_seed: int, n_tasks: int, drift: float = 0.4,
                geom: Geometry = Geometry()) -> list:
    """Per-task class means (oracle view of the generating process)."""
    master = _rng(global_seed, 0)
    means = _simplex_means(master, geom)
    seeds = [(int(master.integers(2**62)), int(master.integers(2**62)))
             for _ in range(n_tasks)]
    out = []
    for rotation_seed, _ in seeds:
        means = means @ drift_rotation(means, drift * geom.angle_per_drift,
                                       rotation_seed).T
        out.append(means.copy())
    return out


def save_sequence(path, sequence):
    arrays = {}
    specs = []
    for spec, data in sequence:
        t = spec.task_id
        specs.append(vars(spec).copy())
        for split_name, split in (("train", data.train), ("val", data.val), ("test", data.test)):
            arrays[f"task{t}/{split_name}/inputs"] = split.inputs.astype("<f4")
            arrays[f"task{t}/{split_name}/frame_labels"] = split.frame_labels.astype("<i4")
            arrays[f"task{t}/{split_name}/seq_labels"] = split.seq_labels.astype("<i4")
    write_container(path, arrays, {"kind": "task_sequence", "specs": specs})


def load_sequence(path):
    arrays, meta = read_container(path)
    if meta.get("kind") != "task_sequence":
        raise InvalidConfig(f"{path}: not a task sequence file")
    out = []
    for spec_dict in meta["specs"]:
        spec = TaskSpec(**spec_dict)
        t = spec.task_id
        splits = []
        for split_name in ("train", "val", "test"):
            splits.append(Batch(
                arrays[f"task{t}/{split_name}/inputs"],
                arrays[f"task{t}/{split_name}/frame_labels"].astype(np.int64),
                arrays[f"task{t}/{split_name}/seq_labels"].astype(np.int64)))
        out.append((spec, TaskData(*splits)))
    return out
