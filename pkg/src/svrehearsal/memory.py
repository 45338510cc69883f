"""Rehearsal memory: storage, uniform sampling, and update policies.

Fixed policy keeps a constant total size M, so after task t each task holds
floor(M/t) entries with the remainder assigned to the lowest task ids (when
group balancing is on, the budget is split equally across groups first, then
across each group's tasks). Increasing policy stores exactly M entries per
task. Insertion samples uniformly without replacement from the task's
training set; eviction keeps a uniform subsample of the task's entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMemory, InsufficientData, InvalidConfig
from .nnet import Batch
from .serialize import read_container, write_container
from .taskgen import TaskData

FIXED = "fixed"
INCREASING = "increasing"


@dataclass(frozen=True)
class MemoryPolicy:
    kind: str
    m: int

    def __post_init__(self):
        if self.kind not in (FIXED, INCREASING):
            raise InvalidConfig(f"unknown memory policy {self.kind!r}")
        if self.m < 1:
            raise InvalidConfig("memory size must be >= 1")


@dataclass(frozen=True)
class MemoryEntry:
    inputs: np.ndarray        # (l, d) float32
    frame_labels: np.ndarray  # (l,)
    seq_label: int
    task_id: int
    group_id: int


@dataclass
class MemoryBuffer:
    policy: MemoryPolicy
    balance_groups: bool = False
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def task_ids(self):
        return sorted({e.task_id for e in self.entries})

    def task_counts(self) -> dict:
        counts: dict = {}
        for e in self.entries:
            counts[e.task_id] = counts.get(e.task_id, 0) + 1
        return counts

    def group_counts(self) -> dict:
        counts: dict = {}
        for e in self.entries:
            counts[e.group_id] = counts.get(e.group_id, 0) + 1
        return counts


def _quotas(policy: MemoryPolicy, balance_groups: bool, task_groups: dict) -> dict:
    """Per-task entry quotas for the tasks in task_groups (task_id -> group_id)."""
    tasks = sorted(task_groups)
    if policy.kind == INCREASING:
        return {t: policy.m for t in tasks}
    if not balance_groups:
        base, rem = divmod(policy.m, len(tasks))
        return {t: base + (1 if i < rem else 0) for i, t in enumerate(tasks)}
    groups = sorted({task_groups[t] for t in tasks})
    g_base, g_rem = divmod(policy.m, len(groups))
    quotas = {}
    for gi, g in enumerate(groups):
        g_quota = g_base + (1 if gi < g_rem else 0)
        g_tasks = [t for t in tasks if task_groups[t] == g]
        base, rem = divmod(g_quota, len(g_tasks))
        for i, t in enumerate(g_tasks):
            quotas[t] = base + (1 if i < rem else 0)
    return quotas


def update_memory(buffer: MemoryBuffer, task_data: TaskData, task_id: int,
                  group_id: int, rng_seed: int) -> MemoryBuffer:
    """Insert task_id's contribution and evict to restore the policy quotas.

    Returns a new buffer; the input buffer is left untouched. Deterministic
    given rng_seed.
    """
    if any(e.task_id == task_id for e in buffer.entries):
        raise InvalidConfig(f"task {task_id} is already stored in the memory")
    task_groups = {e.task_id: e.group_id for e in buffer.entries}
    task_groups[task_id] = group_id
    quotas = _quotas(buffer.policy, buffer.balance_groups, task_groups)

    train = task_data.train
    need = quotas[task_id]
    if train.n < need:
        raise InsufficientData(
            f"task {task_id} training set has {train.n} examples, quota is {need}")

    rng = np.random.Generator(np.random.Philox(key=[rng_seed, 0]))
    entries = []
    for t in sorted(task_groups):
        if t == task_id:
            picked = rng.choice(train.n, size=need, replace=False)
            for i in picked:
                entries.append(MemoryEntry(train.inputs[i], train.frame_labels[i],
                                           int(train.seq_labels[i]), task_id, group_id))
        else:
            current = [e for e in buffer.entries if e.task_id == t]
            quota = min(quotas[t], len(current))
            keep = sorted(rng.choice(len(current), size=quota, replace=False))
            entries.extend(current[i] for i in keep)
    return MemoryBuffer(buffer.policy, buffer.balance_groups, entries)


def sample_memory(buffer: MemoryBuffer, b: int, rng) -> Batch:
    """b entries uniformly with replacement.

    Under the increasing policy with group balancing, groups are drawn with
    equal probability regardless of how many tasks they hold.
    """
    if len(buffer) == 0:
        raise EmptyMemory("cannot sample from an empty memory")
    groups = sorted({e.group_id for e in buffer.entries})
    if buffer.balance_groups and buffer.policy.kind == INCREASING and len(groups) > 1:
        by_group = {g: [i for i, e in enumerate(buffer.entries) if e.group_id == g]
                    for g in groups}
        g_pick = rng.integers(0, len(groups), size=b)
        idx = np.array([by_group[groups[g]][rng.integers(0, len(by_group[groups[g]]))]
                        for g in g_pick])
    else:
        idx = rng.integers(0, len(buffer), size=b)
    chosen = [buffer.entries[i] for i in idx]
    return Batch(np.stack([e.inputs for e in chosen]).astype(np.float32),
                 np.stack([e.frame_labels for e in chosen]),
                 np.array([e.seq_label for e in chosen], dtype=np.int64))


def save_buffer(path, buffer: MemoryBuffer):
    """Binary arrays plus a sidecar .meta.json with per-entry bookkeeping."""
    import json

    arrays = {
        "inputs": np.stack([e.inputs for e in buffer.entries]).astype("<f4")
        if buffer.entries else np.zeros((0, 1, 1), dtype="<f4"),
        "frame_labels": np.stack([e.frame_labels for e in buffer.entries]).astype("<i4")
        if buffer.entries else np.zeros((0, 1), dtype="<i4"),
        "seq_labels": np.array([e.seq_label for e in buffer.entries], dtype="<i4"),
    }
    write_container(path, arrays, {"kind": "memory_buffer"})
    sidecar = {
        "policy": {"kind": buffer.policy.kind, "m": buffer.policy.m},
        "balance_groups": buffer.balance_groups,
        "entries": [{"task_id": e.task_id, "group_id": e.group_id}
                    for e in buffer.entries],
    }
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)


def load_buffer(path) -> MemoryBuffer:
    import json

    arrays, meta = read_container(path)
    if meta.get("kind") != "memory_buffer":
        raise InvalidConfig(f"{path}: not a memory buffer file")
    with open(str(path) + ".meta.json") as f:
        sidecar = json.load(f)
    policy = MemoryPolicy(sidecar["policy"]["kind"], sidecar["policy"]["m"])
    entries = []
    for i, rec in enumerate(sidecar["entries"]):
        entries.append(MemoryEntry(arrays["inputs"][i],
                                   arrays["frame_labels"][i].astype(np.int64),
                                   int(arrays["seq_labels"][i]),
                                   rec["task_id"], rec["group_id"]))
    return MemoryBuffer(policy, sidecar["balance_groups"], entries)
