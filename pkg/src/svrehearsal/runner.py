"""Experiment orchestration: sequential task runs, ablation arms, reports.

A run trains task 1 from scratch (longer schedule), then adapts with the
configured method one task at a time, evaluating on every seen task's test
set after each step. Adaptation code only ever sees the current task's data
and the memory, enforced through AdaptationContext. All randomness is keyed
on the config and seed, so re-running a config reproduces every output file
byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os

import numpy as np

from . import baselines, metrics, nnet, svr
from .baselines import BaselineConfig, LAMBDA_GRID
from .config import (BenchmarkSpec, ExperimentConfig, MemorySpec, MethodSpec,
                     config_to_dict)
from .errors import (DataAccessError, InsufficientPairs, InvalidConfig,
                     ReportError)
from .memory import MemoryBuffer, MemoryPolicy, update_memory
from .metrics import RunRecord
from .nnet import LossTerm, ModelDims, ParamSet, init_params
from .taskgen import (Geometry, SplitSizes, generate_sequence, load_sequence,
                      save_sequence)

SCHEMA_VERSION = 1

# Stream tags for deriving per-run sub-seeds.
_STREAM_RUN = 1009


class AdaptationContext:
    """The only data an adaptation step may touch: task t and the memory."""

    def __init__(self, task_id: int, task_data, memory: MemoryBuffer | None):
        self._task_id = task_id
        self._task_data = task_data
        self._memory = memory

    @property
    def task_id(self) -> int:
        return self._task_id

    @property
    def memory(self) -> MemoryBuffer | None:
        return self._memory

    def dataset(self, task_id: int):
        if task_id != self._task_id:
            raise DataAccessError(
                f"adaptation of task {self._task_id} tried to read task {task_id}")
        return self._task_data


def benchmark_geometry(bench: BenchmarkSpec) -> Geometry:
    return Geometry()


def benchmark_dims(bench: BenchmarkSpec) -> ModelDims:
    geom = benchmark_geometry(bench)
    return ModelDims(d_in=geom.d_in, n_classes=geom.n_classes, seq_len=geom.seq_len)


def benchmark_sequence(bench: BenchmarkSpec, seed: int, cache_dir=None):
    if cache_dir is not None:
        path = os.path.join(cache_dir, f"tasks_{_bench_hash(bench)}_s{seed}.bin")
        if os.path.exists(path):
            return load_sequence(path)
    return generate_sequence(seed, bench.n_tasks,
                             SplitSizes(bench.n_train, bench.n_val, bench.n_test),
                             drift=bench.drift, n_groups=bench.n_groups,
                             geom=benchmark_geometry(bench))


def write_dataset_cache(bench: BenchmarkSpec, seed: int, cache_dir) -> str:
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"tasks_{_bench_hash(bench)}_s{seed}.bin")
    save_sequence(path, benchmark_sequence(bench, seed))
    return path


def _bench_hash(bench: BenchmarkSpec) -> str:
    payload = json.dumps({k: v for k, v in vars(bench).items() if k != "seeds"},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


_PRETRAIN_CACHE: dict = {}


def _run_seeds(seed: int):
    """Named sub-seeds for one run, drawn from a dedicated stream."""
    rng = np.random.Generator(np.random.Philox(key=[seed, _STREAM_RUN]))
    return {
        "init": int(rng.integers(2**62)),
        "task1": int(rng.integers(2**62)),
        "adapt": [int(rng.integers(2**62)) for _ in range(64)],
        "memory": [int(rng.integers(2**62)) for _ in range(64)],
    }


def pretrain_task1(bench: BenchmarkSpec, method: MethodSpec, seed: int,
                   sequence=None) -> ParamSet:
    """Task-1 model, trained from scratch; cached per (benchmark, seed)."""
    key = (_bench_hash(bench), seed, method.c, method.batch_size,
           bench.task1_epochs, bench.task1_lr)
    if key in _PRETRAIN_CACHE:
        return _PRETRAIN_CACHE[key]
    if sequence is None:
        sequence = benchmark_sequence(bench, seed)
    sub = _run_seeds(seed)
    theta = init_params(benchmark_dims(bench), seed=sub["init"])
    rng = np.random.Generator(np.random.Philox(key=[sub["task1"], 0]))
    theta = nnet.train_loop(
        theta, sequence[0][1].train, epochs=bench.task1_epochs, lr=bench.task1_lr,
        batch_size=method.batch_size, shuffle_rng=rng,
        term_builder=lambda batch: [LossTerm(batch, 1.0, "ce", method.c)])
    _PRETRAIN_CACHE[key] = theta
    return theta


def _make_buffer(mem: MemorySpec) -> MemoryBuffer | None:
    if mem.policy == "none":
        return None
    return MemoryBuffer(MemoryPolicy(mem.policy, mem.m),
                        balance_groups=mem.balance_groups)


def _baseline_cfg(method: MethodSpec, lam: float) -> BaselineConfig:
    return BaselineConfig(method.name, lam=lam, epochs=method.epochs, lr=method.lr,
                          c=method.c, batch_size=method.batch_size,
                          mem_loss=method.mem_loss)


def _adapt_once(method: MethodSpec, theta_prev: ParamSet, ctx: AdaptationContext,
                t: int, seed: int, lam: float | None):
    """Run one adaptation step; returns (theta_t, gate_vectors_or_None)."""
    task = ctx.dataset(ctx.task_id)
    name = method.name
    if name in ("finetune", "sep_model"):
        cfg = method.svr_config()
        return svr.fine_tune(theta_prev, task, cfg, seed), None
    if name == "fta":
        return baselines.fta_adapt(theta_prev, task, _baseline_cfg(method, 0.0),
                                   t, seed), None
    if name == "lwf":
        lam = 0.1 if lam is None else lam
        return baselines.lwf_adapt(theta_prev, task, _baseline_cfg(method, lam),
                                   seed), None
    if name == "er":
        return baselines.er_adapt(theta_prev, task, ctx.memory,
                                  _baseline_cfg(method, lam), seed), None
    if name == "kd":
        return baselines.kd_adapt(theta_prev, task, ctx.memory,
                                  _baseline_cfg(method, lam), seed), None
    if name == "svr":
        theta, gm = svr.svr_adapt(theta_prev, task, ctx.memory, t,
                                  method.svr_config(), seed)
        gates = [gm.gates(i).copy() for i in range(len(gm.layers))]
        return theta, gates
    raise InvalidConfig(f"unknown method {name!r}")


def _val_error(params: ParamSet, task_data) -> float:
    out = nnet.forward(params, task_data.val)
    pred = out.dec_probs.argmax(axis=1)
    return float((pred != task_data.val.seq_labels).mean())


def _select_lambda(method: MethodSpec, theta_prev, ctx, sequence, seed: int):
    """Grid-select the regularization weight on the first adaptation using
    the validation sets of the tasks seen so far; ties pick the smaller value."""
    best = None
    for lam in LAMBDA_GRID:
        theta, _ = _adapt_once(method, theta_prev, ctx, 2, seed, lam)
        score = float(np.mean([_val_error(theta, sequence[j][1]) for j in (0, 1)]))
        if best is None or score < best[1] - 1e-12:
            best = (lam, score, theta)
    return best[0], best[2]


def run_single(cfg: ExperimentConfig, seed: int) -> dict:
    """One seeded sequential run; returns the JSON-ready run record."""
    bench, method, mem = cfg.benchmark, cfg.method, cfg.memory
    sequence = benchmark_sequence(bench, seed)
    n_tasks = bench.n_tasks
    sub = _run_seeds(seed)

    theta = pretrain_task1(bench, method, seed, sequence)
    needs_memory = method.name in ("svr", "er", "kd")
    buffer = _make_buffer(mem) if needs_memory else None

    record = RunRecord(n_tasks=n_tasks, r=np.full((n_tasks, n_tasks), np.nan))
    memory_counts = {}
    gating_history = {}
    lambda_selected = None

    checkpoints = [theta]  # per-task models; used by the separate-model bound
    err, _ = metrics.evaluate(theta, sequence[0][1])
    record.r[0, 0] = err

    if buffer is not None:
        spec0 = sequence[0][0]
        buffer = update_memory(buffer, sequence[0][1], spec0.task_id,
                               spec0.group_id, sub["memory"][0])
        memory_counts["after_task_1"] = {str(k): v for k, v in
                                         sorted(buffer.task_counts().items())}

    for t in range(2, n_tasks + 1):
        spec_t, data_t = sequence[t - 1]
        ctx = AdaptationContext(t, data_t, buffer)
        adapt_seed = sub["adapt"][t]
        if method.name in ("er", "kd") and method.lam is None and t == 2:
            lambda_selected, theta = _select_lambda(method, theta, ctx, sequence,
                                                    adapt_seed)
        else:
            lam = method.lam if method.lam is not None else lambda_selected
            theta, gates = _adapt_once(method, theta, ctx, t, adapt_seed, lam)
            if gates is not None:
                gating_history[t] = gates
        checkpoints.append(theta)

        if buffer is not None:
            buffer = update_memory(buffer, data_t, spec_t.task_id, spec_t.group_id,
                                   sub["memory"][t])
            memory_counts[f"after_task_{t}"] = {str(k): v for k, v in
                                                sorted(buffer.task_counts().items())}
        for j in range(1, t + 1):
            err, _ = metrics.evaluate(theta, sequence[j - 1][1])
            record.r[t - 1, j - 1] = err

    if method.name == "sep_model":
        sep = baselines.sep_model_eval(checkpoints, sequence)
        record = sep
        per_example = sep.per_example_errors
        frame_errors = [metrics.frame_error(m, sequence[k][1])
                        for k, m in enumerate(checkpoints)]
    else:
        per_example = []
        frame_errors = []
        for j in range(n_tasks):
            _, indicators = metrics.evaluate(theta, sequence[j][1])
            per_example.append(indicators)
            frame_errors.append(metrics.frame_error(theta, sequence[j][1]))

    groups = theta.groups
    out = {
        "schema": SCHEMA_VERSION,
        "config": config_to_dict(cfg),
        "method": method.name,
        "memory": mem.label() if method.name in ("svr", "er", "kd") else "none",
        "seed": seed,
        "lambda_selected": lambda_selected,
        "r": [[None if np.isnan(v) else float(v) for v in row] for row in record.r],
        "avg_error": metrics.average_error(record),
        "bwt": metrics.bwt(record),
        "final_task_error": float(record.r[n_tasks - 1, n_tasks - 1]),
        "frame_errors_final": [float(v) for v in frame_errors],
        "per_example_errors": [[int(v) for v in arr] for arr in per_example],
        "memory_counts": memory_counts,
    }
    if gating_history:
        out["gating"] = {
            "history": {str(t): [[float(x) for x in g] for g in gates]
                        for t, gates in sorted(gating_history.items())},
            "groups": list(groups),
            "stats": metrics.gating_stats(gating_history, groups),
        }
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _write(path, text: str):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _r_matrix_rows(rec: dict):
    n = len(rec["r"])
    yield ["trained_through"] + [f"task_{j}" for j in range(1, n + 1)]
    for i, row in enumerate(rec["r"], start=1):
        yield [i] + ["" if v is None else v for v in row]


def _run_tag(rec: dict) -> str:
    return f"{rec['method']}_{rec['memory']}"


def write_run_outputs(out_dir, records: list) -> list:
    """Per-seed JSON/CSV, an aggregate, and the artifact manifest."""
    paths = []
    for rec in records:
        tag = _run_tag(rec)
        base = os.path.join(out_dir, f"runrecord_{tag}_s{rec['seed']}")
        _write(base + ".json", _dump_json(rec))
        _write(base + ".csv", _csv_text(_r_matrix_rows(rec)))
        paths += [base + ".json", base + ".csv"]
        if "gating" in rec:
            rows = [["task", "layer", "group", "k", "mean", "frac_suppressed",
                     "frac_intermediate", "frac_accepted"]]
            for s in rec["gating"]["stats"]:
                rows.append([s["task"], "" if s["layer"] is None else s["layer"],
                             s["group"], s["k"], s["mean"], s["frac_suppressed"],
                             s["frac_intermediate"], s["frac_accepted"]])
            _write(base + "_gating.csv", _csv_text(rows))
            paths.append(base + "_gating.csv")

    agg = aggregate_records(records)
    agg_path = os.path.join(out_dir, f"aggregate_{_run_tag(records[0])}.json")
    _write(agg_path, _dump_json(agg))
    paths.append(agg_path)

    manifest = {"files": {os.path.relpath(p, out_dir): _sha256(p) for p in sorted(paths)}}
    manifest_path = os.path.join(out_dir, "manifest.json")
    _write(manifest_path, _dump_json(manifest))
    return paths + [manifest_path]


def aggregate_records(records: list) -> dict:
    avg = [r["avg_error"] for r in records]
    bwts = [r["bwt"] for r in records]
    final = [r["final_task_error"] for r in records]
    return {
        "method": records[0]["method"],
        "memory": records[0]["memory"],
        "n_seeds": len(records),
        "seeds": [r["seed"] for r in records],
        "lambda_selected": [r["lambda_selected"] for r in records],
        "avg_error_mean": float(np.mean(avg)),
        "avg_error_std": float(np.std(avg)),
        "bwt_mean": float(np.mean(bwts)),
        "bwt_std": float(np.std(bwts)),
        "abs_bwt_mean": float(np.mean(np.abs(bwts))),
        "final_task_error_mean": float(np.mean(final)),
    }


def run_experiment(cfg: ExperimentConfig) -> list:
    """All seeds of one method/memory config; returns written file paths."""
    cfg.validate()
    records = [run_single(cfg, seed) for seed in cfg.benchmark.seeds]
    return write_run_outputs(cfg.out_dir, records)


# --- ablation arms ---------------------------------------------------------

ABLATION_ARMS = (
    "full",
    "no_t_scale",
    "mem_ce_only",
    "mem_kd_only",
    "others_old",
    "others_new",
    "unconstrained_gate",
    "ladder_fixed_eta",
    "ladder_learned_eta_er",
    "ladder_learned_eta",
    "ladder_scalar_per_layer",
)

# The fta-to-full ladder, in increasing flexibility order.
LADDER_ARMS = ("ladder_fixed_eta", "ladder_learned_eta",
               "ladder_scalar_per_layer", "full")


def arm_config(cfg: ExperimentConfig, arm: str) -> ExperimentConfig:
    """Translate an ablation arm name into a concrete experiment config."""
    m = cfg.method
    if arm == "full":
        changes = {}
    elif arm == "no_t_scale":
        changes = {"reg_scale_with_t": False}
    elif arm == "mem_ce_only":
        changes = {"mem_loss_terms": "ce"}
    elif arm == "mem_kd_only":
        changes = {"mem_loss_terms": "kd"}
    elif arm == "others_old":
        changes = {"others_mode": "old"}
    elif arm == "others_new":
        changes = {"others_mode": "new"}
    elif arm == "unconstrained_gate":
        changes = {"gate_mode": "unconstrained"}
    elif arm == "ladder_fixed_eta":
        # definitionally the parameter-averaging baseline with eta = 1/t
        method = MethodSpec(name="fta", c=m.c, batch_size=m.batch_size,
                            epochs=m.stage1_epochs, lr=m.stage1_lr)
        return ExperimentConfig(cfg.benchmark, method, cfg.memory,
                                os.path.join(cfg.out_dir, arm))
    elif arm == "ladder_learned_eta_er":
        # one global gate trained with the replay loss at unit weight:
        # ce-only memory term, unscaled, doubled to undo the built-in 1/2
        changes = {"gate_mode": "global_eta", "mem_loss_terms": "ce",
                   "reg_scale_with_t": False, "mem_loss_scale": 2.0}
    elif arm == "ladder_learned_eta":
        changes = {"gate_mode": "global_eta"}
    elif arm == "ladder_scalar_per_layer":
        changes = {"gate_mode": "scalar_per_layer"}
    else:
        raise InvalidConfig(f"unknown ablation arm {arm!r}")
    method = MethodSpec(**{**vars(m), **changes})
    return ExperimentConfig(cfg.benchmark, method, cfg.memory,
                            os.path.join(cfg.out_dir, arm))


def run_ablation(cfg: ExperimentConfig) -> list:
    """Run the configured arms under shared seeds and emit a side-by-side table."""
    cfg.validate()
    if cfg.method.name != "svr":
        raise InvalidConfig("ablation requires method.name == 'svr'")
    arms = cfg.arms or ABLATION_ARMS
    paths = []
    summaries = []
    per_arm_records = {}
    for arm in arms:
        sub_cfg = arm_config(cfg, arm)
        records = [run_single(sub_cfg, seed) for seed in sub_cfg.benchmark.seeds]
        per_arm_records[arm] = records
        paths += write_run_outputs(sub_cfg.out_dir, records)
        agg = aggregate_records(records)
        agg["arm"] = arm
        summaries.append(agg)

    rows = [["arm", "method", "memory", "avg_error_mean", "avg_error_std",
             "bwt_mean", "abs_bwt_mean", "final_task_error_mean"]]
    for s in summaries:
        rows.append([s["arm"], s["method"], s["memory"], s["avg_error_mean"],
                     s["avg_error_std"], s["bwt_mean"], s["abs_bwt_mean"],
                     s["final_task_error_mean"]])
    table_path = os.path.join(cfg.out_dir, "ablation_summary.csv")
    _write(table_path, _csv_text(rows))
    json_path = os.path.join(cfg.out_dir, "ablation_summary.json")
    _write(json_path, _dump_json({"arms": summaries}))
    paths += [table_path, json_path]

    manifest = {"files": {os.path.relpath(p, cfg.out_dir): _sha256(p)
                          for p in sorted(paths)}}
    manifest_path = os.path.join(cfg.out_dir, "ablation_manifest.json")
    _write(manifest_path, _dump_json(manifest))
    return paths + [manifest_path]


# --- reporting -------------------------------------------------------------

def _load_records(run_dir) -> list:
    paths = []
    for root, _, files in os.walk(run_dir):
        for name in sorted(files):
            if name.startswith("runrecord_") and name.endswith(".json"):
                paths.append(os.path.join(root, name))
    if not paths:
        raise ReportError(f"no run records found under {run_dir}")
    records = []
    bad = []
    for path in sorted(paths):
        try:
            with open(path) as f:
                rec = json.load(f)
            if "r" not in rec or "avg_error" not in rec:
                raise ValueError("missing required fields")
            records.append((os.path.relpath(path, run_dir), rec))
        except (OSError, ValueError) as exc:
            bad.append(f"{path}: {exc}")
    if bad:
        raise ReportError("unreadable run records:\n" + "\n".join(bad))
    return records


def report(run_dir, out_dir=None) -> list:
    """Aggregate all run records under run_dir into summary tables.

    Emits per-group means, pairwise significance tests on pooled per-example
    error indicators, and pooled gating statistics. Deterministic: the same
    inputs produce byte-identical outputs.
    """
    out_dir = out_dir or run_dir
    records = _load_records(run_dir)

    by_group: dict = {}
    for _, rec in records:
        key = (rec["method"], rec["memory"])
        by_group.setdefault(key, []).append(rec)
    for key in by_group:
        by_group[key].sort(key=lambda r: r["seed"])

    summary_rows = [["method", "memory", "n_runs", "avg_error_mean", "avg_error_std",
                     "bwt_mean", "bwt_std", "abs_bwt_mean", "final_task_error_mean"]]
    summaries = {}
    for key in sorted(by_group):
        agg = aggregate_records(by_group[key])
        summaries["/".join(key)] = agg
        summary_rows.append([key[0], key[1], agg["n_seeds"], agg["avg_error_mean"],
                             agg["avg_error_std"], agg["bwt_mean"], agg["bwt_std"],
                             agg["abs_bwt_mean"], agg["final_task_error_mean"]])

    def pooled_indicators(recs):
        flat = []
        for rec in recs:
            for arr in rec.get("per_example_errors", []):
                flat.extend(arr)
        return np.array(flat, dtype=np.float64)

    sig_rows = [["method_a", "memory_a", "method_b", "memory_b",
                 "n_pairs", "statistic", "p_value", "level"]]
    keys = sorted(by_group)
    for i, key_a in enumerate(keys):
        for key_b in keys[i + 1:]:
            a = pooled_indicators(by_group[key_a])
            b = pooled_indicators(by_group[key_b])
            if len(a) != len(b) or len(a) == 0:
                continue
            try:
                res = metrics.wilcoxon_signed_rank(a, b)
                row = [key_a[0], key_a[1], key_b[0], key_b[1],
                       res.n_pairs, res.statistic, res.p_value, res.level]
            except InsufficientPairs:
                row = [key_a[0], key_a[1], key_b[0], key_b[1], 0, "", "",
                       "insufficient"]
            sig_rows.append(row)

    gating_rows = [["method", "memory", "seed", "task", "layer", "group", "k",
                    "mean", "frac_suppressed", "frac_intermediate", "frac_accepted"]]
    for key in sorted(by_group):
        for rec in by_group[key]:
            for s in rec.get("gating", {}).get("stats", []):
                gating_rows.append([key[0], key[1], rec["seed"], s["task"],
                                    "" if s["layer"] is None else s["layer"],
                                    s["group"], s["k"], s["mean"],
                                    s["frac_suppressed"], s["frac_intermediate"],
                                    s["frac_accepted"]])

    paths = []
    summary_csv = os.path.join(out_dir, "summary.csv")
    _write(summary_csv, _csv_text(summary_rows))
    paths.append(summary_csv)
    sig_csv = os.path.join(out_dir, "significance.csv")
    _write(sig_csv, _csv_text(sig_rows))
    paths.append(sig_csv)
    if len(gating_rows) > 1:
        gating_csv = os.path.join(out_dir, "gating_summary.csv")
        _write(gating_csv, _csv_text(gating_rows))
        paths.append(gating_csv)
    report_json = os.path.join(out_dir, "report.json")
    _write(report_json, _dump_json({"groups": summaries,
                                    "records": [p for p, _ in records]}))
    paths.append(report_json)

    manifest = {"files": {os.path.relpath(p, out_dir): _sha256(p)
                          for p in sorted(paths)}}
    manifest_path = os.path.join(out_dir, "report_manifest.json")
    _write(manifest_path, _dump_json(manifest))
    return paths + [manifest_path]
