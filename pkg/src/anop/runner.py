"""Experiment orchestration: pretrain -> anchor optimization -> adaptation ->
evaluation pipelines, with metrics CSV, checkpoints, position-matrix dumps,
figures, and a resolved-config manifest per output directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as CK
from . import encoder as E
from . import evaluation as EV
from . import figures as F
from . import training as TR
from . import world as W
from .config import ExperimentConfig, resolve_config
from .evaluation import MetricsRecord
from .seeding import derive_rng

CSV_COLUMNS = ["run_id", "paradigm", "axis", "value", "seed",
               "base_acc", "novel_acc", "hm", "ce_final", "kd_final",
               "runtime_seconds"]

# method rows for run/compare: soft-prompt baseline, fixed explicit-anchor
# baseline, and the dynamic anchor + position matrix method
METHOD_OVERRIDES: dict[str, dict[str, str]] = {
    "soft_prompt": {"prompt.arrangement": "coop", "train.lambda_kd": "0.0",
                    "eval.ensemble": "off"},
    "fixed_anchor": {"prompt.arrangement": "atprompt", "train.lambda_kd": "0.0",
                     "eval.ensemble": "off"},
    "dynamic_anchor": {},
}
METHOD_LABELS = {
    "soft_prompt": "soft prompt (baseline)",
    "fixed_anchor": "fixed anchor (baseline)",
    "dynamic_anchor": "dynamic anchor (ours)",
}


@dataclass
class RunResult:
    run_id: str
    method: str
    paradigm: str
    axis: str
    value: str
    seed: int
    record: MetricsRecord
    ce_final: float
    kd_final: float
    state: TR.TrainState
    runtime_seconds: float


@dataclass
class RunContext:
    config: ExperimentConfig
    out_dir: Path
    world: W.SynthWorld
    split: W.SplitSpec
    stack: E.EncoderStack
    results: list[RunResult] = field(default_factory=list)
    extra_manifest: dict = field(default_factory=dict)


def stack_cache_key(config: ExperimentConfig) -> str:
    lines = [l for l in config.echo_lines()
             if l.startswith(("world.", "encoder.", "pretrain.", "run.seed "))]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def prepare(config: ExperimentConfig, out_dir: Path,
            log=print) -> RunContext:
    """Build the world and split; pretrain the stack or reuse a cached
    checkpoint whose world/encoder/pretrain settings match."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    base_seed = config["run.seed"]
    world = W.generate_world(seed=base_seed, **config.world_kwargs())
    split = W.base_novel_split(world, config["world.base_fraction"], seed=base_seed)

    key = stack_cache_key(config)
    stack_path = out_dir / "checkpoints" / "stack.anop"
    stack = None
    if stack_path.exists():
        try:
            meta, _ = CK.load_checkpoint(stack_path)
            if meta.get("config_digest") == key:
                stack = CK.load_stack(stack_path)
                log(f"reusing pretrained encoders from {stack_path}")
        except CK.CheckpointError:
            stack = None
    if stack is None:
        log("pretraining encoders ...")
        start = time.perf_counter()
        stack = E.pretrain_contrastive(world, config.pretrain_config(), seed=base_seed)
        log(f"pretraining reached target in {time.perf_counter() - start:.1f}s")
        CK.save_stack(stack, stack_path, config_digest=key, world_seed=base_seed)
    return RunContext(config=config, out_dir=out_dir, world=world,
                      split=split, stack=stack)


def run_seed_value(base_seed: int, seed: int) -> int:
    return int(derive_rng(base_seed, "run", seed).integers(2**31))


def execute_run(ctx: RunContext, config: ExperimentConfig, method: str,
                seed: int, axis: str = "method", value: str | None = None,
                run_id: str | None = None) -> RunResult:
    """One full training + evaluation run for a method row or ablation cell."""
    cfg = config.trainer_config()
    paradigm = config["train.paradigm"]
    derived_seed = run_seed_value(config["run.seed"], seed)
    run_id = run_id or f"{method}-s{seed}"
    start = time.perf_counter()

    state = TR.init_train_state(cfg, ctx.stack.dims.d_tok, derived_seed)
    shots = W.sample_dataset(ctx.world, ctx.split.base_classes,
                             config["world.shots"],
                             seed=int(derive_rng(derived_seed, "shots").integers(2**31)))
    trains_anchors = method == "dynamic_anchor" and cfg.arrangement not in ("coop", "atprompt")
    if paradigm == "one_stage" and trains_anchors:
        trace2 = TR.train_one_stage(state, shots, ctx.world, ctx.stack, cfg)
    else:
        if trains_anchors:
            TR.train_stage1_anchor(state, ctx.world, ctx.stack, cfg,
                                   ctx.split.base_classes)
        else:
            TR.freeze_anchors(state)
            state.stage = "stage1"
        trace2 = TR.train_stage2_adapt(state, shots, ctx.world, ctx.stack, cfg)

    record = EV.evaluate_base_to_novel(
        state, ctx.split, ctx.world, ctx.stack, cfg,
        n_eval=config["eval.samples_per_class"], seed=derived_seed,
        ensemble=config["eval.ensemble"], config_digest=config.digest())
    runtime = time.perf_counter() - start
    result = RunResult(run_id=run_id, method=method, paradigm=paradigm,
                       axis=axis, value=value if value is not None else method,
                       seed=seed, record=record,
                       ce_final=trace2[-1].ce if trace2 else 0.0,
                       kd_final=trace2[-1].kd if trace2 else 0.0,
                       state=state, runtime_seconds=runtime)
    ctx.results.append(result)
    return result


def method_config(base: ExperimentConfig, method: str,
                  extra: dict[str, str] | None = None) -> ExperimentConfig:
    overrides = dict(METHOD_OVERRIDES[method])
    overrides.update(extra or {})
    raw = {k: (v, 0) for k, v in
           (line.split(" = ", 1) for line in base.echo_lines())}
    return resolve_config(raw, overrides, source="<resolved>")


# ---------------------------------------------------------------------------
# artifact emission
# ---------------------------------------------------------------------------

def write_metrics_csv(ctx: RunContext) -> Path:
    path = ctx.out_dir / "metrics.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in ctx.results:
            writer.writerow([r.run_id, r.paradigm, r.axis, r.value, r.seed,
                             repr(r.record.base_acc), repr(r.record.novel_acc),
                             repr(r.record.hm), repr(r.ce_final), repr(r.kd_final),
                             repr(r.runtime_seconds)])
    return path


def dump_position_matrix(result: RunResult, ctx: RunContext) -> None:
    grid_dir = ctx.out_dir / "position_matrices"
    grid_dir.mkdir(exist_ok=True)
    logits = result.state.position.logits.values
    temp = result.state.position.temperature
    # degenerate temperatures can overflow; fall back to hard rows there
    with np.errstate(over="ignore", invalid="ignore"):
        z = logits / temp
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(probs)):
        probs = np.zeros_like(logits)
        probs[np.arange(len(logits)), logits.argmax(axis=-1)] = 1.0
    with open(grid_dir / f"{result.run_id}.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(v) for v in row] for row in probs])
    F.save_position_matrix(probs, ctx.out_dir / "figures" /
                           f"position_matrix_{result.run_id}.png",
                           title=f"position matrix ({result.run_id})")


def emit_run_artifacts(ctx: RunContext) -> None:
    (ctx.out_dir / "figures").mkdir(exist_ok=True)
    write_metrics_csv(ctx)
    digest = ctx.config.digest()
    base_seed = ctx.config["run.seed"]
    for r in ctx.results:
        CK.save_state(r.state, ctx.out_dir / "checkpoints" / f"{r.run_id}.anop",
                      config_digest=digest, world_seed=base_seed)
        traces = {"total": [b.total for b in r.state.stage2_trace],
                  "cross_entropy": [b.ce for b in r.state.stage2_trace],
                  "distillation": [b.kd for b in r.state.stage2_trace],
                  "anchor_mse": list(r.state.stage1_trace)}
        F.save_loss_curves({k: v for k, v in traces.items() if v},
                           ctx.out_dir / "figures" / f"loss_{r.run_id}.png",
                           title=f"losses ({r.run_id})")
        dump_position_matrix(r, ctx)


def write_manifest(ctx: RunContext, status: str = "ok",
                   error: str | None = None) -> Path:
    manifest = {
        "status": status,
        "config_digest": ctx.config.digest(),
        "resolved_config": ctx.config.echo_lines(),
        "versions": {"anop": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "base_classes": list(ctx.split.base_classes),
        "novel_classes": list(ctx.split.novel_classes),
        "runs": [{
            "run_id": r.run_id, "method": r.method, "paradigm": r.paradigm,
            "axis": r.axis, "value": str(r.value), "seed": r.seed,
            "base_acc": r.record.base_acc, "novel_acc": r.record.novel_acc,
            "hm": r.record.hm, "runtime_seconds": r.runtime_seconds,
        } for r in ctx.results],
    }
    if error is not None:
        manifest["error"] = error
    manifest.update(ctx.extra_manifest)
    path = ctx.out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def aggregate(results: list[RunResult]) -> dict[str, tuple[float, float]]:
    def agg(vals):
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), (float(arr.std(ddof=1)) if arr.size > 1 else 0.0)

    return {"base": agg([r.record.base_acc for r in results]),
            "novel": agg([r.record.novel_acc for r in results]),
            "hm": agg([r.record.hm for r in results])}


def comparison_table(by_method: dict[str, list[RunResult]]) -> str:
    lines = ["| Method | Base | Novel | HM |", "| --- | --- | --- | --- |"]
    for method, rows in by_method.items():
        stats = aggregate(rows)
        cells = [f"{stats[k][0]:.2f} ± {stats[k][1]:.2f}" for k in ("base", "novel", "hm")]
        lines.append(f"| {METHOD_LABELS.get(method, method)} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def pipeline_run(config: ExperimentConfig, out_dir: Path, log=print,
                 methods: tuple[str, ...] = ("soft_prompt", "dynamic_anchor"),
                 seeds: tuple[int, ...] | None = None) -> RunContext:
    """Full pipeline over the configured seeds for each method row."""
    ctx = prepare(config, out_dir, log=log)
    seeds = seeds if seeds is not None else config["run.seeds"]
    try:
        for method in methods:
            cfg_m = method_config(config, method)
            for seed in seeds:
                r = execute_run(ctx, cfg_m, method, seed)
                log(f"{r.run_id}: base {r.record.base_acc:.2f} "
                    f"novel {r.record.novel_acc:.2f} hm {r.record.hm:.2f} "
                    f"({r.runtime_seconds:.1f}s)")
        emit_run_artifacts(ctx)
        by_method = {m: [r for r in ctx.results if r.method == m] for m in methods}
        table = comparison_table(by_method)
        (ctx.out_dir / "comparison.md").write_text(table + "\n")
        F.save_metric_bars(
            [(METHOD_LABELS.get(m, m),) + tuple(aggregate(rs)[k][0] for k in ("base", "novel", "hm"))
             for m, rs in by_method.items()],
            ctx.out_dir / "figures" / "comparison.png")
        write_manifest(ctx)
        log(table)
    except Exception as exc:
        emit_partial(ctx, exc)
        raise
    return ctx


def pipeline_compare(config: ExperimentConfig, out_dir: Path, log=print,
                     seeds: tuple[int, ...] | None = None,
                     assert_gates: bool = False) -> tuple[RunContext, bool]:
    """Three-way comparison; with ``assert_gates`` the directional claims
    (novel gain and HM within 0.5) must hold for a passing exit."""
    methods = ("soft_prompt", "fixed_anchor", "dynamic_anchor")
    ctx = pipeline_run(config, out_dir, log=log, methods=methods, seeds=seeds)
    by_method = {m: [r for r in ctx.results if r.method == m] for m in methods}
    soft = aggregate(by_method["soft_prompt"])
    dyn = aggregate(by_method["dynamic_anchor"])
    gates = {
        "novel_improves": dyn["novel"][0] > soft["novel"][0],
        "hm_within_half_point": dyn["hm"][0] >= soft["hm"][0] - 0.5,
    }
    ctx.extra_manifest["gates"] = gates
    write_manifest(ctx)
    passed = all(gates.values())
    if assert_gates:
        log(f"gates: {gates} -> {'pass' if passed else 'FAIL'}")
    return ctx, passed


def pipeline_ablate(config: ExperimentConfig, out_dir: Path, axis: str,
                    values: list | None = None,
                    seeds: tuple[int, ...] | None = None,
                    log=print) -> tuple[RunContext, list[EV.AblationCell]]:
    """Single-axis grid; each cell wires its dotted overrides into a full
    dynamic-anchor run, recorded in the manifest for inspection."""
    ctx = prepare(config, out_dir, log=log)
    seeds = seeds if seeds is not None else config["run.seeds"]
    values = values if values is not None else EV.ABLATION_AXES[axis]
    cell_log: list[dict] = []

    def run_cell(overrides: dict[str, str], seed: int) -> MetricsRecord:
        cfg_cell = method_config(config, "dynamic_anchor", overrides)
        label = "-".join(str(v) for v in overrides.values()) or "default"
        run_id = f"ablate-{axis}-{label}-s{seed}"
        result = execute_run(ctx, cfg_cell, "dynamic_anchor", seed, axis=axis,
                             value=label, run_id=run_id)
        cell_log.append({"run_id": run_id, "axis": axis, "overrides": overrides,
                         "seed": seed, "config_digest": cfg_cell.digest(),
                         "resolved_config": cfg_cell.echo_lines()})
        log(f"{run_id}: hm {result.record.hm:.2f}")
        return result.record

    try:
        cells = EV.run_ablation({axis: values}, seeds, run_cell)
        for cell, value in zip(cells, values):
            cell.value = value
        emit_run_artifacts(ctx)
        (ctx.out_dir / "figures").mkdir(exist_ok=True)
        F.save_ablation_curve(axis, cells,
                              ctx.out_dir / "figures" / f"ablation_{axis}.png")
        ctx.extra_manifest["ablation"] = {
            "axis": axis, "values": [str(v) for v in values], "cells": cell_log,
            "summaries": [{"value": str(c.value), **c.summary()} for c in cells]}
        write_manifest(ctx)
    except Exception as exc:
        ctx.extra_manifest["ablation"] = {"axis": axis, "cells": cell_log}
        emit_partial(ctx, exc)
        raise
    return ctx, cells


def emit_partial(ctx: RunContext, exc: Exception) -> None:
    """Best-effort partial artifacts plus a failure manifest."""
    try:
        if ctx.results:
            emit_run_artifacts(ctx)
        write_manifest(ctx, status="failed", error=f"{type(exc).__name__}: {exc}")
    except Exception:
        pass


def world_summary(config: ExperimentConfig) -> str:
    world = W.generate_world(seed=config["run.seed"], **config.world_kwargs())
    split = W.base_novel_split(world, config["world.base_fraction"],
                               seed=config["run.seed"])
    lines = [
        f"world seed {world.seed}: {world.n_classes} classes, "
        f"{world.n_attributes} shared attributes, latent dim {world.latent_dim}, "
        f"noise sigma {world.noise_sigma}",
        f"base classes:  {list(split.base_classes)}",
        f"novel classes: {list(split.novel_classes)}",
        "per-class attribute mixtures (class: name tokens | weights):",
    ]
    for c in range(world.n_classes):
        weights = " ".join(f"{w:.2f}" for w in world.class_attribute_mix[c])
        names = ",".join(str(t) for t in world.class_name_tokens[c])
        lines.append(f"  {c:3d}: [{names}] | {weights}")
    return "\n".join(lines)
