"""Base-to-novel evaluation with the trained-prompt routing rule, the
cross-world (distribution shift) analog, the harmonic-mean metric, and the
single-axis ablation grids.

Routing: base-class samples are scored by the normal prompt alone; novel
classes use the equal-weight ensemble of normal and anchor prompts. At
evaluation time the position matrix is the noise-free argmax realization.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder as E
from . import prompts as P
from . import tensor as T
from . import training as TR
from . import world as W
from .encoder import EncoderStack
from .seeding import derive_rng
from .training import TrainerConfig, TrainState


@dataclass(frozen=True)
class MetricsRecord:
    base_acc: float
    novel_acc: float
    hm: float
    per_class_acc: dict[int, float]
    seed: int
    config_digest: str
    runtime_seconds: float


def harmonic_mean(base: float, novel: float) -> float:
    """2bn/(b+n) on percentages; 0 when both sides vanish."""
    for name, v in (("base", base), ("novel", novel)):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"{name} accuracy {v} outside [0, 100]")
    if base + novel == 0.0:
        return 0.0
    return 2.0 * base * novel / (base + novel)


def _eval_seed(seed: int, name: str) -> int:
    return int(derive_rng(seed, name).integers(2**31))


def _class_features(state: TrainState, stack: EncoderStack, world: W.SynthWorld,
                    cfg: TrainerConfig, classes) -> np.ndarray:
    """Normal-prompt features per class under the deterministic hard matrix."""
    lib = E.token_library(stack)
    realized = None
    if cfg.arrangement == "matrix":
        realized, _ = P.sample_position_matrix(state.position, 0, training=False)
    rows = []
    with T.no_grad():
        for c in classes:
            block = lib.class_block(world.class_name_tokens[c])
            rows.append(TR.encode_class_prompt(state, block, lib, cfg, stack,
                                               realized).values)
    return np.stack(rows)


def _accuracy(stack, samples, classes, v_norm, v_anc=None):
    """Argmax accuracy; ties break toward the lowest class index."""
    hits = 0
    per_class_hits = {c: 0 for c in classes}
    per_class_n = {c: 0 for c in classes}
    with T.no_grad():
        u = np.stack([E.encode_image(s.image_grid, stack).values for s in samples])
    probs = TR._probs(stack.logit_scale, u, v_norm)
    if v_anc is not None:
        probs = 0.5 * (probs + TR._probs(stack.logit_scale, u, v_anc))
    preds = probs.argmax(axis=1)
    for s, p in zip(samples, preds):
        per_class_n[s.label] += 1
        if classes[int(p)] == s.label:
            hits += 1
            per_class_hits[s.label] += 1
    acc = 100.0 * hits / len(samples)
    per_class = {c: 100.0 * per_class_hits[c] / per_class_n[c] for c in classes}
    return acc, per_class


def evaluate_base_to_novel(state: TrainState, split: W.SplitSpec,
                           world: W.SynthWorld, stack: EncoderStack,
                           cfg: TrainerConfig, n_eval: int, seed: int,
                           ensemble: bool = True,
                           config_digest: str = "") -> MetricsRecord:
    """Fresh samples per side; base routed through the normal prompt only,
    novel through the ensemble (when enabled and anchors exist)."""
    if state.stage == "init":
        raise ValueError("state is untrained")
    start = time.perf_counter()
    base = list(split.base_classes)
    novel = list(split.novel_classes)
    base_samples = W.sample_dataset(world, base, n_eval, seed=_eval_seed(seed, "eval-base"))
    novel_samples = W.sample_dataset(world, novel, n_eval, seed=_eval_seed(seed, "eval-novel"))

    v_base = _class_features(state, stack, world, cfg, base)
    base_acc, base_per_class = _accuracy(stack, base_samples, base, v_base)

    v_novel = _class_features(state, stack, world, cfg, novel)
    v_anc = None
    if ensemble and state.anchors and cfg.arrangement != "coop":
        v_anc = TR.anchor_class_features(state, stack, novel, world, cfg)
    novel_acc, novel_per_class = _accuracy(stack, novel_samples, novel, v_novel, v_anc)

    per_class = {**base_per_class, **novel_per_class}
    return MetricsRecord(base_acc=base_acc, novel_acc=novel_acc,
                         hm=harmonic_mean(base_acc, novel_acc),
                         per_class_acc=per_class, seed=seed,
                         config_digest=config_digest,
                         runtime_seconds=time.perf_counter() - start)


def evaluate_cross_world(state: TrainState, source_world: W.SynthWorld,
                         target_worlds, stack: EncoderStack, cfg: TrainerConfig,
                         split: W.SplitSpec, n_eval: int, seed: int,
                         config_digest: str = "") -> list[MetricsRecord]:
    """Zero-modification transfer: the trained prompts are re-scored against
    each shifted world's renders under the same split and eval seed."""
    if state.stage == "init":
        raise ValueError("state is untrained")
    records = []
    for target in target_worlds:
        if (target.n_patches, target.image_dim) != (source_world.n_patches,
                                                    source_world.image_dim):
            raise ValueError("target world image dimensions differ from source")
        if target.n_classes != source_world.n_classes:
            raise ValueError("target world class count differs from source")
        records.append(evaluate_base_to_novel(state, split, target, stack, cfg,
                                              n_eval, seed, ensemble=True,
                                              config_digest=config_digest))
    return records


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

ABLATION_AXES: dict[str, list] = {
    "preposition": ["of", "with", "at", "sun", "sea", "none"],
    "anchor_length": [1, 2, 3, 4],
    "arrangement": ["matrix", "before_soft", "middle", "after_class"],
    "kd": ["on", "off"],
    "gumbel_temperature": [0.1, 0.5, 1.0, 2.0, 4.0],
    "ensemble": ["on", "off"],
    "paradigm": ["two_stage", "one_stage"],
}


def wire_overrides(axis: str, value) -> dict[str, str]:
    """Dotted config overrides implementing one ablation cell."""
    if axis == "preposition":
        return {"prompt.preposition": str(value)}
    if axis == "anchor_length":
        return {"prompt.anchor_tokens": str(int(value))}
    if axis == "arrangement":
        return {"prompt.arrangement": str(value)}
    if axis == "kd":
        return {"train.lambda_kd": "0.0"} if value == "off" else {}
    if axis == "gumbel_temperature":
        return {"prompt.gumbel_temperature": str(float(value))}
    if axis == "ensemble":
        return {"eval.ensemble": "on" if value == "on" else "off"}
    if axis == "paradigm":
        return {"train.paradigm": str(value)}
    raise ValueError(f"unknown ablation axis {axis!r}")


@dataclass
class AblationCell:
    axis: str
    value: object
    overrides: dict[str, str]
    records: list[MetricsRecord] = field(default_factory=list)

    def summary(self) -> dict[str, float]:
        def agg(vals):
            arr = np.asarray(vals, dtype=np.float64)
            std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
            return float(arr.mean()), std

        base_m, base_s = agg([r.base_acc for r in self.records])
        novel_m, novel_s = agg([r.novel_acc for r in self.records])
        hm_m, hm_s = agg([r.hm for r in self.records])
        return {"base_mean": base_m, "base_std": base_s,
                "novel_mean": novel_m, "novel_std": novel_s,
                "hm_mean": hm_m, "hm_std": hm_s}


def run_ablation(grid: dict[str, list], seeds, run_cell) -> list[AblationCell]:
    """One factor at a time: ``grid`` must name exactly one known axis.

    ``run_cell(overrides, seed)`` executes a full run with the cell's
    dotted config overrides applied and returns a MetricsRecord.
    """
    if len(grid) != 1:
        raise ValueError(f"one factor at a time: got {len(grid)} axes {sorted(grid)}")
    axis, values = next(iter(grid.items()))
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; "
                         f"expected one of {sorted(ABLATION_AXES)}")
    allowed = ABLATION_AXES[axis]
    for v in values:
        if v not in allowed:
            raise ValueError(f"value {v!r} not in axis {axis!r} range {allowed}")
    cells = []
    for value in values:
        cell = AblationCell(axis=axis, value=value,
                            overrides=wire_overrides(axis, value))
        for seed in seeds:
            cell.records.append(run_cell(cell.overrides, seed))
        cells.append(cell)
    return cells
