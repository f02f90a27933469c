"""Training procedures: anchor optimization against description features
(stage 1), adaptation of soft tokens and the position matrix under
cross-entropy plus ensemble distillation (stage 2), the one-stage
alternating variant, and the deep prompt forward path.

The encoder stack is frozen throughout; only prompt-side leaves update.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import encoder as E
from . import prompts as P
from . import tensor as T
from . import world as W
from .encoder import EncoderStack, Feature, PredictionDistribution
from .prompts import PositionMatrix, PromptSequence, PromptToken, TokenLibrary
from .seeding import derive_rng
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message carries step and loss components."""


ARRANGEMENT_CHOICES = ("matrix", "before_soft", "middle", "after_class",
                       "coop", "atprompt")
KD_DIRECTIONS = ("ens_to_norm", "norm_to_ens")


@dataclass
class TrainerConfig:
    m_soft: int = 6
    n_anchor: int = 1
    preposition: str | None = "of"
    arrangement: str = "matrix"
    position_forward: str = "hard_st"
    gumbel_temperature: float = 1.0
    lambda_ce: float = 1.0
    lambda_kd: float = 10.0
    kd_direction: str = "ens_to_norm"
    stage1_steps: int = 200
    stage2_steps: int = 300
    stage1_lr: float = 0.002
    stage2_lr: float = 0.002
    momentum: float = 0.9
    batch: int = 32
    n_descriptions: int = 5
    deep_depth: int = 1
    alternation: int = 1
    one_stage_steps: int = 500
    atprompt_attributes: int = 2

    def __post_init__(self):
        if self.arrangement not in ARRANGEMENT_CHOICES:
            raise ValueError(f"arrangement must be one of {ARRANGEMENT_CHOICES}")
        if self.kd_direction not in KD_DIRECTIONS:
            raise ValueError(f"kd_direction must be one of {KD_DIRECTIONS}")
        if self.position_forward not in P.FORWARD_MODES:
            raise ValueError(f"position_forward must be one of {P.FORWARD_MODES}")


@dataclass
class LossBreakdown:
    ce: float
    kd: float
    total: float
    lambda_ce: float
    lambda_kd: float

    def __post_init__(self):
        expected = self.lambda_ce * self.ce + self.lambda_kd * self.kd
        if abs(self.total - expected) > 1e-9:
            raise ValueError(f"total {self.total} != "
                             f"{self.lambda_ce} * ce + {self.lambda_kd} * kd")


@dataclass
class TrainState:
    soft: list[PromptToken]
    anchors: list[PromptToken]
    position: PositionMatrix
    soft_attr: list[PromptToken] = field(default_factory=list)
    attribute_block: Tensor | None = None
    deep_soft: list[list[PromptToken]] = field(default_factory=list)
    seed: int = 0
    stage: str = "init"
    stage1_trace: list[float] = field(default_factory=list)
    stage2_trace: list[LossBreakdown] = field(default_factory=list)


def init_train_state(cfg: TrainerConfig, d_tok: int, seed: int) -> TrainState:
    soft = P.make_tokens(cfg.m_soft, d_tok, derive_rng(seed, "init-soft"), role="soft")
    anchors = P.make_tokens(cfg.n_anchor, d_tok, derive_rng(seed, "init-anchor"),
                            role="anchor")
    size = cfg.m_soft + cfg.n_anchor
    position = PositionMatrix(size, temperature=cfg.gumbel_temperature,
                              rng=derive_rng(seed, "init-position"))
    deep_rng = derive_rng(seed, "init-deep")
    deep = [P.make_tokens(cfg.m_soft, d_tok, deep_rng, role="soft")
            for _ in range(max(0, cfg.deep_depth - 1))]
    soft_attr = []
    if cfg.arrangement == "atprompt":
        soft_attr = P.make_tokens(cfg.atprompt_attributes, d_tok,
                                  derive_rng(seed, "init-soft-attr"), role="soft")
    return TrainState(soft=soft, anchors=anchors, position=position,
                      soft_attr=soft_attr, deep_soft=deep, seed=seed)


def freeze_anchors(state: TrainState) -> None:
    for tok in state.anchors:
        tok.trainable = False
        tok.embedding.requires_grad = False


def thaw_anchors(state: TrainState) -> None:
    for tok in state.anchors:
        tok.trainable = True
        tok.embedding.requires_grad = True


def _hash_arrays(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def state_hashes(state: TrainState) -> dict[str, str]:
    return {
        "soft": _hash_arrays([t.embedding.values for t in state.soft + state.soft_attr]),
        "anchors": _hash_arrays([t.embedding.values for t in state.anchors]),
        "position": _hash_arrays([state.position.logits.values]),
        "deep": _hash_arrays([t.embedding.values
                              for layer in state.deep_soft for t in layer]),
    }


def attribute_anchor_block(world: W.SynthWorld, lib: TokenLibrary,
                           count: int) -> Tensor:
    """Frozen explicit-anchor embeddings: one caption token rendered from
    each of the most-used attribute latents."""
    usage = world.class_attribute_mix.sum(axis=0)
    top = np.argsort(-usage)[:count]
    ids = []
    for a in top:
        logits = world.caption_maps[0] @ world.attribute_latents[a]
        ids.append(W.CONTENT_LO + int(logits.argmax()))
    return lib.rows(ids)


# ---------------------------------------------------------------------------
# prompt assembly shared by training and evaluation
# ---------------------------------------------------------------------------

def class_prompt(state: TrainState, class_block: P.PromptSegment,
                 lib: TokenLibrary, cfg: TrainerConfig,
                 realized: Tensor | None = None) -> PromptSequence:
    a = cfg.arrangement
    if a == "matrix":
        if realized is None:
            raise ValueError("matrix arrangement needs a realized position matrix")
        return P.compose_normal_prompt(state.soft, state.anchors, realized,
                                       class_block, lib)
    if a == "coop":
        return P.build_coop_prompt(state.soft, class_block, lib)
    if a == "atprompt":
        return P.build_atprompt(state.attribute_block, state.soft_attr,
                                state.soft, class_block, lib)
    return P.build_fixed_arrangement_prompt(state.soft, state.anchors, a,
                                            class_block, lib)


def encode_class_prompt(state: TrainState, class_block: P.PromptSegment,
                        lib: TokenLibrary, cfg: TrainerConfig, stack: EncoderStack,
                        realized: Tensor | None = None) -> Feature:
    seq = class_prompt(state, class_block, lib, cfg, realized)
    if cfg.deep_depth > 1:
        return forward_deep(seq, state.deep_soft, stack, cfg.deep_depth)
    return E.encode_text(seq, stack)


def anchor_class_features(state: TrainState, stack: EncoderStack,
                          classes, world: W.SynthWorld,
                          cfg: TrainerConfig) -> np.ndarray:
    """Frozen anchor-prompt features, one row per class (no gradients)."""
    lib = E.token_library(stack)
    rows = []
    with T.no_grad():
        for c in classes:
            seq = P.build_anchor_prompt(state.anchors,
                                        lib.class_block(world.class_name_tokens[c]),
                                        lib, preposition=cfg.preposition)
            rows.append(E.encode_text(seq, stack).values)
    return np.stack(rows)


def ensemble_predict(q_norm: PredictionDistribution,
                     q_anc: PredictionDistribution) -> PredictionDistribution:
    """Equal-weight average of the two class distributions."""
    if q_norm.class_ids != q_anc.class_ids:
        raise ValueError(f"class sets differ: {q_norm.class_ids} vs {q_anc.class_ids}")
    return PredictionDistribution(probs=0.5 * (q_norm.probs + q_anc.probs),
                                  class_ids=q_norm.class_ids)


def forward_deep(prompt: PromptSequence, deep_soft: list[list[PromptToken]],
                 stack: EncoderStack, depth: int,
                 collect: list[np.ndarray] | None = None) -> Feature:
    """Deep prompt path: before each block 2..depth, hidden states at
    soft-token positions are replaced by that layer's fresh tokens while
    anchor, class, and framing positions keep their processed states.
    """
    if depth > stack.dims.text_blocks:
        raise ValueError(f"deep depth {depth} exceeds {stack.dims.text_blocks} blocks")
    if depth <= 1:
        return E.encode_text(prompt, stack, collect=collect)
    if len(deep_soft) < depth - 1:
        raise ValueError(f"need {depth - 1} layers of deep soft tokens, "
                         f"got {len(deep_soft)}")
    soft_pos = prompt.soft_positions()
    inject: E.InjectMap = {}
    for layer in range(2, depth + 1):
        tokens = deep_soft[layer - 2]
        inject[layer] = [(pos, tokens[src].embedding)
                         for pos, src in soft_pos if src < len(tokens)]
    return E.encode_text(prompt, stack, inject=inject, collect=collect)


# ---------------------------------------------------------------------------
# stage 1: anchor optimization
# ---------------------------------------------------------------------------

def _description_targets(world, stack, classes, n_desc):
    targets = {}
    with T.no_grad():
        for c in classes:
            descs = W.generate_descriptions(world, c, n_desc)
            targets[c] = [E.encode_token_ids(stack, d).values for d in descs]
    return targets


def train_stage1_anchor(state: TrainState, world: W.SynthWorld,
                        stack: EncoderStack, cfg: TrainerConfig,
                        classes) -> list[float]:
    """Align the anchor prompt with class description features by MSE;
    updates anchors only and freezes them on return."""
    classes = sorted(classes)
    if not classes:
        raise ValueError("no training classes")
    if cfg.n_descriptions < 1:
        raise ValueError("need at least one description per class")
    if not state.anchors:
        raise ValueError("state has no anchor tokens")
    thaw_anchors(state)
    targets = _description_targets(world, stack, classes, cfg.n_descriptions)
    lib = E.token_library(stack)
    blocks = {c: lib.class_block(world.class_name_tokens[c]) for c in classes}
    rng = derive_rng(state.seed, "stage1")
    opt = T.SGD([t.embedding for t in state.anchors],
                lr=cfg.stage1_lr, momentum=cfg.momentum)
    trace = []
    for _ in range(cfg.stage1_steps):
        c = classes[int(rng.integers(len(classes)))]
        i = int(rng.integers(cfg.n_descriptions))
        seq = P.build_anchor_prompt(state.anchors, blocks[c], lib,
                                    preposition=cfg.preposition)
        feat = E.encode_text(seq, stack)
        loss = T.mse(feat.vector, Tensor(targets[c][i]))
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        trace.append(loss.item())
    freeze_anchors(state)
    state.stage = "stage1"
    state.stage1_trace = trace
    return trace


# ---------------------------------------------------------------------------
# stage 2: adaptation
# ---------------------------------------------------------------------------

def _image_features(stack, dataset) -> np.ndarray:
    with T.no_grad():
        return np.stack([E.encode_image(s.image_grid, stack).values for s in dataset])


def _probs(scale: float, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    logits = scale * (u @ v.T)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def _trainable_params(state: TrainState, cfg: TrainerConfig) -> list[Tensor]:
    params = [t.embedding for t in state.soft + state.soft_attr]
    if cfg.arrangement == "matrix":
        params.append(state.position.logits)
    for layer in state.deep_soft[:max(0, cfg.deep_depth - 1)]:
        params.extend(t.embedding for t in layer)
    return params


def _adapt_step(state, cfg, stack, lib, blocks, classes, rng, u_all, labels,
                q_anc_all, opt, lambda_kd, step_no) -> LossBreakdown:
    n = len(labels)
    idx = rng.choice(n, size=min(cfg.batch, n), replace=False)
    u_batch = Tensor(u_all[idx])
    y = [int(labels[i]) for i in idx]

    realized = None
    if cfg.arrangement == "matrix":
        realized, _ = P.sample_position_matrix(state.position, rng, training=True,
                                               forward_mode=cfg.position_forward)
    rows = [T.reshape(encode_class_prompt(state, blocks[c], lib, cfg, stack,
                                          realized).vector, (1, stack.dims.d))
            for c in classes]
    v = T.concat(rows, axis=0)
    logits = T.scale(T.matmul(u_batch, T.transpose(v)), stack.logit_scale)
    ce = T.softmax_cross_entropy(logits, y)

    if q_anc_all is not None:
        q_norm = T.softmax(logits)
        # ensemble teacher is detached: no gradient flows through the target
        q_ens = Tensor(0.5 * (q_norm.values + q_anc_all[idx]))
        if cfg.kd_direction == "ens_to_norm":
            kd = T.kl_divergence(q_ens, q_norm)
        else:
            kd = T.kl_divergence(q_norm, q_ens)
        total = T.add(T.scale(ce, cfg.lambda_ce), T.scale(kd, lambda_kd))
        kd_val = kd.item()
    else:
        total = T.scale(ce, cfg.lambda_ce)
        kd_val = 0.0

    ce_val, total_val = ce.item(), total.item()
    if not np.isfinite(total_val):
        raise TrainingDiverged(
            f"step {step_no}: non-finite loss (ce={ce_val}, kd={kd_val})")
    T.backward(total)
    opt.step()
    opt.zero_grad()
    return LossBreakdown(ce=ce_val, kd=kd_val,
                         total=cfg.lambda_ce * ce_val + lambda_kd * kd_val,
                         lambda_ce=cfg.lambda_ce, lambda_kd=lambda_kd)


def train_stage2_adapt(state: TrainState, dataset, world: W.SynthWorld,
                       stack: EncoderStack, cfg: TrainerConfig) -> list[LossBreakdown]:
    """Adapt soft tokens (and the position matrix) on base classes with
    cross-entropy plus distillation from the detached prompt ensemble."""
    if any(t.trainable for t in state.anchors):
        raise ValueError("anchors must be frozen before adaptation")
    classes = sorted({s.label for s in dataset})
    class_index = {c: i for i, c in enumerate(classes)}
    labels = np.array([class_index[s.label] for s in dataset])
    lib = E.token_library(stack)
    blocks = {c: lib.class_block(world.class_name_tokens[c]) for c in classes}
    if cfg.arrangement == "atprompt" and state.attribute_block is None:
        state.attribute_block = attribute_anchor_block(world, lib,
                                                       cfg.atprompt_attributes)

    u_all = _image_features(stack, dataset)
    use_kd = bool(state.anchors) and cfg.arrangement != "coop"
    q_anc_all = None
    if use_kd:
        v_anc = anchor_class_features(state, stack, classes, world, cfg)
        q_anc_all = _probs(stack.logit_scale, u_all, v_anc)

    rng = derive_rng(state.seed, "stage2")
    opt = T.SGD(_trainable_params(state, cfg), lr=cfg.stage2_lr, momentum=cfg.momentum)
    trace = []
    for step in range(1, cfg.stage2_steps + 1):
        try:
            trace.append(_adapt_step(state, cfg, stack, lib, blocks, classes, rng,
                                     u_all, labels, q_anc_all, opt,
                                     cfg.lambda_kd, step))
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
    state.stage = "stage2" if state.stage in ("stage1", "stage2") else state.stage
    state.stage2_trace = trace
    return trace


# ---------------------------------------------------------------------------
# one-stage alternating variant
# ---------------------------------------------------------------------------

def train_one_stage(state: TrainState, dataset, world: W.SynthWorld,
                    stack: EncoderStack, cfg: TrainerConfig) -> list[LossBreakdown]:
    """Alternate anchor MSE steps with CE-only adaptation steps; the
    distillation objective is dropped entirely."""
    if state.stage != "init":
        raise ValueError("one-stage training needs a fresh state")
    classes = sorted({s.label for s in dataset})
    class_index = {c: i for i, c in enumerate(classes)}
    labels = np.array([class_index[s.label] for s in dataset])
    lib = E.token_library(stack)
    blocks = {c: lib.class_block(world.class_name_tokens[c]) for c in classes}

    targets = _description_targets(world, stack, classes, cfg.n_descriptions)
    u_all = _image_features(stack, dataset)

    rng_a = derive_rng(state.seed, "stage1")
    rng_b = derive_rng(state.seed, "stage2")
    opt_a = T.SGD([t.embedding for t in state.anchors],
                  lr=cfg.stage1_lr, momentum=cfg.momentum)
    opt_b = T.SGD(_trainable_params(state, cfg), lr=cfg.stage2_lr,
                  momentum=cfg.momentum)
    period = max(1, cfg.alternation)
    trace = []
    mse_trace = []
    for step in range(cfg.one_stage_steps):
        phase_a = (step // period) % 2 == 0
        if phase_a:
            thaw_anchors(state)
            c = classes[int(rng_a.integers(len(classes)))]
            i = int(rng_a.integers(cfg.n_descriptions))
            seq = P.build_anchor_prompt(state.anchors, blocks[c], lib,
                                        preposition=cfg.preposition)
            loss = T.mse(E.encode_text(seq, stack).vector, Tensor(targets[c][i]))
            T.backward(loss)
            opt_a.step()
            opt_a.zero_grad()
            mse_trace.append(loss.item())
        else:
            freeze_anchors(state)
            trace.append(_adapt_step(state, cfg, stack, lib, blocks, classes,
                                     rng_b, u_all, labels, None, opt_b,
                                     0.0, step + 1))
    freeze_anchors(state)
    state.stage = "one_stage"
    state.stage1_trace = mse_trace
    state.stage2_trace = trace
    return trace
