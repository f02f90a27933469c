"""Frozen toy dual encoder: parallel text and image transformers producing
L2-normalized features in one shared space, classified by temperature-scaled
cosine similarity.

The text encoder is CLIP-like: token + positional embeddings, pre-norm
blocks under a causal mask, final layer norm, pooling at the end-of-sequence
position, then a linear projection into the shared space. Images arrive as
patch feature grids and go through the same machinery with full attention
and mean pooling.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import world as W
from .prompts import PromptSequence, TokenLibrary
from .seeding import derive_rng
from .tensor import Tensor

MASK_NEG = -1e9
LOGIT_SCALE_INIT = 10.0
LOGIT_SCALE_RANGE = (1.0, 100.0)


class PretrainError(RuntimeError):
    """Contrastive pretraining failed to reach its retrieval target."""


@dataclass(frozen=True)
class EncoderDims:
    d_tok: int = 32
    d: int = 16
    text_blocks: int = 4
    image_blocks: int = 2
    heads: int = 2
    l_max: int = 16
    vocab: int = 128
    patches: int = 9
    d_img: int = 24
    ffn_mult: int = 2

    def __post_init__(self):
        if self.text_blocks < 2:
            raise ValueError("text encoder needs at least 2 blocks")
        if self.d_tok % self.heads or self.d_img % self.heads:
            raise ValueError(f"head count {self.heads} must divide both widths")


@dataclass
class EncoderStack:
    dims: EncoderDims
    params: dict[str, Tensor]
    frozen: bool = False

    @property
    def logit_scale(self) -> float:
        return float(self.params["logit_scale"].values)


@dataclass(frozen=True)
class Feature:
    vector: Tensor               # (d,), unit norm
    normalized: bool = True

    @property
    def values(self) -> np.ndarray:
        return self.vector.values


@dataclass(frozen=True)
class PredictionDistribution:
    probs: np.ndarray
    class_ids: tuple[int, ...]


def init_encoder_stack(dims: EncoderDims, rng: np.random.Generator) -> EncoderStack:
    params: dict[str, Tensor] = {}

    def p(name, arr):
        params[name] = Tensor(arr, requires_grad=True)

    def block(prefix, width):
        f = width * dims.ffn_mult
        for side in ("ln1", "ln2"):
            p(f"{prefix}.{side}.g", np.ones(width))
            p(f"{prefix}.{side}.b", np.zeros(width))
        for name in ("wq", "wk", "wv", "wo"):
            p(f"{prefix}.attn.{name}", rng.normal(size=(width, width)) / np.sqrt(width))
        p(f"{prefix}.attn.bo", np.zeros(width))
        p(f"{prefix}.ffn.w1", rng.normal(size=(width, f)) / np.sqrt(width))
        p(f"{prefix}.ffn.b1", np.zeros(f))
        p(f"{prefix}.ffn.w2", rng.normal(size=(f, width)) / np.sqrt(f))
        p(f"{prefix}.ffn.b2", np.zeros(width))

    p("text.embed", rng.normal(size=(dims.vocab, dims.d_tok)) * 0.02)
    p("text.pos", rng.normal(size=(dims.l_max, dims.d_tok)) * 0.01)
    for i in range(dims.text_blocks):
        block(f"text.{i}", dims.d_tok)
    p("text.lnf.g", np.ones(dims.d_tok))
    p("text.lnf.b", np.zeros(dims.d_tok))
    p("text.proj", rng.normal(size=(dims.d_tok, dims.d)) / np.sqrt(dims.d_tok))

    p("image.pos", rng.normal(size=(dims.patches, dims.d_img)) * 0.01)
    for i in range(dims.image_blocks):
        block(f"image.{i}", dims.d_img)
    p("image.lnf.g", np.ones(dims.d_img))
    p("image.lnf.b", np.zeros(dims.d_img))
    p("image.proj", rng.normal(size=(dims.d_img, dims.d)) / np.sqrt(dims.d_img))

    p("logit_scale", np.asarray(LOGIT_SCALE_INIT))
    return EncoderStack(dims=dims, params=params, frozen=False)


def freeze(stack: EncoderStack) -> EncoderStack:
    for t in stack.params.values():
        t.requires_grad = False
    stack.frozen = True
    return stack


def stack_hash(stack: EncoderStack) -> str:
    h = hashlib.sha256()
    for name in sorted(stack.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(stack.params[name].values).tobytes())
    return h.hexdigest()


def token_library(stack: EncoderStack) -> TokenLibrary:
    if not stack.frozen:
        raise ValueError("token library requires a frozen stack")
    return TokenLibrary(stack.params["text.embed"].values, stack.dims.l_max)


_mask_cache: dict[int, Tensor] = {}
_pool_cache: dict[int, Tensor] = {}


def _causal_mask(n: int) -> Tensor:
    m = _mask_cache.get(n)
    if m is None:
        m = Tensor(np.triu(np.full((n, n), MASK_NEG), k=1))
        _mask_cache[n] = m
    return m


def _mean_pool_matrix(n: int) -> Tensor:
    m = _pool_cache.get(n)
    if m is None:
        m = Tensor(np.full((1, n), 1.0 / n))
        _pool_cache[n] = m
    return m


def _affine_ln(stack, prefix, x):
    return T.add(T.mul(T.layer_norm(x), stack.params[f"{prefix}.g"]),
                 stack.params[f"{prefix}.b"])


def _attention(stack: EncoderStack, prefix: str, x: Tensor,
               mask_t: Tensor | None) -> Tensor:
    n, width = x.shape
    heads = stack.dims.heads
    dh = width // heads
    q = T.matmul(x, stack.params[f"{prefix}.wq"])
    k = T.matmul(x, stack.params[f"{prefix}.wk"])
    v = T.matmul(x, stack.params[f"{prefix}.wv"])
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = T.slice_axis(q, 1, lo, hi)
        kh = T.slice_axis(k, 1, lo, hi)
        vh = T.slice_axis(v, 1, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
        if mask_t is not None:
            scores = T.add(scores, mask_t)
        outs.append(T.matmul(T.softmax(scores), vh))
    merged = outs[0] if heads == 1 else T.concat(outs, axis=1)
    return T.add(T.matmul(merged, stack.params[f"{prefix}.wo"]),
                 stack.params[f"{prefix}.bo"])


def _ffn(stack: EncoderStack, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, stack.params[f"{prefix}.w1"]),
                     stack.params[f"{prefix}.b1"]))
    return T.add(T.matmul(h, stack.params[f"{prefix}.w2"]),
                 stack.params[f"{prefix}.b2"])


def _block(stack: EncoderStack, prefix: str, x: Tensor,
           mask_t: Tensor | None) -> Tensor:
    x = T.add(x, _attention(stack, f"{prefix}.attn", _affine_ln(stack, f"{prefix}.ln1", x), mask_t))
    return T.add(x, _ffn(stack, f"{prefix}.ffn", _affine_ln(stack, f"{prefix}.ln2", x)))


InjectMap = dict[int, list[tuple[int, Tensor]]]


def encode_text_matrix(stack: EncoderStack, x: Tensor, pool_index: int,
                       inject: InjectMap | None = None,
                       collect: list[np.ndarray] | None = None) -> Feature:
    """Core text path over an already-embedded (T, d_tok) matrix.

    ``inject`` maps a block index b (1-based, applied before running block
    b) to (position, fresh (1, d_tok) token) replacements; used by the
    deep prompt variant. ``collect`` receives each block's input values
    after any injection.
    """
    n, width = x.shape
    dims = stack.dims
    if n > dims.l_max:
        raise ValueError(f"sequence length {n} exceeds maximum {dims.l_max}")
    if width != dims.d_tok:
        raise ValueError(f"token width {width} != encoder width {dims.d_tok}")
    if not 0 <= pool_index < n:
        raise ValueError(f"pool index {pool_index} outside sequence of length {n}")
    pos = stack.params["text.pos"]
    h = T.add(x, T.slice_axis(pos, 0, 0, n) if n < dims.l_max else pos)
    mask = _causal_mask(n)
    for b in range(dims.text_blocks):
        if inject and (b + 1) in inject:
            rows = {p: tok for p, tok in inject[b + 1]}
            parts = [rows[i] if i in rows else T.slice_axis(h, 0, i, i + 1)
                     for i in range(n)]
            h = T.concat(parts, axis=0)
        if collect is not None:
            collect.append(h.values)
        h = _block(stack, f"text.{b}", h, mask)
    h = _affine_ln(stack, "text.lnf", h)
    pooled = T.slice_axis(h, 0, pool_index, pool_index + 1)
    feat = T.l2_normalize(T.reshape(T.matmul(pooled, stack.params["text.proj"]), (dims.d,)))
    return Feature(vector=feat)


def encode_text(prompt: PromptSequence, stack: EncoderStack,
                inject: InjectMap | None = None,
                collect: list[np.ndarray] | None = None) -> Feature:
    """Embed, run the causal blocks, pool at the suffix position, project,
    and L2-normalize. Gradient reaches prompt embeddings even when the
    stack is frozen."""
    return encode_text_matrix(stack, prompt.embedding_matrix(),
                              prompt.pool_index, inject=inject, collect=collect)


def encode_token_ids(stack: EncoderStack, token_ids) -> Feature:
    """Encode a raw token id sequence, framed with prefix and suffix."""
    ids = [W.PREFIX_ID, *[int(t) for t in token_ids], W.SUFFIX_ID]
    x = T.gather_rows(stack.params["text.embed"], ids)
    return encode_text_matrix(stack, x, pool_index=len(ids) - 1)


def encode_image(grid, stack: EncoderStack) -> Feature:
    dims = stack.dims
    x = grid if isinstance(grid, Tensor) else Tensor(np.asarray(grid, dtype=np.float64))
    if x.shape != (dims.patches, dims.d_img):
        raise ValueError(
            f"image grid shape {x.shape} != ({dims.patches}, {dims.d_img})")
    h = T.add(x, stack.params["image.pos"])
    for b in range(dims.image_blocks):
        h = _block(stack, f"image.{b}", h, None)
    h = _affine_ln(stack, "image.lnf", h)
    pooled = T.matmul(_mean_pool_matrix(dims.patches), h)
    feat = T.l2_normalize(T.reshape(T.matmul(pooled, stack.params["image.proj"]), (dims.d,)))
    return Feature(vector=feat)


def classify(image: Feature, class_features: list[Feature], logit_scale: float,
             class_ids: tuple[int, ...] | None = None) -> PredictionDistribution:
    """probs[c] proportional to exp(logit_scale * u . v_c)."""
    if not class_features:
        raise ValueError("need at least one class feature")
    if logit_scale <= 0:
        raise ValueError(f"logit_scale must be positive, got {logit_scale}")
    u = image.values
    vs = np.stack([f.values for f in class_features])
    for name, arr in (("image", u[None, :]), ("class", vs)):
        norms = np.linalg.norm(arr, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError(f"{name} feature is not normalized")
    logits = logit_scale * (vs @ u)
    logits -= logits.max()
    e = np.exp(logits)
    probs = e / e.sum()
    ids = tuple(range(len(class_features))) if class_ids is None else tuple(class_ids)
    if len(ids) != len(class_features):
        raise ValueError("class_ids length does not match class features")
    return PredictionDistribution(probs=probs, class_ids=ids)


# ---------------------------------------------------------------------------
# contrastive pretraining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    target: float = 0.9
    max_steps: int = 2000
    batch: int = 16
    lr: float = 3e-3
    eval_every: int = 25
    holdout: int = 64
    jitter: float = 0.35
    dims: EncoderDims = field(default_factory=EncoderDims)


def _encode_pair_batch(stack: EncoderStack, pairs) -> tuple[Tensor, Tensor]:
    img_rows, txt_rows = [], []
    for pair in pairs:
        img = encode_image(pair.image_grid, stack)
        txt = encode_token_ids(stack, pair.caption_tokens)
        img_rows.append(T.reshape(img.vector, (1, stack.dims.d)))
        txt_rows.append(T.reshape(txt.vector, (1, stack.dims.d)))
    return T.concat(img_rows, axis=0), T.concat(txt_rows, axis=0)


def _retrieval_top1(stack: EncoderStack, groups) -> float:
    """Mean image-to-caption top-1 within class-distinct pair groups."""
    hits, total = 0, 0
    for pairs in groups:
        with T.no_grad():
            u, v = _encode_pair_batch(stack, pairs)
        sims = u.values @ v.values.T
        hits += int(np.sum(sims.argmax(axis=1) == np.arange(len(pairs))))
        total += len(pairs)
    return hits / total


def pretrain_contrastive(world: W.SynthWorld, config: PretrainConfig,
                         seed: int) -> EncoderStack:
    """Train both encoders with symmetric in-batch InfoNCE until held-out
    image-to-caption retrieval top-1 reaches the target, then freeze."""
    stack = init_encoder_stack(config.dims, derive_rng(seed, "pretrain-init"))
    data_rng = derive_rng(seed, "pretrain-data")
    holdout_rng = derive_rng(seed, "pretrain-holdout")

    # held-out groups of one pair per class; retrieval runs within a group
    classes = np.arange(world.n_classes)
    n_groups = max(1, round(config.holdout / world.n_classes))
    holdout_groups = [W.pretrain_pairs(world, classes, holdout_rng, config.jitter)
                      for _ in range(n_groups)]

    opt = T.Adam(stack.params.values(), lr=config.lr)
    scale_param = stack.params["logit_scale"]
    batch = min(config.batch, world.n_classes)
    accuracy = 0.0
    for step in range(1, config.max_steps + 1):
        chosen = data_rng.choice(world.n_classes, size=batch, replace=False)
        pairs = W.pretrain_pairs(world, chosen, data_rng, config.jitter)
        u, v = _encode_pair_batch(stack, pairs)
        logits = T.mul(T.matmul(u, T.transpose(v)), scale_param)
        labels = list(range(batch))
        loss = T.scale(T.add(T.softmax_cross_entropy(logits, labels),
                             T.softmax_cross_entropy(T.transpose(logits), labels)), 0.5)
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        scale_param.assign(np.clip(scale_param.values, *LOGIT_SCALE_RANGE))
        if step % config.eval_every == 0 or step == config.max_steps:
            accuracy = _retrieval_top1(stack, holdout_groups)
            if accuracy >= config.target:
                return freeze(stack)
    raise PretrainError(
        f"retrieval top-1 {accuracy:.3f} below target {config.target} "
        f"after {config.max_steps} steps")
