"""Prompt construction: soft/anchor tokens, templates, and the learnable
position matrix with its Gumbel-Softmax realizations.

A prompt is an ordered list of role-tagged segments ([prefix] first,
[suffix] last, exactly one contiguous class block). The position matrix
reorders only the stacked soft+anchor block; class tokens never move.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .world import PREFIX_ID, PREPOSITION_IDS, SUFFIX_ID

ROLES = ("prefix", "soft", "anchor", "preposition", "class", "suffix", "attribute")
TRAINABLE_ROLES = ("soft", "anchor")
ARRANGEMENTS = ("matrix", "before_soft", "middle", "after_class")
FORWARD_MODES = ("hard_st", "soft")


@dataclass
class PromptToken:
    embedding: Tensor            # (1, d_tok)
    role: str
    trainable: bool = False

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown token role {self.role!r}")
        if self.trainable and self.role not in TRAINABLE_ROLES:
            raise ValueError(f"role {self.role!r} must not be trainable")
        if self.embedding.values.ndim != 2 or self.embedding.shape[0] != 1:
            raise ValueError(f"token embedding must be a (1, d) row, got {self.embedding.shape}")


@dataclass
class PromptSegment:
    role: str
    tensor: Tensor               # (rows, d_tok)
    row_roles: list[str] | None = None     # per-row roles for mixed blocks
    row_sources: list[int] | None = None   # source index in the stacked block

    @property
    def rows(self) -> int:
        return self.tensor.shape[0]


class PromptSequence:
    """Ordered role-tagged token embeddings forming encoder input."""

    def __init__(self, segments: Sequence[PromptSegment], l_max: int):
        segments = list(segments)
        if not segments or segments[0].role != "prefix":
            raise ValueError("prompt must start with a prefix token")
        if segments[-1].role != "suffix":
            raise ValueError("prompt must end with a suffix token")
        class_segs = [s for s in segments if s.role == "class"]
        if len(class_segs) != 1:
            raise ValueError(f"prompt needs exactly one class block, got {len(class_segs)}")
        widths = {s.tensor.shape[1] for s in segments}
        if len(widths) != 1:
            raise ValueError(f"segment widths differ: {sorted(widths)}")
        length = sum(s.rows for s in segments)
        if length > l_max:
            raise ValueError(f"prompt length {length} exceeds maximum {l_max}")
        self.segments = segments
        self.length = length
        self.l_max = l_max
        offset = 0
        self.class_block_span = (0, 0)
        for s in segments:
            if s.role == "class":
                self.class_block_span = (offset, offset + s.rows)
            offset += s.rows

    @property
    def pool_index(self) -> int:
        return self.length - 1

    def embedding_matrix(self) -> Tensor:
        if len(self.segments) == 1:
            return self.segments[0].tensor
        return T.concat([s.tensor for s in self.segments], axis=0)

    def position_roles(self) -> list[str]:
        roles: list[str] = []
        for s in self.segments:
            roles.extend(s.row_roles if s.row_roles is not None else [s.role] * s.rows)
        return roles

    def soft_positions(self) -> list[tuple[int, int]]:
        """(position, soft-token index) pairs, for deep-layer reinjection."""
        out: list[tuple[int, int]] = []
        offset = 0
        for s in self.segments:
            if s.row_roles is not None:
                for i, (role, src) in enumerate(zip(s.row_roles, s.row_sources)):
                    if role == "soft":
                        out.append((offset + i, src))
            elif s.role == "soft":
                for i in range(s.rows):
                    out.append((offset + i, len(out)))
            offset += s.rows
        return out


class TokenLibrary:
    """Frozen embedding rows for framing and vocabulary tokens."""

    def __init__(self, table_values: np.ndarray, l_max: int):
        self.table = np.asarray(table_values, dtype=np.float64)
        self.l_max = int(l_max)
        self.d_tok = self.table.shape[1]

    def row(self, token_id: int) -> Tensor:
        return Tensor(self.table[token_id:token_id + 1])

    def rows(self, token_ids: Sequence[int]) -> Tensor:
        return Tensor(self.table[np.asarray(token_ids, dtype=np.intp)])

    def prefix(self) -> PromptSegment:
        return PromptSegment("prefix", self.row(PREFIX_ID))

    def suffix(self) -> PromptSegment:
        return PromptSegment("suffix", self.row(SUFFIX_ID))

    def preposition(self, name: str) -> PromptSegment:
        if name not in PREPOSITION_IDS:
            raise ValueError(f"unknown preposition {name!r}; "
                             f"expected one of {sorted(PREPOSITION_IDS)}")
        return PromptSegment("preposition", self.row(PREPOSITION_IDS[name]))

    def class_block(self, token_ids: Sequence[int]) -> PromptSegment:
        return PromptSegment("class", self.rows(token_ids))


def make_tokens(n: int, d_tok: int, rng: np.random.Generator, role: str,
                std: float = 0.02) -> list[PromptToken]:
    """Trainable tokens initialized from N(0, std^2)."""
    return [PromptToken(Tensor(rng.normal(size=(1, d_tok)) * std, requires_grad=True),
                        role=role, trainable=True)
            for _ in range(n)]


def _token_segments(tokens: Sequence[PromptToken]) -> list[PromptSegment]:
    return [PromptSegment(t.role, t.embedding) for t in tokens]


def build_coop_prompt(soft: Sequence[PromptToken], class_block: PromptSegment,
                      lib: TokenLibrary) -> PromptSequence:
    """[prefix][V_1..V_M][CLS..][suffix]"""
    if len(soft) < 1:
        raise ValueError("need at least one soft token")
    return PromptSequence(
        [lib.prefix(), *_token_segments(soft), class_block, lib.suffix()], lib.l_max)


def build_atprompt(attribute_block: Tensor | None, soft_a: Sequence[PromptToken],
                   soft: Sequence[PromptToken], class_block: PromptSegment,
                   lib: TokenLibrary) -> PromptSequence:
    """Fixed-anchor baseline: [prefix][Va_1..][Anc_e..][V_1..V_M][CLS][suffix].

    The attribute block rows are explicit frozen anchor embeddings; with no
    attributes this reduces to the plain soft-token prompt.
    """
    segs = [lib.prefix(), *_token_segments(soft_a)]
    if attribute_block is not None and attribute_block.shape[0] > 0:
        segs.append(PromptSegment("attribute", attribute_block))
    segs += [*_token_segments(soft), class_block, lib.suffix()]
    return PromptSequence(segs, lib.l_max)


def build_anchor_prompt(anchors: Sequence[PromptToken], class_block: PromptSegment,
                        lib: TokenLibrary, preposition: str | None = "of") -> PromptSequence:
    """[prefix][Anc_1..N][of][CLS..][suffix]; preposition None drops the slot."""
    if len(anchors) < 1:
        raise ValueError("need at least one anchor token")
    segs = [lib.prefix(), *_token_segments(anchors)]
    if preposition is not None:
        segs.append(lib.preposition(preposition))
    segs += [class_block, lib.suffix()]
    return PromptSequence(segs, lib.l_max)


def build_fixed_arrangement_prompt(soft: Sequence[PromptToken],
                                   anchors: Sequence[PromptToken],
                                   arrangement: str, class_block: PromptSegment,
                                   lib: TokenLibrary) -> PromptSequence:
    """Anchors spliced at a named fixed position, bypassing the matrix."""
    soft_segs = _token_segments(soft)
    anchor_segs = _token_segments(anchors)
    if arrangement == "before_soft":
        middle = anchor_segs + soft_segs + [class_block]
    elif arrangement == "middle":
        half = (len(soft) + 1) // 2
        middle = soft_segs[:half] + anchor_segs + soft_segs[half:] + [class_block]
    elif arrangement == "after_class":
        middle = soft_segs + [class_block] + anchor_segs
    else:
        raise ValueError(f"unknown fixed arrangement {arrangement!r}")
    return PromptSequence([lib.prefix(), *middle, lib.suffix()], lib.l_max)


class PositionMatrix:
    """Learnable (M+N) x (M+N) assignment logits.

    Row i scores which source token occupies output position i; rows are
    independent categoricals, so tokens may repeat or drop.
    """

    def __init__(self, size: int, temperature: float = 1.0,
                 rng: np.random.Generator | None = None,
                 logits: np.ndarray | None = None):
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        if logits is None:
            if rng is None:
                raise ValueError("need rng or explicit logits")
            logits = rng.normal(size=(size, size))
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (size, size):
            raise ValueError(f"logits shape {logits.shape} != ({size}, {size})")
        self.size = size
        self.temperature = float(temperature)
        self.logits = Tensor(logits, requires_grad=True)


def hard_assignment(pm: PositionMatrix) -> np.ndarray:
    """Noise-free one-hot rows (inference realization)."""
    idx = pm.logits.values.argmax(axis=-1)
    out = np.zeros((pm.size, pm.size))
    out[np.arange(pm.size), idx] = 1.0
    return out


def sample_position_matrix(pm: PositionMatrix, rng: np.random.Generator | int,
                           training: bool, forward_mode: str = "hard_st",
                           ) -> tuple[Tensor, np.ndarray | None]:
    """Realize the position matrix, returning (matrix, saved noise).

    training=True draws fresh Gumbel(0,1) noise per entry; forward values
    are hard one-hot rows with straight-through soft gradients (or the soft
    rows themselves under forward_mode="soft"). training=False is the pure
    noise-free argmax with no gradient.
    """
    if forward_mode not in FORWARD_MODES:
        raise ValueError(f"forward_mode must be one of {FORWARD_MODES}, got {forward_mode!r}")
    if not training:
        return Tensor(hard_assignment(pm)), None
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    noise = rng.gumbel(size=(pm.size, pm.size))
    realized = T.gumbel_softmax(pm.logits, temperature=pm.temperature,
                                noise=noise, hard=(forward_mode == "hard_st"))
    return realized, noise


def soft_realization(pm: PositionMatrix, noise: np.ndarray) -> Tensor:
    """The tempered soft rows for a fixed noise draw."""
    return T.gumbel_softmax(pm.logits, temperature=pm.temperature,
                            noise=noise, hard=False)


def compose_normal_prompt(soft: Sequence[PromptToken], anchors: Sequence[PromptToken],
                          realized: Tensor, class_block: PromptSegment,
                          lib: TokenLibrary) -> PromptSequence:
    """Stack [V_1..V_M, Anc_1..Anc_N], left-multiply by the realized matrix,
    then frame with prefix, class block, and suffix.

    Row i of the realized matrix selects (or blends) the source token for
    output position i; class tokens never participate in the reordering.
    """
    m, n = len(soft), len(anchors)
    size = m + n
    if realized.shape != (size, size):
        raise ValueError(
            f"position matrix shape {realized.shape} does not match "
            f"{m} soft + {n} anchor tokens")
    stacked = T.concat([t.embedding for t in [*soft, *anchors]], axis=0)
    block = T.matmul(realized, stacked)
    sources = realized.values.argmax(axis=-1)
    row_roles = ["soft" if s < m else "anchor" for s in sources]
    seg = PromptSegment("soft", block, row_roles=row_roles,
                        row_sources=[int(s) for s in sources])
    return PromptSequence([lib.prefix(), seg, class_block, lib.suffix()], lib.l_max)
