"""Procedural classification world with shared cross-category attributes.

Each class latent mixes a few attribute latents (shared across classes)
with a class-unique component. Fixed random linear maps render latents to
image feature grids and to caption token logits, so captions, category
descriptions, and images all reflect the same attribute structure.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .seeding import derive_rng

# token id layout shared with the text encoder vocabulary
PREFIX_ID = 0
SUFFIX_ID = 1
PREPOSITION_IDS = {"of": 2, "with": 3, "at": 4, "sun": 5, "sea": 6}
CONTENT_LO = 8
CONTENT_HI = 96
NAME_LO = 96
NAME_HI = 128
VOCAB_SIZE = 128


@dataclass
class SynthWorld:
    seed: int
    n_classes: int
    n_attributes: int
    latent_dim: int
    noise_sigma: float
    n_patches: int
    image_dim: int
    caption_len: int
    unique_strength: float
    attribute_latents: np.ndarray        # (A, k)
    class_attribute_mix: np.ndarray      # (C, A), nonnegative rows summing to 1
    class_unique: np.ndarray             # (C, k)
    class_latents: np.ndarray            # (C, k)
    class_name_tokens: list[list[int]]
    image_map: np.ndarray                # (P * d_img, k)
    caption_maps: np.ndarray             # (caption_len, CONTENT_HI - CONTENT_LO, k)


@dataclass(frozen=True)
class LabeledSample:
    image_grid: np.ndarray
    label: int


@dataclass(frozen=True)
class SplitSpec:
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]


@dataclass(frozen=True)
class ShiftSpec:
    kind: str       # rotate-render-map | raise-noise | remap-attribute-mix
    factor: float


@dataclass(frozen=True)
class PretrainPair:
    image_grid: np.ndarray
    caption_tokens: tuple[int, ...]
    class_id: int


def _latent_from_mix(world_attrs: np.ndarray, mix: np.ndarray,
                     unique: np.ndarray, unique_strength: float) -> np.ndarray:
    return mix @ world_attrs + unique_strength * unique


def generate_world(seed: int, n_classes: int = 16, n_attributes: int = 4,
                   latent_dim: int = 12, noise_sigma: float = 0.3,
                   n_patches: int = 9, image_dim: int = 24,
                   caption_len: int = 4, unique_strength: float = 0.4,
                   render_gain: float = 1.5) -> SynthWorld:
    """Deterministic world; class latent = attribute mix + unique component."""
    if n_classes < 4:
        raise ValueError(f"need at least 4 classes, got {n_classes}")
    if n_attributes < 1:
        raise ValueError(f"need at least 1 attribute, got {n_attributes}")
    if latent_dim < 4:
        raise ValueError(f"need latent_dim >= 4, got {latent_dim}")
    if n_classes > NAME_HI - NAME_LO:
        raise ValueError(f"at most {NAME_HI - NAME_LO} classes fit the name vocabulary")

    rng = derive_rng(seed, "world")
    attrs = rng.normal(size=(n_attributes, latent_dim))
    attrs /= np.linalg.norm(attrs, axis=1, keepdims=True)

    # every class gets a primary attribute (round robin, so each attribute is
    # shared by several classes) and usually a weaker secondary one
    mix = np.zeros((n_classes, n_attributes))
    for c in range(n_classes):
        primary = c % n_attributes
        mix[c, primary] = 1.0
        if n_attributes > 1 and rng.random() < 0.75:
            secondary = int(rng.integers(n_attributes - 1))
            if secondary >= primary:
                secondary += 1
            mix[c, secondary] = 0.3 + 0.4 * rng.random()
    mix /= mix.sum(axis=1, keepdims=True)

    unique = rng.normal(size=(n_classes, latent_dim))
    unique /= np.linalg.norm(unique, axis=1, keepdims=True)
    latents = _latent_from_mix(attrs, mix, unique, unique_strength)

    name_ids = rng.permutation(np.arange(NAME_LO, NAME_HI))
    names: list[list[int]] = []
    cursor = 0
    for c in range(n_classes):
        length = 1 + int(rng.random() < 0.5)
        if cursor + length > len(name_ids):
            length = 1
        names.append([int(t) for t in name_ids[cursor:cursor + length]])
        cursor += length

    image_map = rng.normal(size=(n_patches * image_dim, latent_dim)) * (render_gain / np.sqrt(latent_dim))
    caption_maps = rng.normal(size=(caption_len, CONTENT_HI - CONTENT_LO, latent_dim))

    return SynthWorld(
        seed=seed, n_classes=n_classes, n_attributes=n_attributes,
        latent_dim=latent_dim, noise_sigma=noise_sigma, n_patches=n_patches,
        image_dim=image_dim, caption_len=caption_len,
        unique_strength=unique_strength, attribute_latents=attrs,
        class_attribute_mix=mix, class_unique=unique, class_latents=latents,
        class_name_tokens=names, image_map=image_map, caption_maps=caption_maps,
    )


def render_image(world: SynthWorld, latent: np.ndarray) -> np.ndarray:
    return (world.image_map @ latent).reshape(world.n_patches, world.image_dim)


def caption_content_tokens(world: SynthWorld, latent: np.ndarray) -> list[int]:
    logits = world.caption_maps @ latent   # (caption_len, content vocab)
    return [int(CONTENT_LO + j) for j in logits.argmax(axis=1)]


def perturbed_latent(world: SynthWorld, class_id: int,
                     rng: np.random.Generator, scale: float) -> np.ndarray:
    """Class latent rebuilt from a perturbed attribute mixture."""
    mix = world.class_attribute_mix[class_id] + scale * rng.normal(size=world.n_attributes)
    mix = np.clip(mix, 0.0, None)
    s = mix.sum()
    mix = world.class_attribute_mix[class_id] if s == 0 else mix / s
    return _latent_from_mix(world.attribute_latents, mix,
                            world.class_unique[class_id], world.unique_strength)


def caption_token_ids(world: SynthWorld, latent: np.ndarray, class_id: int) -> list[int]:
    """Caption body: content tokens, then "of", then the class name."""
    return (caption_content_tokens(world, latent)
            + [PREPOSITION_IDS["of"]]
            + world.class_name_tokens[class_id])


def sample_dataset(world: SynthWorld, classes, n_per_class: int,
                   seed: int) -> list[LabeledSample]:
    """n_per_class noisy renders per class, ordered class-major."""
    classes = sorted(int(c) for c in classes)
    if not classes:
        raise ValueError("empty class set")
    for c in classes:
        if not 0 <= c < world.n_classes:
            raise ValueError(f"class {c} outside world with {world.n_classes} classes")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    rng = derive_rng(seed, "dataset")
    out = []
    for c in classes:
        base = render_image(world, world.class_latents[c])
        for _ in range(n_per_class):
            noise = rng.normal(size=base.shape) * world.noise_sigma
            out.append(LabeledSample(image_grid=base + noise, label=c))
    return out


def generate_descriptions(world: SynthWorld, class_id: int, n: int,
                          scale: float = 0.35) -> list[list[int]]:
    """n caption token sequences for one class, each ending with its name.

    Each description renders the class latent under an independent
    perturbation of the attribute mixture; description i of a class is
    stable regardless of n.
    """
    if not 0 <= class_id < world.n_classes:
        raise ValueError(f"class {class_id} outside world")
    if n < 1:
        raise ValueError("need at least one description")
    out = []
    for i in range(n):
        rng = derive_rng(world.seed, "description", class_id, i)
        latent = perturbed_latent(world, class_id, rng, scale)
        out.append(caption_token_ids(world, latent, class_id))
    return out


def pretrain_pairs(world: SynthWorld, classes, rng: np.random.Generator,
                   jitter: float = 0.35) -> list[PretrainPair]:
    """One (image, caption) pair per listed class, both rendered from the
    same jittered latent."""
    pairs = []
    for c in classes:
        latent = perturbed_latent(world, int(c), rng, jitter)
        grid = render_image(world, latent) + rng.normal(
            size=(world.n_patches, world.image_dim)) * world.noise_sigma
        tokens = tuple(caption_token_ids(world, latent, int(c)))
        pairs.append(PretrainPair(image_grid=grid, caption_tokens=tokens, class_id=int(c)))
    return pairs


def base_novel_split(world: SynthWorld, base_fraction: float = 0.5,
                     seed: int = 0) -> SplitSpec:
    if not 0.0 < base_fraction < 1.0:
        raise ValueError(f"base_fraction must be in (0, 1), got {base_fraction}")
    n_base = round(world.n_classes * base_fraction)
    if n_base == 0 or n_base == world.n_classes:
        raise ValueError(f"base_fraction {base_fraction} leaves an empty side")
    order = derive_rng(seed, "split").permutation(world.n_classes)
    return SplitSpec(base_classes=tuple(sorted(int(c) for c in order[:n_base])),
                     novel_classes=tuple(sorted(int(c) for c in order[n_base:])))


SHIFT_KINDS = ("rotate-render-map", "raise-noise", "remap-attribute-mix")


def shift_world(world: SynthWorld, shift: ShiftSpec, seed: int) -> SynthWorld:
    """New world with the same class identities but altered rendering."""
    if shift.kind not in SHIFT_KINDS:
        raise ValueError(f"unknown shift kind {shift.kind!r}; expected one of {SHIFT_KINDS}")
    rng = derive_rng(seed, "shift")
    if shift.kind == "raise-noise":
        return replace(world, noise_sigma=world.noise_sigma * shift.factor)
    if shift.kind == "rotate-render-map":
        dim = world.image_map.shape[0]
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        blend = (1.0 - shift.factor) * np.eye(dim) + shift.factor * q
        return replace(world, image_map=blend @ world.image_map)
    # remap-attribute-mix: blend each class mixture toward a permuted copy
    perm = rng.permutation(world.n_attributes)
    mix = (1.0 - shift.factor) * world.class_attribute_mix \
        + shift.factor * world.class_attribute_mix[:, perm]
    mix = mix / mix.sum(axis=1, keepdims=True)
    latents = _latent_from_mix(world.attribute_latents, mix,
                               world.class_unique, world.unique_strength)
    return replace(world, class_attribute_mix=mix, class_latents=latents)


def classes_sharing_attribute(world: SynthWorld, threshold: float = 0.05):
    """Pairs of distinct classes split by whether their mixtures overlap."""
    active = world.class_attribute_mix > threshold
    sharing, disjoint = [], []
    for a in range(world.n_classes):
        for b in range(a + 1, world.n_classes):
            (sharing if np.any(active[a] & active[b]) else disjoint).append((a, b))
    return sharing, disjoint
