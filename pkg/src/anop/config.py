"""Experiment configuration: line-oriented ``key = value`` files with dotted
section prefixes and ``#`` comments.

Every key has a documented default except ``run.out``, which must come from
the file, ``--out``, or the ANOP_OUT environment variable. Unknown keys are
rejected with their line number. The resolved configuration is echoed into
the run manifest and hashed into a digest that stamps checkpoints and
metrics rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .encoder import EncoderDims, PretrainConfig
from .training import ARRANGEMENT_CHOICES, KD_DIRECTIONS, TrainerConfig

PREPOSITION_CHOICES = ("of", "with", "at", "sun", "sea", "none")
PARADIGM_CHOICES = ("two_stage", "one_stage")


class ConfigError(ValueError):
    """Invalid configuration; message names the key and line when known."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in raw.split(",") if part.strip())


@dataclass(frozen=True)
class FieldSpec:
    parse: Callable[[str], object]
    default: object
    doc: str
    choices: tuple | None = None


def _choice(choices: tuple[str, ...]) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        v = raw.strip()
        if v not in choices:
            raise ValueError(f"expected one of {choices}, got {raw!r}")
        return v
    return parse


SCHEMA: dict[str, FieldSpec] = {
    # synthetic world
    "world.classes": FieldSpec(int, 16, "number of classes (>= 4)"),
    "world.attributes": FieldSpec(int, 4, "shared attribute latents (>= 1)"),
    "world.latent_dim": FieldSpec(int, 12, "latent dimensionality (>= 4)"),
    "world.noise_sigma": FieldSpec(float, 0.3, "per-entry image noise"),
    "world.patches": FieldSpec(int, 9, "patch rows per image grid"),
    "world.image_dim": FieldSpec(int, 24, "feature width of a patch row"),
    "world.caption_length": FieldSpec(int, 4, "content tokens per caption"),
    "world.unique_strength": FieldSpec(float, 0.4, "class-unique latent weight"),
    "world.render_gain": FieldSpec(float, 1.5, "image render map gain"),
    "world.shots": FieldSpec(int, 16, "training samples per base class"),
    "world.base_fraction": FieldSpec(float, 0.5, "fraction of classes in the base split"),
    # encoders
    "encoder.token_dim": FieldSpec(int, 32, "text token embedding width"),
    "encoder.feature_dim": FieldSpec(int, 16, "shared feature space width"),
    "encoder.text_blocks": FieldSpec(int, 4, "text transformer blocks (>= 2)"),
    "encoder.image_blocks": FieldSpec(int, 2, "image transformer blocks"),
    "encoder.heads": FieldSpec(int, 2, "attention heads"),
    "encoder.max_len": FieldSpec(int, 16, "maximum text sequence length"),
    "encoder.vocab": FieldSpec(int, 128, "vocabulary size (fixed token layout)"),
    "encoder.ffn_mult": FieldSpec(int, 2, "feed-forward width multiplier"),
    # contrastive pretraining
    "pretrain.target": FieldSpec(float, 0.9, "held-out retrieval top-1 target"),
    "pretrain.max_steps": FieldSpec(int, 2000, "pretraining step budget"),
    "pretrain.batch": FieldSpec(int, 16, "classes per contrastive batch"),
    "pretrain.lr": FieldSpec(float, 0.003, "pretraining learning rate"),
    "pretrain.eval_every": FieldSpec(int, 25, "steps between retrieval checks"),
    "pretrain.holdout": FieldSpec(int, 64, "held-out pair count"),
    "pretrain.jitter": FieldSpec(float, 0.35, "attribute-mixture jitter for pairs"),
    # prompt construction
    "prompt.soft_tokens": FieldSpec(int, 6, "learnable soft tokens M"),
    "prompt.anchor_tokens": FieldSpec(int, 1, "learnable anchor tokens N"),
    "prompt.preposition": FieldSpec(_choice(PREPOSITION_CHOICES), "of",
                                    "anchor-prompt preposition (none drops it)",
                                    PREPOSITION_CHOICES),
    "prompt.arrangement": FieldSpec(_choice(ARRANGEMENT_CHOICES), "matrix",
                                    "token arrangement strategy",
                                    ARRANGEMENT_CHOICES),
    "prompt.position_forward": FieldSpec(_choice(("hard_st", "soft")), "hard_st",
                                         "training-time matrix forward mode",
                                         ("hard_st", "soft")),
    "prompt.gumbel_temperature": FieldSpec(float, 1.0, "Gumbel-Softmax temperature"),
    "prompt.deep_depth": FieldSpec(int, 1, "blocks receiving fresh soft tokens"),
    "prompt.atprompt_attributes": FieldSpec(int, 2, "explicit anchors for the fixed-anchor baseline"),
    # training
    "train.stage1_steps": FieldSpec(int, 200, "anchor optimization steps"),
    "train.stage2_steps": FieldSpec(int, 300, "adaptation steps"),
    "train.stage1_lr": FieldSpec(float, 0.002, "anchor learning rate"),
    "train.stage2_lr": FieldSpec(float, 0.002, "adaptation learning rate"),
    "train.momentum": FieldSpec(float, 0.9, "SGD momentum"),
    "train.batch": FieldSpec(int, 32, "image batch per adaptation step"),
    "train.descriptions": FieldSpec(int, 5, "descriptions per class"),
    "train.lambda_ce": FieldSpec(float, 1.0, "cross-entropy weight"),
    "train.lambda_kd": FieldSpec(float, 10.0, "distillation weight"),
    "train.kd_direction": FieldSpec(_choice(KD_DIRECTIONS), "ens_to_norm",
                                    "KL direction for distillation", KD_DIRECTIONS),
    "train.paradigm": FieldSpec(_choice(PARADIGM_CHOICES), "two_stage",
                                "training paradigm", PARADIGM_CHOICES),
    "train.one_stage_steps": FieldSpec(int, 500, "alternating steps for one-stage"),
    "train.alternation": FieldSpec(int, 1, "steps per phase in one-stage"),
    # evaluation
    "eval.samples_per_class": FieldSpec(int, 20, "fresh eval samples per class"),
    "eval.ensemble": FieldSpec(_parse_bool, True, "ensemble routing for novel classes"),
    # run orchestration
    "run.seed": FieldSpec(int, 0, "base seed for world and pretraining streams"),
    "run.seeds": FieldSpec(_parse_int_list, (0, 1, 2), "per-run training seeds"),
    "run.out": FieldSpec(str, None, "output directory (required; --out or ANOP_OUT)"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def echo_lines(self) -> list[str]:
        out = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, bool):
                v = "on" if v else "off"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{key} = {v}")
        return out

    def digest(self) -> str:
        # run.out is deployment, not experiment identity
        lines = [l for l in self.echo_lines() if not l.startswith("run.out ")]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    # typed views consumed by the library modules

    def world_kwargs(self) -> dict:
        return dict(n_classes=self["world.classes"],
                    n_attributes=self["world.attributes"],
                    latent_dim=self["world.latent_dim"],
                    noise_sigma=self["world.noise_sigma"],
                    n_patches=self["world.patches"],
                    image_dim=self["world.image_dim"],
                    caption_len=self["world.caption_length"],
                    unique_strength=self["world.unique_strength"],
                    render_gain=self["world.render_gain"])

    def encoder_dims(self) -> EncoderDims:
        return EncoderDims(d_tok=self["encoder.token_dim"],
                           d=self["encoder.feature_dim"],
                           text_blocks=self["encoder.text_blocks"],
                           image_blocks=self["encoder.image_blocks"],
                           heads=self["encoder.heads"],
                           l_max=self["encoder.max_len"],
                           vocab=self["encoder.vocab"],
                           patches=self["world.patches"],
                           d_img=self["world.image_dim"],
                           ffn_mult=self["encoder.ffn_mult"])

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(target=self["pretrain.target"],
                              max_steps=self["pretrain.max_steps"],
                              batch=self["pretrain.batch"],
                              lr=self["pretrain.lr"],
                              eval_every=self["pretrain.eval_every"],
                              holdout=self["pretrain.holdout"],
                              jitter=self["pretrain.jitter"],
                              dims=self.encoder_dims())

    def trainer_config(self) -> TrainerConfig:
        prep = self["prompt.preposition"]
        return TrainerConfig(
            m_soft=self["prompt.soft_tokens"],
            n_anchor=self["prompt.anchor_tokens"],
            preposition=None if prep == "none" else prep,
            arrangement=self["prompt.arrangement"],
            position_forward=self["prompt.position_forward"],
            gumbel_temperature=self["prompt.gumbel_temperature"],
            lambda_ce=self["train.lambda_ce"],
            lambda_kd=self["train.lambda_kd"],
            kd_direction=self["train.kd_direction"],
            stage1_steps=self["train.stage1_steps"],
            stage2_steps=self["train.stage2_steps"],
            stage1_lr=self["train.stage1_lr"],
            stage2_lr=self["train.stage2_lr"],
            momentum=self["train.momentum"],
            batch=self["train.batch"],
            n_descriptions=self["train.descriptions"],
            deep_depth=self["prompt.deep_depth"],
            alternation=self["train.alternation"],
            one_stage_steps=self["train.one_stage_steps"],
            atprompt_attributes=self["prompt.atprompt_attributes"])


def parse_config_text(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Raw ``key -> (value, line_number)`` pairs, comments stripped."""
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = (value, lineno)
    return raw


def _validate(values: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(values["world.classes"] >= 4, "world.classes must be >= 4")
    need(values["world.attributes"] >= 1, "world.attributes must be >= 1")
    need(values["world.latent_dim"] >= 4, "world.latent_dim must be >= 4")
    need(values["encoder.text_blocks"] >= 2, "encoder.text_blocks must be >= 2")
    need(values["encoder.vocab"] == 128,
         "encoder.vocab is fixed at 128 by the token layout")
    need(0.0 < values["world.base_fraction"] < 1.0,
         "world.base_fraction must be in (0, 1)")
    need(values["prompt.soft_tokens"] >= 1, "prompt.soft_tokens must be >= 1")
    need(values["prompt.anchor_tokens"] >= 1, "prompt.anchor_tokens must be >= 1")
    need(values["prompt.gumbel_temperature"] > 0,
         "prompt.gumbel_temperature must be positive")
    need(1 <= values["prompt.deep_depth"] <= values["encoder.text_blocks"],
         "prompt.deep_depth must be in [1, encoder.text_blocks]")
    # prefix + reordered block + longest class name (2) + suffix must fit
    budget = (values["prompt.soft_tokens"] + values["prompt.anchor_tokens"]
              + 2 + 2)
    need(budget <= values["encoder.max_len"],
         f"prompt budget {budget} exceeds encoder.max_len {values['encoder.max_len']}"
         " (soft + anchor + class block + framing)")
    need(values["run.seeds"], "run.seeds must name at least one seed")
    if values["run.out"] is None:
        raise ConfigError("missing required key: run.out "
                          "(set it in the config, via --out, or ANOP_OUT)")


def resolve_config(raw: dict[str, tuple[str, int]],
                   overrides: dict[str, str] | None = None,
                   source: str = "<config>") -> ExperimentConfig:
    """Typed, validated config from raw pairs plus ``--override`` pairs."""
    values: dict = {k: spec.default for k, spec in SCHEMA.items()}
    for key, (text, lineno) in raw.items():
        spec = SCHEMA.get(key)
        if spec is None:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = spec.parse(text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    for key, text in (overrides or {}).items():
        spec = SCHEMA.get(key)
        if spec is None:
            raise ConfigError(f"override: unknown key {key!r}")
        try:
            values[key] = spec.parse(text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"override: bad value for {key}: {exc}") from exc
    _validate(values)
    return ExperimentConfig(values=values)


def load_config(path: str | Path, overrides: dict[str, str] | None = None,
                out_override: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = parse_config_text(text, source=str(path))
    overrides = dict(overrides or {})
    if out_override is not None:
        overrides["run.out"] = out_override
    return resolve_config(raw, overrides, source=str(path))


def default_config(out: str = "runs/out", **overrides: str) -> ExperimentConfig:
    ov = {"run.out": out}
    ov.update(overrides)
    return resolve_config({}, ov)
