"""Binary checkpoints: magic "ANOP", format version, JSON metadata, named
float64 tensor records (little-endian), and a trailing SHA-256 checksum that
is validated before any tensor is consumed. Round-trips are bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderDims, EncoderStack
from .prompts import PositionMatrix, PromptToken
from .tensor import Tensor
from .training import TrainState

MAGIC = b"ANOP"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


def save_checkpoint(path: str | Path, meta: dict,
                    tensors: dict[str, np.ndarray]) -> None:
    parts = [b""]
    meta_json = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_json)))
    parts.append(meta_json)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8", copy=False).tobytes())
    payload = b"".join(parts)
    blob = (MAGIC + struct.pack("<I", FORMAT_VERSION)
            + struct.pack("<Q", len(payload)) + payload
            + hashlib.sha256(payload).digest())
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    payload_len = struct.unpack_from("<Q", blob, 8)[0]
    payload = blob[16:16 + payload_len]
    digest = blob[16 + payload_len:16 + payload_len + 32]
    if len(payload) != payload_len or len(digest) != 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")

    offset = 0
    (meta_len,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    meta = json.loads(payload[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (n_tensors,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, offset)
        offset += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return meta, tensors


# ---------------------------------------------------------------------------
# typed wrappers
# ---------------------------------------------------------------------------

def save_stack(stack: EncoderStack, path: str | Path, config_digest: str = "",
               world_seed: int = 0) -> None:
    meta = {"kind": "stack", "stage": "pretrained", "frozen": stack.frozen,
            "config_digest": config_digest, "world_seed": world_seed,
            "dims": vars(stack.dims).copy()}
    tensors = {name: t.values for name, t in stack.params.items()}
    save_checkpoint(path, meta, tensors)


def load_stack(path: str | Path) -> EncoderStack:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "stack":
        raise CheckpointError(f"{path}: expected a stack checkpoint, got {meta.get('kind')!r}")
    dims = EncoderDims(**meta["dims"])
    params = {name: Tensor(arr) for name, arr in tensors.items()}
    return EncoderStack(dims=dims, params=params, frozen=bool(meta["frozen"]))


def save_state(state: TrainState, path: str | Path, config_digest: str = "",
               world_seed: int = 0) -> None:
    meta = {"kind": "state", "stage": state.stage, "seed": state.seed,
            "config_digest": config_digest, "world_seed": world_seed,
            "temperature": state.position.temperature,
            "deep_layers": len(state.deep_soft)}
    tensors: dict[str, np.ndarray] = {"position.logits": state.position.logits.values}
    for i, tok in enumerate(state.soft):
        tensors[f"soft.{i}"] = tok.embedding.values
    for i, tok in enumerate(state.anchors):
        tensors[f"anchor.{i}"] = tok.embedding.values
    for i, tok in enumerate(state.soft_attr):
        tensors[f"soft_attr.{i}"] = tok.embedding.values
    for layer, tokens in enumerate(state.deep_soft):
        for i, tok in enumerate(tokens):
            tensors[f"deep.{layer}.{i}"] = tok.embedding.values
    if state.attribute_block is not None:
        tensors["attribute_block"] = state.attribute_block.values
    save_checkpoint(path, meta, tensors)


def load_state(path: str | Path) -> TrainState:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "state":
        raise CheckpointError(f"{path}: expected a state checkpoint, got {meta.get('kind')!r}")

    def tokens(prefix: str, role: str, trainable: bool) -> list[PromptToken]:
        out = []
        for i in range(len(tensors)):
            name = f"{prefix}.{i}"
            if name not in tensors:
                break
            out.append(PromptToken(Tensor(tensors[name], requires_grad=trainable),
                                   role=role, trainable=trainable))
        return out

    stage = meta["stage"]
    anchors_trainable = stage == "init"
    soft = tokens("soft", "soft", True)
    anchors = tokens("anchor", "anchor", anchors_trainable)
    soft_attr = tokens("soft_attr", "soft", True)
    deep = []
    for layer in range(int(meta.get("deep_layers", 0))):
        deep.append(tokens(f"deep.{layer}", "soft", True))
    logits = tensors["position.logits"]
    position = PositionMatrix(logits.shape[0], temperature=meta["temperature"],
                              logits=logits)
    attr_block = (Tensor(tensors["attribute_block"])
                  if "attribute_block" in tensors else None)
    return TrainState(soft=soft, anchors=anchors, position=position,
                      soft_attr=soft_attr, attribute_block=attr_block,
                      deep_soft=deep, seed=int(meta["seed"]), stage=stage)
