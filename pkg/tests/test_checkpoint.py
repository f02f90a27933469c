import numpy as np
import pytest

from anop import checkpoint as CK
from anop import encoder as E
from anop import training as TR
from anop.checkpoint import CheckpointError


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    meta = {"kind": "test", "stage": "s", "nested": {"a": 1}}
    tensors = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,)),
               "scalar": np.asarray(2.5)}
    path = tmp_path / "x.anop"
    CK.save_checkpoint(path, meta, tensors)
    meta2, tensors2 = CK.load_checkpoint(path)
    assert meta2 == meta
    assert set(tensors2) == set(tensors)
    for name in tensors:
        assert np.array_equal(tensors[name], tensors2[name])
        assert tensors[name].dtype == tensors2[name].dtype == np.float64


def test_save_is_deterministic(tmp_path):
    tensors = {"w": np.arange(6, dtype=np.float64).reshape(2, 3)}
    p1, p2 = tmp_path / "a.anop", tmp_path / "b.anop"
    CK.save_checkpoint(p1, {"k": 1}, tensors)
    CK.save_checkpoint(p2, {"k": 1}, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_bytes(tmp_path):
    path = tmp_path / "x.anop"
    CK.save_checkpoint(path, {}, {})
    assert path.read_bytes()[:4] == b"ANOP"
    bad = tmp_path / "bad.anop"
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="magic"):
        CK.load_checkpoint(bad)


def test_truncated_file_fails_checksum(tmp_path):
    path = tmp_path / "x.anop"
    CK.save_checkpoint(path, {"k": "v"}, {"w": np.ones((8, 8))})
    blob = path.read_bytes()
    trunc = tmp_path / "trunc.anop"
    trunc.write_bytes(blob[:-40])
    with pytest.raises(CheckpointError, match="truncated|checksum"):
        CK.load_checkpoint(trunc)


def test_corrupt_payload_fails_checksum(tmp_path):
    path = tmp_path / "x.anop"
    CK.save_checkpoint(path, {"k": "v"}, {"w": np.ones((4, 4))})
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0xFF
    bad = tmp_path / "bad.anop"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        CK.load_checkpoint(bad)


def test_future_version_refused(tmp_path):
    path = tmp_path / "x.anop"
    CK.save_checkpoint(path, {}, {})
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    newer = tmp_path / "newer.anop"
    newer.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version 99"):
        CK.load_checkpoint(newer)


def test_stack_round_trip_preserves_hash(tmp_path):
    dims = E.EncoderDims(d_tok=16, d=8, text_blocks=2, image_blocks=1,
                         heads=2, patches=4, d_img=16)
    stack = E.init_encoder_stack(dims, np.random.default_rng(1))
    E.freeze(stack)
    path = tmp_path / "stack.anop"
    CK.save_stack(stack, path, config_digest="d", world_seed=3)
    loaded = CK.load_stack(path)
    assert loaded.frozen
    assert loaded.dims == dims
    assert E.stack_hash(loaded) == E.stack_hash(stack)


def test_state_round_trip_preserves_hashes(tmp_path):
    cfg = TR.TrainerConfig(m_soft=3, n_anchor=2, deep_depth=2)
    state = TR.init_train_state(cfg, d_tok=16, seed=7)
    TR.freeze_anchors(state)
    state.stage = "stage1"
    path = tmp_path / "state.anop"
    CK.save_state(state, path, config_digest="d", world_seed=0)
    loaded = CK.load_state(path)
    assert TR.state_hashes(loaded) == TR.state_hashes(state)
    assert loaded.stage == "stage1"
    assert loaded.seed == state.seed
    assert all(not t.trainable for t in loaded.anchors)
    assert loaded.position.temperature == state.position.temperature
    assert len(loaded.deep_soft) == 1


def test_kind_mismatch_refused(tmp_path):
    cfg = TR.TrainerConfig(m_soft=2)
    state = TR.init_train_state(cfg, d_tok=8, seed=0)
    path = tmp_path / "state.anop"
    CK.save_state(state, path)
    with pytest.raises(CheckpointError, match="expected a stack"):
        CK.load_stack(path)
