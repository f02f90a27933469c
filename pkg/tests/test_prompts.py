import numpy as np
import pytest

from anop import prompts as P
from anop import tensor as T
from anop.tensor import Tensor

from helpers import central_diff, rel_err

D_TOK = 8
L_MAX = 16


@pytest.fixture()
def lib():
    table = np.random.default_rng(0).normal(size=(128, D_TOK))
    return P.TokenLibrary(table, l_max=L_MAX)


def soft_tokens(m, seed=1):
    return P.make_tokens(m, D_TOK, np.random.default_rng(seed), role="soft")


def anchor_tokens(n, seed=2):
    return P.make_tokens(n, D_TOK, np.random.default_rng(seed), role="anchor")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def test_coop_prompt_length_and_span(lib):
    seq = P.build_coop_prompt(soft_tokens(4), lib.class_block([100]), lib)
    assert seq.length == 4 + 1 + 2
    assert seq.class_block_span == (5, 6)
    assert seq.position_roles() == ["prefix"] + ["soft"] * 4 + ["class", "suffix"]


def test_soft_token_init_distribution():
    tokens = P.make_tokens(2000, 4, np.random.default_rng(3), role="soft")
    flat = np.concatenate([t.embedding.values.ravel() for t in tokens])
    assert abs(flat.mean()) < 0.002
    assert abs(flat.std() - 0.02) < 0.002


def test_coop_prompt_overflow_rejected(lib):
    with pytest.raises(ValueError, match="exceeds"):
        P.build_coop_prompt(soft_tokens(14), lib.class_block([100, 101]), lib)


def test_atprompt_zero_attributes_reduces_to_coop(lib):
    soft = soft_tokens(4)
    cls = lib.class_block([100])
    at = P.build_atprompt(None, [], soft, cls, lib)
    coop = P.build_coop_prompt(soft, cls, lib)
    assert np.array_equal(at.embedding_matrix().values, coop.embedding_matrix().values)


def test_atprompt_ordering_and_fixed_attributes(lib):
    attrs = Tensor(np.random.default_rng(4).normal(size=(2, D_TOK)))
    soft_a = soft_tokens(2, seed=5)
    soft = soft_tokens(3, seed=6)
    seq = P.build_atprompt(attrs, soft_a, soft, lib.class_block([100]), lib)
    roles = seq.position_roles()
    assert roles == (["prefix"] + ["soft"] * 2 + ["attribute"] * 2
                     + ["soft"] * 3 + ["class", "suffix"])
    attr_seg = [s for s in seq.segments if s.role == "attribute"][0]
    assert not attr_seg.tensor.requires_grad


def test_anchor_prompt_structure(lib):
    seq = P.build_anchor_prompt(anchor_tokens(1), lib.class_block([100, 101]), lib)
    assert seq.position_roles() == ["prefix", "anchor", "preposition", "class", "class", "suffix"]
    prep = [s for s in seq.segments if s.role == "preposition"][0]
    assert not prep.tensor.requires_grad


def test_anchor_prompt_alternative_preposition(lib):
    for name in ("with", "at", "sun", "sea"):
        seq = P.build_anchor_prompt(anchor_tokens(1), lib.class_block([100]), lib,
                                    preposition=name)
        prep = [s for s in seq.segments if s.role == "preposition"][0]
        assert np.array_equal(prep.tensor.values, lib.row(P.PREPOSITION_IDS[name]).values)


def test_anchor_prompt_without_preposition(lib):
    seq = P.build_anchor_prompt(anchor_tokens(2), lib.class_block([100]), lib,
                                preposition=None)
    assert "preposition" not in seq.position_roles()


def test_fixed_arrangements(lib):
    soft = soft_tokens(4)
    anc = anchor_tokens(1)
    cls = lib.class_block([100])
    roles = {
        "before_soft": ["prefix", "anchor"] + ["soft"] * 4 + ["class", "suffix"],
        "middle": ["prefix", "soft", "soft", "anchor", "soft", "soft", "class", "suffix"],
        "after_class": ["prefix"] + ["soft"] * 4 + ["class", "anchor", "suffix"],
    }
    for arrangement, expected in roles.items():
        seq = P.build_fixed_arrangement_prompt(soft, anc, arrangement, cls, lib)
        assert seq.position_roles() == expected, arrangement


def test_prompt_token_role_constraints():
    emb = Tensor(np.zeros((1, D_TOK)))
    with pytest.raises(ValueError):
        P.PromptToken(emb, role="verb")
    with pytest.raises(ValueError):
        P.PromptToken(emb, role="class", trainable=True)


# ---------------------------------------------------------------------------
# position matrix realizations
# ---------------------------------------------------------------------------

def test_eval_realization_is_noise_free_argmax():
    logits = np.eye(5) * 10.0
    pm = P.PositionMatrix(5, logits=logits)
    realized, noise = P.sample_position_matrix(pm, 0, training=False)
    assert noise is None
    assert np.array_equal(realized.values, np.eye(5))


def test_training_rows_are_one_hot_across_temperatures():
    rng = np.random.default_rng(8)
    count = 0
    for temp in (0.1, 0.5, 1.0, 2.0, 4.0):
        pm = P.PositionMatrix(6, temperature=temp, rng=rng)
        for _ in range(200):
            realized, _ = P.sample_position_matrix(pm, rng, training=True)
            v = realized.values
            assert np.all((v == 0.0) | (v == 1.0))
            assert np.array_equal(v.sum(axis=1), np.ones(6))
            count += 1
    assert count == 1000


def test_soft_rows_sum_to_one_across_temperatures():
    rng = np.random.default_rng(9)
    for temp in (0.1, 0.5, 1.0, 2.0, 4.0):
        pm = P.PositionMatrix(6, temperature=temp, rng=rng)
        for _ in range(50):
            noise = rng.gumbel(size=(6, 6))
            soft = P.soft_realization(pm, noise)
            assert np.all(soft.values >= 0)
            assert np.abs(soft.values.sum(axis=1) - 1.0).max() < 1e-9


def test_hard_assignment_shift_invariant():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(5, 5))
    base = P.hard_assignment(P.PositionMatrix(5, logits=logits))
    shifted = logits.copy()
    shifted[2] += 7.3
    assert np.array_equal(base, P.hard_assignment(P.PositionMatrix(5, logits=shifted)))


def test_soft_converges_to_hard_as_temperature_vanishes():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(6, 6))
    noise = rng.gumbel(size=(6, 6))
    pm_cold = P.PositionMatrix(6, temperature=1e-4, logits=logits)
    soft = T.gumbel_softmax(pm_cold.logits, temperature=1e-4, noise=noise, hard=False)
    hard = T.gumbel_softmax(pm_cold.logits, temperature=1e-4, noise=noise, hard=True)
    assert np.abs(soft.values - hard.values).max() < 1e-6


def test_straight_through_identity():
    rng = np.random.default_rng(12)
    logits = rng.normal(size=(5, 5))
    noise = rng.gumbel(size=(5, 5))
    w = Tensor(rng.normal(size=(5, 5)))

    pm = P.PositionMatrix(5, logits=logits)
    st = T.gumbel_softmax(pm.logits, temperature=1.0, noise=noise, hard=True)
    idx = (logits + noise).argmax(axis=1)
    pure_hard = np.zeros((5, 5))
    pure_hard[np.arange(5), idx] = 1.0
    assert np.array_equal(st.values, pure_hard)

    T.backward(T.mean(T.mul(st, w)))
    st_grad = pm.logits.grad

    pm2 = P.PositionMatrix(5, logits=logits)
    soft = T.gumbel_softmax(pm2.logits, temperature=1.0, noise=noise, hard=False)
    T.backward(T.mean(T.mul(soft, w)))
    assert np.array_equal(st_grad, pm2.logits.grad)


def test_gumbel_gradient_matches_finite_differences_with_frozen_noise():
    rng = np.random.default_rng(13)
    noise = rng.gumbel(size=(4, 4))
    v = Tensor(rng.normal(size=(4, 4)))
    fn = lambda x: T.mean(T.mul(
        T.gumbel_softmax(x, temperature=1.0, noise=noise, hard=False), v))
    point = rng.normal(size=(4, 4))
    leaf = Tensor(point, requires_grad=True)
    T.backward(fn(leaf))
    assert rel_err(leaf.grad, central_diff(fn, point)) < 1e-6


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

def test_compose_identity_matrix_keeps_order(lib):
    soft = soft_tokens(3)
    anc = anchor_tokens(2)
    seq = P.compose_normal_prompt(soft, anc, Tensor(np.eye(5)), lib.class_block([100]), lib)
    mat = seq.embedding_matrix().values
    expected = np.concatenate([t.embedding.values for t in [*soft, *anc]])
    assert np.array_equal(mat[1:6], expected)
    assert seq.position_roles()[1:6] == ["soft", "soft", "soft", "anchor", "anchor"]


def test_compose_row_selects_named_source(lib):
    # a 1 at row 0, column 3 maps original token 4 to output position 1
    soft = soft_tokens(3)
    anc = anchor_tokens(2)
    w = np.eye(5)
    w[0] = 0
    w[0, 3] = 1.0
    seq = P.compose_normal_prompt(soft, anc, Tensor(w), lib.class_block([100]), lib)
    mat = seq.embedding_matrix().values
    assert np.array_equal(mat[1], anc[0].embedding.values[0])
    assert seq.position_roles()[1] == "anchor"


def test_compose_duplication_is_legal(lib):
    soft = soft_tokens(2)
    anc = anchor_tokens(1)
    w = np.zeros((3, 3))
    w[:, 0] = 1.0
    seq = P.compose_normal_prompt(soft, anc, Tensor(w), lib.class_block([100]), lib)
    mat = seq.embedding_matrix().values
    for i in range(1, 4):
        assert np.array_equal(mat[i], soft[0].embedding.values[0])


def test_compose_class_block_bitwise_untouched(lib):
    cls = lib.class_block([100, 101])
    before = cls.tensor.values.copy()
    seq = P.compose_normal_prompt(soft_tokens(2), anchor_tokens(1),
                                  Tensor(np.eye(3)), cls, lib)
    out_cls = [s for s in seq.segments if s.role == "class"][0]
    assert out_cls.tensor is cls.tensor
    assert np.array_equal(out_cls.tensor.values, before)


def test_compose_rejects_matrix_size_mismatch(lib):
    with pytest.raises(ValueError, match="does not match"):
        P.compose_normal_prompt(soft_tokens(3), anchor_tokens(1),
                                Tensor(np.eye(5)), lib.class_block([100]), lib)


def test_compose_gradient_reaches_logits_through_prompt(lib):
    rng = np.random.default_rng(14)
    soft = soft_tokens(2)
    anc = anchor_tokens(1)
    pm = P.PositionMatrix(3, rng=rng)
    realized, noise = P.sample_position_matrix(pm, rng, training=True)
    seq = P.compose_normal_prompt(soft, anc, realized, lib.class_block([100]), lib)
    loss = T.mean(seq.embedding_matrix())
    T.backward(loss)
    assert pm.logits.grad is not None and np.any(pm.logits.grad != 0)
    for tok in soft:
        assert tok.embedding.grad is not None
