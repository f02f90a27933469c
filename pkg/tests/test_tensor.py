import numpy as np
import pytest

from anop import tensor as T
from anop.tensor import Tensor

from helpers import central_diff, rel_err


def t(values, grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# forward values pinned by hand-checkable cases
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 3.0]])
    out = T.matmul(t(np.eye(2)), t(a))
    assert np.array_equal(out.values, a)


def test_softmax_symmetry():
    out = T.softmax(t([[0.0, 0.0, 0.0]]), temperature=1.0)
    assert np.allclose(out.values, 1.0 / 3.0, atol=1e-15)


def test_l2_normalize_345():
    out = T.l2_normalize(t([3.0, 4.0]))
    assert np.allclose(out.values, [0.6, 0.8], atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for temp in (0.1, 0.5, 1.0, 2.0, 4.0):
        x = t(rng.normal(size=(5, 7)) * 10)
        s = T.softmax(x, temperature=temp)
        assert np.all(s.values >= 0)
        assert np.abs(s.values.sum(axis=-1) - 1.0).max() < 1e-9


def test_l2_normalize_unit_norm():
    rng = np.random.default_rng(1)
    for _ in range(10):
        v = rng.normal(size=(4, 6))
        n = np.linalg.norm(T.l2_normalize(t(v)).values, axis=-1)
        assert np.abs(n - 1.0).max() < 1e-9


def test_l2_normalize_zero_rejected():
    with pytest.raises(ValueError):
        T.l2_normalize(t([0.0, 0.0]))


def test_kl_of_equal_distributions_is_zero():
    q = t([[0.2, 0.3, 0.5]])
    assert T.kl_divergence(q, t([[0.2, 0.3, 0.5]])).item() == pytest.approx(0.0, abs=1e-15)


def test_kl_zero_times_log_zero():
    out = T.kl_divergence(t([[0.0, 1.0]]), t([[0.5, 0.5]]))
    assert out.item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_cross_entropy_matches_log():
    probs = t([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
    out = T.cross_entropy(probs, [0, 1])
    assert out.item() == pytest.approx(-(np.log(0.7) + np.log(0.8)) / 2, abs=1e-12)


# ---------------------------------------------------------------------------
# backward basics
# ---------------------------------------------------------------------------

def test_square_gradient():
    x = t([3.0], grad=True)
    loss = T.mean(T.mul(x, x))
    T.backward(loss)
    assert np.allclose(x.grad, [6.0], atol=1e-12)


def test_stop_gradient_blocks_flow():
    x = t([2.0, -1.0], grad=True)
    loss = T.mean(T.mul(T.stop_gradient(x), t([1.0, 1.0])))
    T.backward(loss)
    assert np.array_equal(x.grad, np.zeros(2))


def test_backward_rejects_non_scalar():
    x = t([[1.0, 2.0]], grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(T.mul(x, x))


def test_backward_is_linear():
    rng = np.random.default_rng(7)
    xv = rng.normal(size=(3, 3))
    a, b = 1.7, -0.4

    def grad_of(factors):
        x = t(xv, grad=True)
        f = T.mse(x, t(np.zeros((3, 3))))
        g = T.mean(T.gelu(x))
        loss = T.add(T.scale(f, factors[0]), T.scale(g, factors[1]))
        T.backward(loss)
        return x.grad

    combined = grad_of((a, b))
    separate = a * grad_of((1.0, 0.0)) + b * grad_of((0.0, 1.0))
    assert np.abs(combined - separate).max() < 1e-9


def test_backward_determinism():
    def run():
        rng = np.random.default_rng(11)
        x = t(rng.normal(size=(4, 4)), grad=True)
        w = t(rng.normal(size=(4, 2)))
        loss = T.mean(T.softmax(T.matmul(x, w)))
        T.backward(loss)
        return loss.values.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


# ---------------------------------------------------------------------------
# per-kind gradients vs the independent finite-difference oracle
# ---------------------------------------------------------------------------

RNG_POINTS = 10

KIND_CASES = {}


def kind_case(name):
    def deco(fn):
        KIND_CASES[name] = fn
        return fn
    return deco


@kind_case("matmul")
def _matmul_fn(rng):
    b = Tensor(rng.normal(size=(4, 3)))
    return (3, 4), lambda x: T.mean(T.matmul(x, b))


@kind_case("add")
def _add_fn(rng):
    b = Tensor(rng.normal(size=(4,)))
    return (3, 4), lambda x: T.mse(T.add(x, b), Tensor(np.zeros((3, 4))))


@kind_case("mul")
def _mul_fn(rng):
    b = Tensor(rng.normal(size=(3, 4)))
    return (3, 4), lambda x: T.mean(T.mul(x, b))


@kind_case("scale")
def _scale_fn(rng):
    return (5,), lambda x: T.mean(T.scale(x, -2.5))


@kind_case("concat")
def _concat_fn(rng):
    b = Tensor(rng.normal(size=(2, 4)))
    return (3, 4), lambda x: T.mse(T.concat([x, b], axis=0), Tensor(np.zeros((5, 4))))


@kind_case("slice")
def _slice_fn(rng):
    return (5, 4), lambda x: T.mean(T.slice_axis(x, 0, 1, 3))


@kind_case("gather-rows")
def _gather_fn(rng):
    idx = [0, 2, 2, 4]
    return (6, 3), lambda x: T.mean(T.gather_rows(x, idx))


@kind_case("layer-norm")
def _ln_fn(rng):
    w = Tensor(rng.normal(size=(6,)))
    return (2, 6), lambda x: T.mean(T.mul(T.layer_norm(x), w))


@kind_case("softmax")
def _softmax_fn(rng):
    w = Tensor(rng.normal(size=(2, 5)))
    return (2, 5), lambda x: T.mean(T.mul(T.softmax(x, temperature=0.7), w))


@kind_case("log-softmax")
def _lsm_fn(rng):
    w = Tensor(rng.normal(size=(2, 5)))
    return (2, 5), lambda x: T.mean(T.mul(T.log_softmax(x), w))


@kind_case("gelu")
def _gelu_fn(rng):
    return (7,), lambda x: T.mean(T.gelu(x))


@kind_case("l2-normalize")
def _l2_fn(rng):
    w = Tensor(rng.normal(size=(6,)))
    return (6,), lambda x: T.mean(T.mul(T.l2_normalize(x), w))


@kind_case("mean")
def _mean_fn(rng):
    return (3, 4), lambda x: T.mean(x)


@kind_case("mse")
def _mse_fn(rng):
    b = Tensor(rng.normal(size=(3, 4)))
    return (3, 4), lambda x: T.mse(x, b)


@kind_case("cross-entropy")
def _ce_fn(rng):
    labels = [1, 0, 3]
    return (3, 4), lambda x: T.cross_entropy(T.softmax(x), labels)


@kind_case("kl-divergence")
def _kl_fn(rng):
    q = Tensor(T.softmax(Tensor(rng.normal(size=(3, 4)))).values)
    return (3, 4), lambda x: T.kl_divergence(q, T.softmax(x))


@kind_case("gumbel-softmax")
def _gs_fn(rng):
    noise = rng.gumbel(size=(4, 4))
    w = Tensor(rng.normal(size=(4, 4)))
    return (4, 4), lambda x: T.mean(
        T.mul(T.gumbel_softmax(x, temperature=1.3, noise=noise, hard=False), w))


@kind_case("transpose")
def _transpose_fn(rng):
    b = Tensor(rng.normal(size=(2, 2)))
    return (2, 3), lambda x: T.mean(T.matmul(T.transpose(x), b))


@kind_case("reshape")
def _reshape_fn(rng):
    w = Tensor(rng.normal(size=(6, 2)))
    return (3, 4), lambda x: T.mean(T.mul(T.reshape(x, (6, 2)), w))


@kind_case("stop-gradient")
def _sg_fn(rng):
    # x contributes through both a live branch and a blocked branch
    return (4,), lambda x: T.mean(T.add(T.mul(x, x), T.stop_gradient(T.mul(x, x))))


@pytest.mark.parametrize("kind", sorted(KIND_CASES))
def test_kind_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % (2**32))
    for _ in range(RNG_POINTS):
        shape, fn = KIND_CASES[kind](rng)
        point = rng.normal(size=shape)
        if kind == "cross-entropy":
            point = point * 0.5  # keep probabilities well away from the clamp
        leaf = Tensor(point, requires_grad=True)
        T.backward(fn(leaf))
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(point)
        numeric = central_diff(fn, point)
        if kind == "stop-gradient":
            # the blocked branch must contribute nothing: d mean(x*x)/dx only
            assert np.abs(analytic - 2.0 * point / point.size).max() < 1e-12
            continue
        assert rel_err(analytic, numeric) < 1e-6, kind


def test_stop_gradient_branch_excluded_numerically():
    # the oracle sees both branches; the analytic grad must see only one
    rng = np.random.default_rng(3)
    point = rng.normal(size=(4,))
    live = lambda x: T.mean(T.mul(x, x))
    numeric_live = central_diff(live, point)
    leaf = Tensor(point, requires_grad=True)
    T.backward(T.mean(T.add(T.mul(leaf, leaf), T.stop_gradient(T.mul(leaf, leaf)))))
    assert rel_err(leaf.grad, numeric_live) < 1e-6


def test_mse_of_normalized_vector_matches_oracle():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(6,))
    target = Tensor(T.l2_normalize(Tensor(rng.normal(size=(6,)))).values)
    fn = lambda x: T.mse(T.l2_normalize(x), target)
    leaf = Tensor(v, requires_grad=True)
    T.backward(fn(leaf))
    assert rel_err(leaf.grad, central_diff(fn, v)) < 1e-6


# ---------------------------------------------------------------------------
# apply dispatch and rejection diagnostics
# ---------------------------------------------------------------------------

def test_apply_dispatches_every_kind():
    rng = np.random.default_rng(9)
    x = t(rng.normal(size=(3, 3)))
    cases = {
        "matmul": ([x, x], {}),
        "add": ([x, x], {}),
        "mul": ([x, x], {}),
        "scale": ([x], {"alpha": 2.0}),
        "concat": ([x, x], {"axis": 0}),
        "slice": ([x], {"axis": 0, "start": 0, "stop": 2}),
        "gather-rows": ([x], {"indices": [0, 1]}),
        "layer-norm": ([x], {}),
        "softmax": ([x], {"temperature": 2.0}),
        "log-softmax": ([x], {}),
        "gelu": ([x], {}),
        "l2-normalize": ([x], {}),
        "mean": ([x], {}),
        "mse": ([x, x], {}),
        "cross-entropy": ([T.softmax(x)], {"labels": [0, 1, 2]}),
        "kl-divergence": ([T.softmax(x), T.softmax(x)], {}),
        "gumbel-softmax": ([x], {"temperature": 1.0, "noise": np.zeros((3, 3))}),
        "transpose": ([x], {}),
        "reshape": ([x], {"shape": (9,)}),
        "stop-gradient": ([x], {}),
    }
    for kind, (inputs, attrs) in cases.items():
        out = T.apply(kind, inputs, attrs)
        assert isinstance(out, Tensor), kind


def test_apply_rejects_unknown_kind():
    with pytest.raises(ValueError, match="unknown operation kind"):
        T.apply("convolve", [t([1.0])], {})


def test_apply_rejects_missing_attribute():
    with pytest.raises(ValueError, match="scale requires attribute 'alpha'"):
        T.apply("scale", [t([1.0])], {})


def test_shape_mismatch_names_kind_and_shapes():
    with pytest.raises(ValueError) as exc:
        T.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_non_finite_rejected():
    x = t([100.0, 200.0])
    with np.errstate(over="ignore"), pytest.raises(T.NonFiniteError):
        T.scale(T.gelu(T.scale(x, 400.0)), float("1e308"))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def test_sgd_plain_step():
    p = t([1.0], grad=True)
    p.grad = np.array([2.0])
    T.SGD([p], lr=0.5, momentum=0.0).step()
    assert np.allclose(p.values, [0.0], atol=1e-15)


def test_sgd_momentum_accumulates():
    p = t([10.0], grad=True)
    opt = T.SGD([p], lr=1.0, momentum=0.9)
    p.grad = np.array([1.0])
    opt.step()
    assert np.allclose(p.values, [9.0], atol=1e-15)
    p.grad = np.array([1.0])
    opt.step()  # m = 0.9 * 1 + 1 = 1.9
    assert np.allclose(p.values, [7.1], atol=1e-12)


def test_sgd_missing_grad_rejected():
    p = t([1.0], grad=True)
    with pytest.raises(ValueError, match="missing gradient"):
        T.SGD([p], lr=0.1).step()


def test_sgd_converges_on_quadratic():
    # closed-form oracle: argmin of 0.5 * ||p - p*||^2 is p* itself
    target = np.array([0.3, -1.2, 2.0])
    p = t(np.zeros(3), grad=True)
    opt = T.SGD([p], lr=0.5, momentum=0.5)
    for _ in range(100):
        loss = T.scale(T.mse(p, Tensor(target)), 0.5 * 3)
        T.backward(loss)
        opt.step()
        opt.zero_grad()
    assert np.abs(p.values - target).max() < 1e-6


def test_sgd_step_function_persists_buffers():
    p = t([10.0], grad=True)
    bufs = T.sgd_step([p], {p: np.array([1.0])}, lr=1.0, momentum=0.9)
    T.sgd_step([p], {p: np.array([1.0])}, lr=1.0, momentum=0.9, buffers=bufs)
    assert np.allclose(p.values, [7.1], atol=1e-12)


# ---------------------------------------------------------------------------
# check_gradients harness
# ---------------------------------------------------------------------------

def test_check_gradients_linear_exact():
    w = Tensor(np.array([1.0, -2.0, 0.5]))
    err = T.check_gradients(lambda x: T.mean(T.mul(x, w)), Tensor(np.ones(3)))
    assert err < 1e-10


def test_check_gradients_cross_entropy_through_softmax():
    rng = np.random.default_rng(13)
    logits = rng.normal(size=(4, 5))
    err = T.check_gradients(
        lambda x: T.cross_entropy(T.softmax(x), [0, 1, 2, 3]), Tensor(logits))
    assert err < 1e-6


def test_check_gradients_rejects_nondeterministic():
    state = {"n": 0}

    def noisy(x):
        state["n"] += 1
        return T.scale(T.mean(x), float(state["n"]))

    with pytest.raises(ValueError, match="deterministic"):
        T.check_gradients(noisy, Tensor(np.ones(3)))
