"""Reverse-mode automatic differentiation over dense float64 tensors.

The graph is a tape rebuilt on every forward pass: each operation returns a
new immutable Tensor that remembers its parents and a closure computing the
parent gradients from the output gradient. ``backward`` walks the tape once
in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-12  # floor applied to probabilities before any log
LAYER_NORM_EPS = 1e-5


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf values."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 value node.

    Values are immutable after construction; parameter updates go through
    ``assign`` (used by optimizers), which swaps in a fresh array.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with non-finite values")
        arr.setflags(write=False)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], list[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def assign(self, new_values: np.ndarray) -> None:
        """Replace the stored values in place (optimizer updates only)."""
        arr = np.array(new_values, dtype=np.float64)
        if arr.shape != self.values.shape:
            raise ValueError(f"assign shape {arr.shape} != {self.values.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("assign with non-finite values")
        arr.setflags(write=False)
        self.values = arr

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(kind: str, out: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], list[np.ndarray | None]],
            check: bool = True) -> Tensor:
    # a single reduction: any NaN/Inf in out makes the sum non-finite.
    # ops that merely rearrange verified-finite inputs skip the check.
    if check and not np.isfinite(out.sum()):
        raise NonFiniteError(f"{kind} produced non-finite values")
    t = Tensor.__new__(Tensor)
    arr = np.asarray(out, dtype=np.float64)
    arr.setflags(write=False)
    t.values = arr
    t.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_2d(kind: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.values.ndim != 2:
            raise ValueError(f"{kind} expects 2-D operands, got shape {t.shape}")


# ---------------------------------------------------------------------------
# operation kinds
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def bwd(g):
        return [g @ b.values.T, a.values.T @ g]

    return _result("matmul", out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.values + b.values
    except ValueError:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from None

    def bwd(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return _result("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.values * b.values
    except ValueError:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}") from None

    def bwd(g):
        return [_unbroadcast(g * b.values, a.shape),
                _unbroadcast(g * a.values, b.shape)]

    return _result("mul", out, (a, b), bwd)


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    out = x.values * alpha

    def bwd(g):
        return [g * alpha]

    return _result("scale", out, (x,), bwd)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ValueError("concat of zero tensors")
    ndim = xs[0].values.ndim
    for x in xs:
        if x.values.ndim != ndim:
            raise ValueError(
                f"concat rank mismatch: {[t.shape for t in xs]}")
    try:
        out = np.concatenate([x.values for x in xs], axis=axis)
    except ValueError:
        raise ValueError(
            f"concat shape mismatch on axis {axis}: {[t.shape for t in xs]}"
        ) from None
    sizes = [x.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        gs = []
        for i in range(len(xs)):
            idx = [slice(None)] * ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            gs.append(g[tuple(idx)])
        return gs

    return _result("concat", out, tuple(xs), bwd, check=False)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis >= x.values.ndim:
        raise ValueError(f"slice axis {axis} out of range for shape {x.shape}")
    if not (0 <= start < stop <= x.shape[axis]):
        raise ValueError(f"slice [{start}:{stop}] invalid for shape {x.shape} axis {axis}")
    idx = [slice(None)] * x.values.ndim
    idx[axis] = slice(start, stop)
    out = x.values[tuple(idx)]

    def bwd(g):
        gx = np.zeros_like(x.values)
        gx[tuple(idx)] = g
        return [gx]

    return _result("slice", out, (x,), bwd, check=False)


def gather_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    _check_2d("gather-rows", table)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather-rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"gather-rows index out of range for table shape {table.shape}")
    out = table.values[idx]

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return [gt]

    return _result("gather-rows", out, (table,), bwd, check=False)


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (v - mu) * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return [(g - gm - y * gym) * inv]

    return _result("layer-norm", y, (x,), bwd)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = x.values / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return [(g - dot) * s / temperature]

    return _result("softmax", s, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    z = x.values - x.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    s = np.exp(y)

    def bwd(g):
        return [g - s * g.sum(axis=-1, keepdims=True)]

    return _result("log-softmax", y, (x,), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    th = np.tanh(inner)
    y = 0.5 * v * (1.0 + th)

    def bwd(g):
        sech2 = 1.0 - th ** 2
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return [g * (0.5 * (1.0 + th) + 0.5 * v * sech2 * dinner)]

    return _result("gelu", y, (x,), bwd)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale the last axis to unit Euclidean norm. Zero vectors are rejected."""
    v = x.values
    n = np.sqrt((v ** 2).sum(axis=-1, keepdims=True))
    if np.any(n == 0.0):
        raise ValueError("l2-normalize of a zero vector")
    y = v / n

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return [(g - y * dot) / n]

    return _result("l2-normalize", y, (x,), bwd)


def mean(x: Tensor) -> Tensor:
    out = np.asarray(x.values.mean())
    size = x.values.size

    def bwd(g):
        return [np.full_like(x.values, float(g) / size)]

    return _result("mean", out, (x,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.values - b.values
    out = np.asarray((d ** 2).mean())
    size = a.values.size

    def bwd(g):
        gd = 2.0 * d * (float(g) / size)
        return [gd, -gd]

    return _result("mse", out, (a, b), bwd)


def cross_entropy(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log probability of the labelled class.

    Consumes probabilities (rows summing to 1); values below LOG_CLAMP are
    floored before the log, where they also stop carrying gradient.
    """
    _check_2d("cross-entropy", probs)
    y = np.asarray(labels, dtype=np.intp)
    if y.shape != (probs.shape[0],):
        raise ValueError(
            f"cross-entropy labels length {y.shape} != batch {probs.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= probs.shape[1]):
        raise ValueError("cross-entropy label out of range")
    rows = np.arange(y.size)
    picked = probs.values[rows, y]
    clamped = np.maximum(picked, LOG_CLAMP)
    out = np.asarray(-np.log(clamped).mean())

    def bwd(g):
        gp = np.zeros_like(probs.values)
        live = picked > LOG_CLAMP
        gp[rows[live], y[live]] = -float(g) / (y.size * clamped[live])
        return [gp]

    return _result("cross-entropy", out, (probs,), bwd)


def kl_divergence(q: Tensor, p: Tensor) -> Tensor:
    """KL(q || p) = sum q (log q - log p) per row, averaged over rows.

    Both inputs are clamped at LOG_CLAMP before the log; 0 log 0 is 0.
    """
    if q.shape != p.shape:
        raise ValueError(f"kl-divergence shape mismatch: {q.shape} vs {p.shape}")
    qv, pv = q.values, p.values
    qc = np.maximum(qv, LOG_CLAMP)
    pc = np.maximum(pv, LOG_CLAMP)
    diff = np.log(qc) - np.log(pc)
    rows = (qv * diff).sum(axis=-1)
    n_rows = max(rows.size, 1)
    out = np.asarray(rows.sum() / n_rows)

    def bwd(g):
        s = float(g) / n_rows
        gq = (diff + (qv > LOG_CLAMP).astype(np.float64)) * s
        gp = -(qv / pc) * (pv > LOG_CLAMP) * s
        return [gq, gp]

    return _result("kl-divergence", out, (q, p), bwd)


def gumbel_softmax(logits: Tensor, temperature: float, noise: np.ndarray,
                   hard: bool = True) -> Tensor:
    """Gumbel-Softmax over the last axis with externally supplied noise.

    ``hard`` returns one-hot rows (argmax of logits+noise) in the forward
    values while gradients follow the tempered soft relaxation
    (straight-through). ``hard=False`` returns the soft rows directly.
    """
    if temperature <= 0:
        raise ValueError(f"gumbel-softmax temperature must be positive, got {temperature}")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != logits.shape:
        raise ValueError(
            f"gumbel-softmax noise shape {noise.shape} != logits {logits.shape}")
    z = (logits.values + noise) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    soft = e / e.sum(axis=-1, keepdims=True)
    if hard:
        idx = np.argmax(logits.values + noise, axis=-1)
        out = np.zeros_like(soft)
        np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
    else:
        out = soft

    def bwd(g):
        dot = (g * soft).sum(axis=-1, keepdims=True)
        return [(g - dot) * soft / temperature]

    return _result("gumbel-softmax", out, (logits,), bwd)


def transpose(x: Tensor) -> Tensor:
    _check_2d("transpose", x)
    out = x.values.T

    def bwd(g):
        return [g.T]

    return _result("transpose", out, (x,), bwd, check=False)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape {x.shape} -> {shape} invalid") from None

    def bwd(g):
        return [g.reshape(x.shape)]

    return _result("reshape", out, (x,), bwd, check=False)


def stop_gradient(x: Tensor) -> Tensor:
    out = x.values.copy()

    def bwd(g):
        return [np.zeros_like(x.values)]

    return _result("stop-gradient", out, (x,), bwd, check=False)


_KINDS: dict[str, Callable] = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "scale": lambda inputs, attrs: scale(inputs[0], attrs["alpha"]),
    "concat": lambda inputs, attrs: concat(inputs, attrs.get("axis", 0)),
    "slice": lambda inputs, attrs: slice_axis(
        inputs[0], attrs.get("axis", 0), attrs["start"], attrs["stop"]),
    "gather-rows": lambda inputs, attrs: gather_rows(inputs[0], attrs["indices"]),
    "layer-norm": lambda inputs, attrs: layer_norm(
        inputs[0], attrs.get("epsilon", LAYER_NORM_EPS)),
    "softmax": lambda inputs, attrs: softmax(
        inputs[0], attrs.get("temperature", 1.0)),
    "log-softmax": lambda inputs, attrs: log_softmax(inputs[0]),
    "gelu": lambda inputs, attrs: gelu(inputs[0]),
    "l2-normalize": lambda inputs, attrs: l2_normalize(inputs[0]),
    "mean": lambda inputs, attrs: mean(inputs[0]),
    "mse": lambda inputs, attrs: mse(*inputs),
    "cross-entropy": lambda inputs, attrs: cross_entropy(inputs[0], attrs["labels"]),
    "kl-divergence": lambda inputs, attrs: kl_divergence(*inputs),
    "gumbel-softmax": lambda inputs, attrs: gumbel_softmax(
        inputs[0], attrs["temperature"], attrs["noise"], attrs.get("hard", True)),
    "transpose": lambda inputs, attrs: transpose(inputs[0]),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "stop-gradient": lambda inputs, attrs: stop_gradient(inputs[0]),
}


def apply(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch an operation by kind name. Unknown kinds are rejected."""
    fn = _KINDS.get(kind)
    if fn is None:
        raise ValueError(f"unknown operation kind: {kind!r}")
    try:
        return fn(list(inputs), attrs or {})
    except KeyError as exc:
        raise ValueError(f"{kind} requires attribute {exc.args[0]!r}") from exc


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """cross_entropy(softmax(logits), labels) fused through log-softmax.

    Numerically stable for any logit magnitude; agrees with the composed
    probability path away from the clamp.
    """
    _check_2d("softmax-cross-entropy", logits)
    y = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if y.shape != (n,):
        raise ValueError(f"labels length {y.shape} != batch {n}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    return scale(mean(mul(log_softmax(logits), Tensor(onehot))), -float(c))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate grads of all requires_grad leaves reachable from ``loss``.

    Returns a map from leaf tensor to its gradient. Leaves absent from the
    map were not reached and have zero gradient by convention. Grads are
    set fresh on each call (no accumulation across calls).
    """
    if loss.values.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p.requires_grad or p._parents):
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
                leaf_grads[node] = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaf_grads


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    """Momentum SGD: m <- momentum * m + g; p <- p - lr * m.

    Momentum buffers persist per parameter across steps.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._buffers = [np.zeros_like(p.values) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray] | None = None) -> None:
        for i, p in enumerate(self.params):
            g = grads.get(p) if grads is not None else p.grad
            if g is None:
                raise ValueError(f"missing gradient for parameter {i} (shape {p.shape})")
            self._buffers[i] = self.momentum * self._buffers[i] + g
            p.assign(p.values - self.lr * self._buffers[i])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    """Adam with bias correction; used only for encoder pretraining."""

    def __init__(self, params: Iterable[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]
        self._t = 0

    def step(self, grads: dict[Tensor, np.ndarray] | None = None) -> None:
        self._t += 1
        for i, p in enumerate(self.params):
            g = grads.get(p) if grads is not None else p.grad
            if g is None:
                raise ValueError(f"missing gradient for parameter {i} (shape {p.shape})")
            self._m[i] = self.b1 * self._m[i] + (1 - self.b1) * g
            self._v[i] = self.b2 * self._v[i] + (1 - self.b2) * g * g
            mh = self._m[i] / (1 - self.b1 ** self._t)
            vh = self._v[i] / (1 - self.b2 ** self._t)
            p.assign(p.values - self.lr * mh / (np.sqrt(vh) + self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params: Sequence[Tensor], grads: dict[Tensor, np.ndarray],
             lr: float, momentum: float,
             buffers: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
    """One functional SGD step. Pass the returned buffers back in to persist
    momentum across steps; SGD (the class) is the stateful equivalent."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    buffers = {} if buffers is None else buffers
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            raise ValueError(f"missing gradient for parameter {i} (shape {p.shape})")
        buf = buffers.get(id(p))
        buf = g.copy() if buf is None else momentum * buf + g
        buffers[id(p)] = buf
        p.assign(p.values - lr * buf)
    return buffers


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def check_gradients(fn: Callable[[Tensor], Tensor], point: Tensor,
                    step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be scalar-valued and deterministic (any noise held fixed);
    a non-deterministic fn is rejected. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    with no_grad():
        first = fn(Tensor(point.values)).values
        second = fn(Tensor(point.values)).values
    if not np.array_equal(first, second):
        raise ValueError("fn is not deterministic: fix its noise before checking")

    leaf = Tensor(point.values, requires_grad=True)
    loss = fn(leaf)
    if loss.values.size != 1:
        raise ValueError(f"fn must be scalar-valued, got shape {loss.shape}")
    backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)

    flat = point.values.ravel()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            plus = flat.copy()
            plus[i] += step
            minus = flat.copy()
            minus[i] -= step
            fp = fn(Tensor(plus.reshape(point.shape))).item()
            fm = fn(Tensor(minus.reshape(point.shape))).item()
            numeric[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic.ravel() - numeric) / np.maximum(1.0, np.abs(analytic.ravel()))
    return float(err.max()) if err.size else 0.0
