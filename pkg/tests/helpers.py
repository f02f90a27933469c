"""Shared test oracles.

central_diff is the independent gradient oracle: it sees only forward
values (graph recording disabled), never the engine's backward pass.
"""

from __future__ import annotations

import hashlib

import numpy as np

from anop.tensor import Tensor, no_grad


def central_diff(fn, values: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at ``values``."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            plus = flat.copy()
            plus[i] += step
            minus = flat.copy()
            minus[i] -= step
            fp = fn(Tensor(plus.reshape(values.shape))).item()
            fm = fn(Tensor(minus.reshape(values.shape))).item()
            out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(values.shape)


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float((np.abs(a - n) / np.maximum(1.0, np.abs(a))).max())


def tensor_bytes_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()
