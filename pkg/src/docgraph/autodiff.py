"""Tape-based reverse-mode autodiff over dense 2-D arrays, Adam, and a gradient checker.

Values are float32 by default with float64 accumulation inside reductions;
every op validates that its result is finite. One tape per training thread.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense (rows, cols) array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
        arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype, copy=False)
        if not np.isfinite(arr).all():
            raise FloatingPointError("non-finite tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    out: Tensor
    parents: tuple[Tensor, ...]
    # maps dLoss/dout to per-parent gradient arrays (None for non-diff parents)
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Operations recorded in execution order; execution order is topological."""

    nodes: list[TapeNode] = field(default_factory=list)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)


_tape_stack: list[Tape] = []
_grad_enabled: bool = True


@contextlib.contextmanager
def tape() -> Iterator[Tape]:
    """Activate a fresh tape; ops inside the block record onto it."""
    t = Tape()
    _tape_stack.append(t)
    try:
        yield t
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.isfinite(out_data).all():
        raise FloatingPointError("non-finite op result")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs and _tape_stack:
        _tape_stack[-1].record(TapeNode(out, parents, backward))
    return out


def backward(loss: Tensor, on: Tape | None = None) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    Gradients accumulate across calls until explicitly zeroed.
    """
    t = on if on is not None else (_tape_stack[-1] if _tape_stack else None)
    if t is None:
        raise RuntimeError("backward requires an active or explicit tape")
    if loss.shape != (1, 1):
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(t.nodes):
        out_adj = adjoint.pop(id(node.out), None)
        leaves.pop(id(node.out), None)
        if out_adj is None:
            continue
        if node.out.requires_grad:
            node.out.accumulate_grad(out_adj)
        for parent, g in zip(node.parents, node.backward(out_adj)):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = g
                leaves[key] = parent
    for key, tensor in leaves.items():
        if tensor.requires_grad:
            tensor.accumulate_grad(adjoint[key])


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Forward ops


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.data, b.data)
    out = (_f64(a.data) @ _f64(b.data)).astype(dtype)

    def back(c: np.ndarray):
        da = (_f64(c) @ _f64(b.data).T).astype(dtype)
        db = (_f64(a.data).T @ _f64(c)).astype(dtype)
        return da, db

    return _record(out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data.T)

    def back(c: np.ndarray):
        return (np.ascontiguousarray(c.T),)

    return _record(out, (a,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts (1,m) row, (n,1) column, or (n,1)+(1,m) outer broadcasts."""
    ra, ca = a.shape
    rb, cb = b.shape
    compatible = (ra == rb or ra == 1 or rb == 1) and (ca == cb or ca == 1 or cb == 1)
    if not compatible:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = a.data + b.data

    def reduce_to(c: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
        g = c
        if shape[0] == 1 and c.shape[0] > 1:
            g = _f64(g).sum(axis=0, keepdims=True)
        if shape[1] == 1 and c.shape[1] > 1:
            g = _f64(g).sum(axis=1, keepdims=True)
        return np.asarray(g, dtype=c.dtype)

    def back(c: np.ndarray):
        return reduce_to(c, a.shape), reduce_to(c, b.shape)

    return _record(out, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    factor = a.data.dtype.type(c)
    out = a.data * factor

    def back(g: np.ndarray):
        return (g * factor,)

    return _record(out, (a,), back)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0  # subgradient at 0 is 0

    def back(c: np.ndarray):
        return (c * mask,)

    return _record(out, (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    s = a.data.dtype.type(slope)
    out = np.where(a.data > 0, a.data, a.data * s)

    def back(c: np.ndarray):
        return (c * np.where(a.data > 0, a.data.dtype.type(1), s),)

    return _record(out, (a,), back)


def elu(a: Tensor) -> Tensor:
    neg = np.expm1(np.minimum(a.data, 0))
    out = np.where(a.data > 0, a.data, neg.astype(a.data.dtype))

    def back(c: np.ndarray):
        return (c * np.where(a.data > 0, a.data.dtype.type(1), (neg + 1).astype(a.data.dtype)),)

    return _record(out, (a,), back)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax, optionally restricted to a boolean mask.

    Masked-out entries get probability 0; a row whose mask is empty is an error.
    """
    x = _f64(a.data)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ValueError(f"mask shape {mask.shape} != tensor shape {a.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("softmax mask has an empty row")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = (e / e.sum(axis=1, keepdims=True)).astype(a.data.dtype)

    def back(c: np.ndarray):
        p = _f64(probs)
        c64 = _f64(c)
        inner = (c64 * p).sum(axis=1, keepdims=True)
        return ((p * (c64 - inner)).astype(a.data.dtype),)

    return _record(probs, (a,), back)


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows: (n, d) -> (1, d)."""
    n = a.shape[0]
    out = (_f64(a.data).sum(axis=0, keepdims=True) / n).astype(a.data.dtype)

    def back(c: np.ndarray):
        return (np.repeat(c / a.data.dtype.type(n), n, axis=0),)

    return _record(out, (a,), back)


def sum_all(a: Tensor) -> Tensor:
    out = np.array([[_f64(a.data).sum()]], dtype=a.data.dtype)

    def back(c: np.ndarray):
        return (np.full_like(a.data, c[0, 0]),)

    return _record(out, (a,), back)


def dropout(a: Tensor, keep_prob: float, rng: np.random.Generator | int) -> Tensor:
    """Inverted dropout: retained entries scale by 1/keep_prob. Callers skip it in eval mode."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in (0, 1]")
    if keep_prob == 1.0:
        return scale(a, 1.0)
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    keep = rng.random(a.shape) < keep_prob
    factor = keep.astype(a.data.dtype) / a.data.dtype.type(keep_prob)
    out = a.data * factor

    def back(c: np.ndarray):
        return (c * factor,)

    return _record(out, (a,), back)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of the label under softmax(logits); logits are 1 x K."""
    if logits.shape[0] != 1:
        raise ValueError(f"cross_entropy expects a 1 x K logit row, got {logits.shape}")
    if not 0 <= label < logits.shape[1]:
        raise ValueError(f"label {label} out of range for K={logits.shape[1]}")
    x = _f64(logits.data[0])
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    out = np.array([[lse - x[label]]], dtype=logits.data.dtype)
    probs = np.exp(x - lse)

    def back(c: np.ndarray):
        g = probs.copy()
        g[label] -= 1.0
        return ((g * c[0, 0]).astype(logits.data.dtype).reshape(1, -1),)

    return _record(out, (logits,), back)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    """Adam moment accumulators, lazily shaped to the parameter list."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState, grads: Sequence[np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place on params."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ValueError("params and grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**state.t)
        v_hat = state.v[i] / (1 - b2**state.t)
        p.data = p.data - (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(closure: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Compare analytic gradients against central finite differences.

    Params are promoted to float64 for the duration of the check so the
    difference quotient is not dominated by storage rounding; the closure must
    be deterministic (fix seeds, disable dropout). Returns the max relative
    error  |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    originals = [p.data for p in params]
    saved_grads = [p.grad for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        with tape() as t:
            loss = closure()
            backward(loss, on=t)
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        for p in params:
            p.grad = None

        worst = 0.0
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + eps
                with no_grad():
                    f_plus = closure().item()
                flat[idx] = orig - eps
                with no_grad():
                    f_minus = closure().item()
                flat[idx] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                ana = float(a.reshape(-1)[idx])
                rel = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
                worst = max(worst, rel)
        return worst
    finally:
        for p, data, g in zip(params, originals, saved_grads):
            p.data = data
            p.grad = g


# ---------------------------------------------------------------------------
# Parameter checkpoint container (magic DGPT)

PARAM_MAGIC = b"DGPT"
PARAM_VERSION = 1


def save_params(named: dict[str, Tensor] | dict[str, np.ndarray], path: str | Path) -> int:
    """Write named parameter matrices; float32 payload, little-endian."""
    written = 0
    with open(path, "wb") as fh:
        written += fh.write(PARAM_MAGIC)
        written += fh.write(struct.pack("<HQ", PARAM_VERSION, len(named)))
        for name, value in named.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            if arr.ndim != 2:
                raise ValueError(f"parameter {name!r} is not 2-D")
            name_bytes = name.encode("utf-8")
            written += fh.write(struct.pack("<H", len(name_bytes)))
            written += fh.write(name_bytes)
            written += fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            written += fh.write(arr.tobytes())
    return written


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    from .embedstore import BadMagicError, TruncatedPayloadError, VersionMismatchError

    def read_exact(fh, count, what):
        buf = fh.read(count)
        if len(buf) != count:
            raise TruncatedPayloadError(f"truncated payload while reading {what}")
        return buf

    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = read_exact(fh, 4, "magic")
        if magic != PARAM_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {PARAM_MAGIC!r}")
        version, count = struct.unpack("<HQ", read_exact(fh, 10, "header"))
        if version != PARAM_VERSION:
            raise VersionMismatchError(f"unsupported version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", read_exact(fh, 2, "name length"))
            name = read_exact(fh, name_len, "name").decode("utf-8")
            rows, cols = struct.unpack("<II", read_exact(fh, 8, f"{name!r} shape"))
            payload = read_exact(fh, 4 * rows * cols, f"{name!r} payload")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    return out
