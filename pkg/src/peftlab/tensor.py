"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and an adjoint closure on
the output tensor. ``backward`` replays the recorded graph in exact reverse
execution order, accumulating gradients only into tensors that were created
with ``requires_grad=True``.

Storage is row-major numpy float64. Broadcasting is deliberately restricted
to scalar scaling and last-axis vectors, which keeps every adjoint auditable.
"""

from __future__ import annotations

import itertools

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DataError(ValueError):
    """Operand values are outside the operation's domain."""


class UsageError(RuntimeError):
    """The operation was called in an unsupported way."""


_EXEC_COUNTER = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._order = next(_EXEC_COUNTER)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _check_elementwise(a: Tensor, b: Tensor) -> bool:
    """True when b is a last-axis vector applied across a; False for equal shapes."""
    if a.shape == b.shape:
        return False
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_elementwise(a, b)
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(g)
        if vec:
            b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))
        else:
            b._accumulate(g)

    return _result(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_elementwise(a, b)
    out_data = a.data * b.data

    def backward(g):
        a._accumulate(g * b.data)
        gb = g * a.data
        if vec:
            b._accumulate(gb.reshape(-1, b.shape[0]).sum(axis=0))
        else:
            b._accumulate(gb)

    return _result(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a._accumulate(g * s)

    return _result(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.data.ndim != b.data.ndim and not (a.data.ndim == 2 and b.data.ndim == 2):
        raise DimensionError(f"matmul rank mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(out_data, (a, b), backward)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T for 2-D operands; avoids materializing an explicit transpose."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_t shape mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data.T

    def backward(g):
        a._accumulate(g @ b.data)
        b._accumulate(g.T @ a.data)

    return _result(out_data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _result(a.data * mask, (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate((g - (g * y).sum(axis=axis, keepdims=True)) * y)

    return _result(y, (a,), backward)


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-8) -> Tensor:
    if gain.data.ndim != 1 or gain.shape[0] != a.shape[-1]:
        raise DimensionError(f"gain shape {gain.shape} does not match last axis of {a.shape}")
    n = a.shape[-1]
    r = np.sqrt((a.data ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = a.data / r
    out_data = normed * gain.data

    def backward(g):
        gg = g * gain.data
        a._accumulate(gg / r - a.data * ((gg * a.data).sum(axis=-1, keepdims=True) / (n * r ** 3)))
        gain._accumulate((g * normed).reshape(-1, n).sum(axis=0))

    return _result(out_data, (a, gain), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"token id out of range [0, {table.shape[0]})")
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids, g)
            table._accumulate(acc)

    return _result(out_data, (table,), backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-probability over non-ignored target positions.

    With every position ignored the loss is defined as 0 with zero gradient,
    so padding-only batches never produce NaN.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise DimensionError(f"cross_entropy shapes: logits {logits.shape}, targets {targets.shape}")
    keep = targets != ignore_index
    kept = targets[keep]
    if kept.size and (kept.min() < 0 or kept.max() >= logits.shape[1]):
        raise DataError(f"target id out of range [0, {logits.shape[1]})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n_kept = int(keep.sum())
    if n_kept == 0:
        loss = 0.0
    else:
        loss = -logp[keep, kept].mean()

    def backward(g):
        if n_kept == 0:
            return
        p = np.exp(logp)
        d = np.zeros_like(logits.data)
        d[keep] = p[keep]
        d[keep, kept] -= 1.0
        logits._accumulate(d * (float(g) / n_kept))

    return _result(np.float64(loss), (logits,), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return _result(np.float64(a.data.sum()), (a,), backward)


def l1_norm(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward(g):
        a._accumulate(sign * float(g))

    return _result(np.float64(np.abs(a.data).sum()), (a,), backward)


def split_heads(a: Tensor, n_heads: int) -> Tensor:
    """(L, d) -> (n_heads, L, d // n_heads)."""
    length, d = a.shape
    if d % n_heads:
        raise DimensionError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    out_data = a.data.reshape(length, n_heads, dh).transpose(1, 0, 2)

    def backward(g):
        a._accumulate(g.transpose(1, 0, 2).reshape(length, d))

    return _result(out_data, (a,), backward)


def merge_heads(a: Tensor) -> Tensor:
    """(n_heads, L, dh) -> (L, n_heads * dh)."""
    h, length, dh = a.shape
    out_data = a.data.transpose(1, 0, 2).reshape(length, h * dh)

    def backward(g):
        a._accumulate(g.reshape(length, h, dh).transpose(1, 0, 2))

    return _result(out_data, (a,), backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack (m, d) above (n, d) -> (m + n, d)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows shapes: {a.shape}, {b.shape}")
    m = a.shape[0]
    out_data = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        a._accumulate(g[:m])
        b._accumulate(g[m:])

    return _result(out_data, (a, b), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Fused scaled-dot-product attention over per-head operands (H, L, dh).

    ``mask`` is an additive (Lq, Lk) array (0 for visible, large negative for
    hidden). Fusing score/softmax/value into one node keeps the tape small,
    which dominates runtime on long prompts.
    """
    if q.data.ndim != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise DimensionError(f"attention shapes: q {q.shape}, k {k.shape}, v {v.shape}")
    inv = 1.0 / np.sqrt(q.shape[2])
    s = q.data @ np.swapaxes(k.data, 1, 2)
    s *= inv
    if mask is not None:
        s += mask
    s -= s.max(axis=2, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=2, keepdims=True)
    a = s
    out_data = a @ v.data

    def backward(g):
        v._accumulate(np.swapaxes(a, 1, 2) @ g)
        ds = g @ np.swapaxes(v.data, 1, 2)
        ds -= (ds * a).sum(axis=2, keepdims=True)
        ds *= a
        q._accumulate((ds @ k.data) * inv)
        k._accumulate((np.swapaxes(ds, 1, 2) @ q.data) * inv)

    return _result(out_data, (q, k, v), backward)


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from a scalar loss."""
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._order, reverse=True)
    # Interior node grads are per-pass scratch; leaf grads accumulate across passes.
    for t in nodes:
        t.grad = None
    loss._accumulate(np.ones_like(loss.data))
    for t in nodes:
        t._backward(t.grad if t.grad is not None else np.zeros_like(t.data))
