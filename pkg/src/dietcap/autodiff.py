"""Reverse-mode automatic differentiation on numpy arrays.

A small tape: each op returns a new :class:`Tensor` that remembers its parent
tensors and a closure that propagates the upstream gradient. ``backward`` on a
scalar walks the tape once in reverse topological order. The op set is exactly
what the captioning model needs (matmul, bias add, relu, masked softmax,
layer norm, cross entropy, gather, reshape/concat/reductions); broadcasting is
deliberately restricted to row-bias adds and python scalars so that every
backward rule is a hand-checked sum over known axes.

Storage is float32 by default. Wrap model construction and the forward pass in
``with precision(np.float64):`` to run gradient checks at full precision.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float32/float64)."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ShapeError(f"unsupported precision {dtype!r}; use float32 or float64")
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def no_grad():
    """Run ops without recording the tape (decode-time forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A node in the tape: numpy storage plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor through the recorded tape.

        Without an explicit seed the tensor must be scalar (size 1). Running
        backward twice on the same root is rejected: closures are dropped
        after use, so a second pass would silently produce wrong gradients.
        """
        if self._backward_done:
            raise GraphError("backward already ran on this graph; rebuild the forward pass")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(
                    f"backward without a seed needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed shape {grad.shape} != tensor shape {self.data.shape}")

        order = _topo_order(self)
        self.grad = np.array(grad, copy=True)
        for node in order:
            if node._backward is not None:
                if node._backward_done:
                    raise GraphError("graph node already consumed by a previous backward")
                node._backward()
                node._backward_done = True
                node._backward = None  # free closures and their captured arrays
        self._backward_done = True

    # Operator sugar. Scalars mean python numbers; tensor-tensor forms defer
    # to the strict-shape ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -float(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order, iterative so deep graphs cannot overflow."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, children_done = stack.pop()
        if children_done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[Tensor], Callable[[], None]] | None) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
        out._backward = backward(out)
    else:
        out._op = op
    return out


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def add(a: Tensor, b) -> Tensor:
    """a + b where b is a same-shape tensor, a 1-D bias over the last axis,
    or a python scalar. No other broadcasting."""
    if not isinstance(b, Tensor):
        s = float(b)
        def bw(out: Tensor):
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad)
            return run
        return _result(a.data + s, [a], "add_scalar", bw)

    if a.data.shape == b.data.shape:
        def bw(out: Tensor):
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad)
                if b.requires_grad:
                    b._accumulate(out.grad)
            return run
        return _result(a.data + b.data, [a, b], "add", bw)

    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        def bw(out: Tensor):
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad)
                if b.requires_grad:
                    axes = tuple(range(out.grad.ndim - 1))
                    b._accumulate(out.grad.sum(axis=axes) if axes else out.grad)
            return run
        return _result(a.data + b.data, [a, b], "add_bias", bw)

    raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor or a python scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        def bw(out: Tensor):
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad * s)
            return run
        return _result(a.data * s, [a], "mul_scalar", bw)

    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * b.data)
            if b.requires_grad:
                b._accumulate(out.grad * a.data)
        return run
    return _result(a.data * b.data, [a, b], "mul", bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, or stacked with identical leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading dims must match exactly, {ad.shape} @ {bd.shape}")

    def bw(out: Tensor):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g @ bd.swapaxes(-1, -2))
            if b.requires_grad:
                b._accumulate(ad.swapaxes(-1, -2) @ g)
        return run
    return _result(ad @ bd, [a, b], "matmul", bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs >=2-D, got {a.data.shape}")

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad.swapaxes(-1, -2))
        return run
    return _result(a.data.swapaxes(-1, -2), [a], "transpose", bw)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Reorder axes; backward applies the inverse permutation."""
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {a.data.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad.transpose(inverse))
        return run
    return _result(a.data.transpose(axes), [a], "permute", bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    target = tuple(shape)
    if int(np.prod([d for d in target if d != -1])) == 0 and -1 in target:
        raise ShapeError(f"reshape: ambiguous target {target}")

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad.reshape(a.data.shape))
        return run
    try:
        data = a.data.reshape(target)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {target}") from e
    return _result(data, [a], "reshape", bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    datas = [p.data for p in parts]
    base = list(datas[0].shape)
    for d in datas[1:]:
        other = list(d.shape)
        if len(other) != len(base):
            raise ShapeError(f"concat: rank mismatch {datas[0].shape} vs {d.shape}")
        for ax, (x, y) in enumerate(zip(base, other)):
            if ax != (axis % len(base)) and x != y:
                raise ShapeError(f"concat: shapes {datas[0].shape} vs {d.shape} on axis {axis}")
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(out: Tensor):
        def run():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(int(lo), int(hi))
                    p._accumulate(out.grad[tuple(sl)])
        return run
    return _result(np.concatenate(datas, axis=axis), list(parts), "concat", bw)


def take(a: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; output has the index array's shape.

    The scatter-add backward makes this the single primitive behind both
    embedding lookup and im2col patch extraction.
    """
    idx = np.asarray(flat_indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"take: indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.size):
        raise IndexError(
            f"take: index out of range for {a.data.size} elements "
            f"(min {idx.min()}, max {idx.max()})"
        )

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                g = np.zeros(a.data.size, dtype=a.data.dtype)
                np.add.at(g, idx.reshape(-1), out.grad.reshape(-1))
                a._accumulate(g.reshape(a.data.shape))
        return run
    return _result(a.data.reshape(-1)[idx], [a], "take", bw)


def take_rows(a: Tensor, row_ids: np.ndarray) -> Tensor:
    """Gather whole rows of a 2-D tensor (embedding lookup)."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D table, got {a.data.shape}")
    ids = np.asarray(row_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"take_rows: ids must be 1-D, got {ids.shape}")
    ncol = a.data.shape[1]
    flat = ids[:, None] * ncol + np.arange(ncol, dtype=np.int64)[None, :]
    return take(a, flat)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * mask)
        return run
    return _result(np.where(mask, a.data, 0.0).astype(a.data.dtype), [a], "relu", bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; -inf entries act as hard masks.

    A row that is entirely -inf (every key masked) yields zeros instead of
    NaN; callers treat such rows as "attend to nothing". NaN or +inf input is
    rejected outright.
    """
    d = a.data
    if np.isnan(d).any():
        raise NumericError("softmax: NaN in input")
    if np.isposinf(d).any():
        raise NumericError("softmax: +inf in input")
    m = np.max(d, axis=axis, keepdims=True)
    shifted = d - np.where(np.isneginf(m), 0.0, m)
    e = np.exp(shifted)
    e = np.where(np.isneginf(d), 0.0, e)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)
    y = y.astype(d.dtype)

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                g = out.grad
                inner = (g * y).sum(axis=axis, keepdims=True)
                a._accumulate(y * (g - inner))
        return run
    return _result(y, [a], "softmax", bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data
    nfeat = d.shape[-1] if d.ndim else 0
    if nfeat < 2:
        raise ShapeError(f"layer_norm needs last axis >= 2, got shape {d.shape}")
    if gain.data.shape != (nfeat,) or bias.data.shape != (nfeat,):
        raise ShapeError(
            f"layer_norm: gain/bias must be ({nfeat},), got {gain.data.shape} and {bias.data.shape}"
        )
    mu = d.mean(axis=-1, keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = (xhat * gain.data + bias.data).astype(d.dtype)

    def bw(out: Tensor):
        def run():
            g = out.grad
            if gain.requires_grad:
                axes = tuple(range(g.ndim - 1))
                gain._accumulate((g * xhat).sum(axis=axes) if axes else g * xhat)
            if bias.requires_grad:
                axes = tuple(range(g.ndim - 1))
                bias._accumulate(g.sum(axis=axes) if axes else g)
            if x.requires_grad:
                # Standard layer-norm backward: project out the mean and the
                # xhat component, then rescale by 1/std.
                dxhat = g * gain.data
                mean_d = dxhat.mean(axis=-1, keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(inv * (dxhat - mean_d - xhat * mean_dx))
        return run
    return _result(y, [x, gain, bias], "layer_norm", bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token cross entropy from raw logits.

    logits: [T, V]; targets: int ids, shape [T]. Log-sum-exp is max-shifted,
    so extreme logits do not overflow; a huge margin on the target drives the
    loss to exactly 0.
    """
    d = logits.data
    if d.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [T, V], got {d.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim != 1 or t.shape[0] != d.shape[0]:
        raise ShapeError(f"cross_entropy: targets shape {t.shape} != ({d.shape[0]},)")
    if t.size and (t.min() < 0 or t.max() >= d.shape[1]):
        raise IndexError(f"cross_entropy: target id out of range 0..{d.shape[1] - 1}")
    n = d.shape[0]
    m = d.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(d - m).sum(axis=1))
    losses = lse - d[np.arange(n), t]
    out_val = np.asarray(losses.mean(), dtype=d.dtype)

    def bw(out: Tensor):
        def run():
            if logits.requires_grad:
                p = np.exp(d - lse[:, None])
                p[np.arange(n), t] -= 1.0
                logits._accumulate(p * (out.grad / n))
        return run
    return _result(out_val, [logits], "cross_entropy", bw)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
        return run
    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), [a], "sum", bw)


def mean_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def stack_sum(parts: Iterable[Tensor]) -> Tensor:
    """Sum of same-shape tensors (batch loss accumulation)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("stack_sum of zero tensors")
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return total


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...], gain: float = 1.0) -> np.ndarray:
    """Glorot-uniform draw; returned as float64, cast by the caller."""
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Adam:
    """Adam with bias correction; update skipped for params with no grad."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / b1t
            vhat = v / b2t
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
