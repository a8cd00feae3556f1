"""Minimal reverse-mode autodiff on numpy arrays.

Covers exactly what the policy stack needs: dense layers, ELU, softmax,
log-softmax, batched matmul for attention, neighborhood average pooling,
elementwise arithmetic, reductions, and a central finite-difference
gradient checker.  Training runs at float32; gradient checks build the
same graphs at float64.

Ops record a backward closure only while gradients are enabled and some
input requires them, so rollout inference pays no tape overhead inside
``no_grad()``.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor (scalar unless grad is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad):
        # gradients are never mutated in place, so binding (even a view) is safe
        if self.grad is None:
            self.grad = grad if isinstance(grad, np.ndarray) else np.asarray(grad)
        else:
            self.grad = self.grad + grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x), requires_grad=False)


def _tracked(*tensors) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _tracked(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach grad.shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float))


def add(a, b) -> Tensor:
    # scalar fast path keeps the array dtype (a python float would promote
    # float32 graphs to float64 under numpy's array-array rules)
    if _is_scalar(b):
        a = as_tensor(a)
        out_data = a.data + b

        def backward_s(g):
            a._accumulate(g)

        return _make(out_data, (a,), backward_s)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        out_data = a.data * b

        def backward_s(g):
            a._accumulate(g * b)

        return _make(out_data, (a,), backward_s)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects tensors with ndim >= 2")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    out_data = a.data * a.data

    def backward(g):
        a._accumulate(g * 2.0 * a.data)

    return _make(out_data, (a,), backward)


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg = np.expm1(np.minimum(x, 0.0))          # zero on the positive side
    out_data = np.maximum(x, 0.0) + alpha * neg

    def backward(g):
        if alpha == 1.0:
            # derivative is e^x below zero and exactly 1 above: neg + 1
            a._accumulate(g * (neg + 1.0))
        else:
            a._accumulate(g * np.where(x > 0.0, 1.0, alpha * (neg + 1.0)))

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    return _make(out_data, (a,), backward)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return _make(out_data, (a, b), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis] if isinstance(axis, int) else \
            int(np.prod([a.data.shape[i] for i in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax; outputs are positive and sum to one along axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _make(out_data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        soft = np.exp(out_data)
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out_data, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a._accumulate(full)

    return _make(out_data, (a,), backward)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Select rows along the first axis; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)
    orig = a.data.shape

    def backward(g):
        a._accumulate(g.reshape(orig))

    return _make(out_data, (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.swapaxes(ax1, ax2)

    def backward(g):
        a._accumulate(g.swapaxes(ax1, ax2))

    return _make(out_data, (a,), backward)


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data)


def _pool_matrix(m: int, window: int, dtype) -> np.ndarray:
    if window % 2 != 1:
        raise ValueError("pooling window must be odd")
    if window > m:
        raise ValueError("pooling window larger than the slot count")
    half = window // 2
    p = np.zeros((m, m), dtype=dtype)
    for i in range(m):
        for j in range(-half, half + 1):
            p[i, np.clip(i + j, 0, m - 1)] += 1.0 / window
    return p


_POOL_CACHE: dict = {}


def avg_pool_grid(x, window: int) -> Tensor:
    """Per-slot neighborhood mean along axis -2 with edge clamping."""
    x = as_tensor(x)
    m = x.data.shape[-2]
    key = (m, window, x.data.dtype.str)
    if key not in _POOL_CACHE:
        _POOL_CACHE[key] = _pool_matrix(m, window, x.data.dtype)
    return matmul(constant(_POOL_CACHE[key]), x)


# ---------------------------------------------------------------------------
# parameters and layers

class ParamStore:
    """Named parameter tensors plus init helpers; insertion order is stable."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.ascontiguousarray(data, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def orthogonal(self, name: str, n_in: int, n_out: int, gain: float = 1.0) -> Tensor:
        a = self.rng.standard_normal((n_in, n_out))
        q, r = np.linalg.qr(a if n_in >= n_out else a.T)
        q = q * np.sign(np.diag(r))
        if n_in < n_out:
            q = q.T
        return self.add(name, gain * q[:n_in, :n_out])

    def zeros(self, name: str, *shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def full(self, name: str, shape, value: float) -> Tensor:
        return self.add(name, np.full(shape, value))

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr


class Dense:
    """y = x @ W + b with orthogonal init."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 gain: float = 1.0):
        self.w = store.orthogonal(f"{name}.w", n_in, n_out, gain)
        self.b = store.zeros(f"{name}.b", n_out)
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.data.shape[-1] != self.n_in:
            raise ValueError(f"dense layer expects width {self.n_in}, "
                             f"got {x.data.shape[-1]}")
        return add(matmul(x, self.w), self.b)


class MLP:
    """Dense stack with ELU between layers (linear final layer)."""

    def __init__(self, store: ParamStore, name: str, widths, out_gain: float = 1.0):
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            self.layers.append(Dense(store, f"{name}.l{i}", a, b,
                                     gain=out_gain if last else 1.0))

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = elu(h)
        return h


class MultiHeadAttention:
    """Scaled dot-product attention of one query over m key/value slots."""

    def __init__(self, store: ParamStore, name: str, d_q: int, d_kv: int,
                 d_model: int, heads: int, d_out: int):
        if d_model % heads != 0:
            raise ValueError("heads must divide the projection width")
        self.heads = heads
        self.d_model = d_model
        self.d_head = d_model // heads
        self.wq = Dense(store, f"{name}.wq", d_q, d_model)
        self.wk = Dense(store, f"{name}.wk", d_kv, d_model)
        self.wv = Dense(store, f"{name}.wv", d_kv, d_model)
        self.wo = Dense(store, f"{name}.wo", d_model, d_out)

    def __call__(self, query, keyvalue) -> Tensor:
        """query: (B, d_q); keyvalue: (B, m, d_kv) -> (B, d_out)."""
        query, keyvalue = as_tensor(query), as_tensor(keyvalue)
        bsz, m, _ = keyvalue.data.shape
        h, dh = self.heads, self.d_head
        q = reshape(self.wq(query), (bsz * h, 1, dh))
        k = reshape(swapaxes(reshape(self.wk(keyvalue), (bsz, m, h, dh)), 1, 2),
                    (bsz * h, m, dh))
        v = reshape(swapaxes(reshape(self.wv(keyvalue), (bsz, m, h, dh)), 1, 2),
                    (bsz * h, m, dh))
        scores = mul(matmul(q, swapaxes(k, 1, 2)), 1.0 / np.sqrt(dh))
        attn = softmax(scores, axis=-1)            # (B*h, 1, m)
        mixed = reshape(matmul(attn, v), (bsz, h * dh))
        self.last_attention = attn.data.reshape(bsz, h, m)
        return self.wo(mixed)


def mha(query, keys, values, layer: MultiHeadAttention, heads: int | None = None) -> Tensor:
    """Functional wrapper; keys and values must be the same slots."""
    if values is not keys:
        raise ValueError("this attention layer shares key/value slots")
    return layer(query, keys)


# ---------------------------------------------------------------------------
# finite differences

def grad_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    f() must rebuild the (deterministic, scalar) loss graph on every call.
    Relative error uses max(|analytic|, |numeric|, 1) as the denominator.
    """
    if isinstance(params, dict):
        params = list(params.values())
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            hi = float(f().data)
            p.data[idx] = orig - eps
            lo = float(f().data)
            p.data[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, rel)
    return worst
