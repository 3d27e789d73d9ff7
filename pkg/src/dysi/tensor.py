"""Reverse-mode automatic differentiation on numpy arrays.

Every differentiable primitive records its parents and a closure mapping the
output gradient to parent gradients.  ``Tensor.backward`` walks the graph in
reverse topological order.  Arrays default to float32; float64 graphs are
supported so finite-difference checks are not swamped by rounding noise.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from dysi.errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, expert pass)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.node_id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the trailing two axes; leading axes must match."""
    if a.data.shape[:-2] != b.data.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., d_in] @ weight[d_in, d_out] + bias[d_out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(*lead, weight.shape[1]), parents, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return (gx.astype(x.dtype, copy=False),
                (flat_g * xhat.reshape(-1, d)).sum(axis=0),
                flat_g.sum(axis=0))

    return _make(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no graph edge back to ``x``."""
    return Tensor(x.data)


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    sizes = [x.shape[-1] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=-1), tuple(xs), backward)


# ---------------------------------------------------------------------------
# normalizers and losses
# ---------------------------------------------------------------------------

def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(logits, axis)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax received non-finite logits")
    s = softmax_array(logits.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (logits,), backward)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(logits, axis)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("log_softmax received non-finite logits")
    lp = log_softmax_array(logits.data, axis)

    def backward(g):
        return (g - np.exp(lp) * g.sum(axis=axis, keepdims=True),)

    return _make(lp, (logits,), backward)


def label_smoothed_nll(log_probs: Tensor, target, eps_ls: float) -> Tensor:
    """Per-position smoothed NLL over the last axis.

    ``-( (1-eps)*log p[target] + eps/(V-1) * sum_{w != target} log p[w] )``.
    ``target`` has the shape of ``log_probs`` minus its last axis.
    """
    target = np.asarray(target)
    V = log_probs.shape[-1]
    if target.shape != log_probs.shape[:-1]:
        raise ShapeError(f"target shape {target.shape} does not match {log_probs.shape[:-1]}")
    if target.size and (target.min() < 0 or target.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError("eps_ls must be in [0, 1)")
    lp = log_probs.data
    picked = np.take_along_axis(lp, target[..., None], axis=-1)[..., 0]
    if eps_ls == 0.0:
        out = -picked

        def backward(g):
            gl = np.zeros_like(lp)
            np.put_along_axis(gl, target[..., None], -g[..., None], axis=-1)
            return (gl,)
    else:
        w_off = lp.dtype.type(eps_ls / (V - 1))
        w_on = lp.dtype.type(1.0 - eps_ls)
        rest = lp.sum(axis=-1) - picked
        out = -(w_on * picked + w_off * rest)

        def backward(g):
            gl = np.broadcast_to(-w_off * g[..., None], lp.shape).copy()
            np.put_along_axis(gl, target[..., None], -w_on * g[..., None], axis=-1)
            return (gl,)

    return _make(np.asarray(out, dtype=lp.dtype), (log_probs,), backward)


def kl_divergence(p, log_q: Tensor, log_p: np.ndarray | None = None) -> Tensor:
    """Per-row KL(p || q) over the last axis, with 0*log 0 taken as 0.

    ``p`` is a probability tensor (pass it through stop_gradient to freeze it);
    ``log_q`` holds log-probabilities.  ``log_p`` may be supplied when the
    caller already has it, avoiding a log(exp(.)) round trip.
    """
    p = as_tensor(p, dtype=log_q.dtype)
    if p.shape != log_q.shape:
        raise ShapeError(f"kl_divergence shapes {p.shape} and {log_q.shape} differ")
    pd = p.data
    pos = pd > 0
    if log_p is None:
        log_p = np.log(np.where(pos, pd, 1))
    log_p = np.where(pos, log_p, 0).astype(pd.dtype)
    out = (pd * (log_p - log_q.data)).sum(axis=-1)

    def backward(g):
        gq = -pd * g[..., None]
        gp = None
        if p.requires_grad:
            gp = np.where(pos, log_p - log_q.data + 1, 0).astype(pd.dtype) * g[..., None]
        return gp, gq

    return _make(np.asarray(out, dtype=pd.dtype), (p, log_q), backward)


def masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of ``values`` where ``mask`` is true, divided by the mask count."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked_mean over an empty mask")
    w = mask.astype(values.dtype)
    return mul(tsum(mul(values, w)), 1.0 / count)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias) v over [B, H, T, d] tensors.

    ``bias`` broadcasts to [B, H, Tq, Tk] and holds 0 or a large negative value.
    """
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale + bias
    attn = softmax_array(scores, -1)
    out = attn @ v.data

    def backward(g):
        gv = np.swapaxes(attn, -1, -2) @ g
        ga = g @ np.swapaxes(v.data, -1, -2)
        gs = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k.data
        gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _make(out.astype(q.dtype, copy=False), (q, k, v), backward)
