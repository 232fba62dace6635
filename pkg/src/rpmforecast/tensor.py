"""Small reverse-mode autodiff over numpy arrays, plus Adam and a gradient checker.

Operations record onto the innermost active :class:`Tape`. Outside a tape
nothing is recorded, so inference runs as plain numpy. Backward rules live in
``BACKWARD`` keyed by op name.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []
_CHECK_FINITE = False


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype.kind not in "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple
    out: Tensor
    ctx: dict


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


@contextlib.contextmanager
def checked():
    """Raise FloatingPointError whenever an op produces NaN or Inf."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, True
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], **ctx) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    needs = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _TAPES[-1].nodes.append(Node(op, tuple(inputs), out, ctx))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------- ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _record("add", a.data + b.data, (a, b))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record("mul", a.data * b.data, (a, b))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return _record("scalar_mul", a.data * c, (a,), c=c)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b))


def tanh(a: Tensor) -> Tensor:
    return _record("tanh", np.tanh(a.data), (a,))


def relu(a: Tensor) -> Tensor:
    return _record("relu", np.maximum(a.data, 0), (a,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
    return _record("sigmoid", out.astype(x.dtype, copy=False), (a,))


def _masked_softmax_array(x: np.ndarray, mask: np.ndarray, axis: int = -1, inplace: bool = False) -> np.ndarray:
    """Masked softmax of ``x``; ``mask`` need only broadcast to ``x`` (it is never expanded)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != x.ndim or mask.shape[axis] != x.shape[axis]:
        mask = np.broadcast_to(mask, x.shape)
    if not np.all(mask.any(axis=axis)):
        raise ValueError("softmax_masked: a row has every position masked")
    z = x if inplace else x.copy()
    if not mask.all():
        z += np.where(mask, 0, -np.inf).astype(x.dtype)
    z -= z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)  # exp(-inf) is exactly 0 at masked positions
    z *= 1.0 / z.sum(axis=axis, keepdims=True)
    return z


def softmax_masked(logits: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` that gives masked-out positions exactly zero probability."""
    out = _masked_softmax_array(logits.data, mask, axis)
    return _record("softmax_masked", out, (logits,), axis=axis)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, n_heads: int) -> Tensor:
    """Scaled dot-product attention over key positions allowed by ``mask``.

    ``q``, ``k``, ``v`` are (B, n, h * hd); ``mask`` is (B, n) with True for real
    tokens. Returns the concatenated head outputs, (B, n, h * hd).
    """
    b, n, width = q.shape
    if k.shape != q.shape or v.shape != q.shape or width % n_heads:
        raise ShapeError(f"multihead_attention: shapes {q.shape}, {k.shape}, {v.shape} with {n_heads} heads")
    hd = width // n_heads
    scale = 1.0 / np.sqrt(hd)

    def split(x: np.ndarray) -> np.ndarray:
        return x.reshape(b, n, n_heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh * np.asarray(scale, dtype=qh.dtype)) @ kh.transpose(0, 1, 3, 2)
    probs = _masked_softmax_array(scores, np.asarray(mask, dtype=bool)[:, None, None, :], inplace=True)
    out_h = probs @ vh
    out = out_h.transpose(0, 2, 1, 3).reshape(b, n, width)
    return _record("multihead_attention", out, (q, k, v), probs=probs, out_h=out_h, n_heads=n_heads, scale=scale)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return _record("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), xhat=xhat, inv=inv)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or outside training."""
    if not train or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1 - p)
    return _record("dropout", x.data * keep, (x,), keep=keep)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: ids outside table of {table.shape[0]} rows")
    return _record("embedding_lookup", table.data[ids], (table,), ids=ids)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    return _record("concat", data, tensors, axis=axis, sizes=sizes)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _record("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scalar_mul(sum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return _record("reshape", x.data.reshape(shape), (x,))


def transpose(x: Tensor, axes) -> Tensor:
    return _record("transpose", x.data.transpose(axes), (x,), axes=tuple(axes))


BCE_EPS = 1e-7


def bce_loss(prob: Tensor, label, weights=None) -> Tensor:
    """Binary cross-entropy with ``prob`` clamped to [1e-7, 1 - 1e-7].

    Without ``weights`` this is the mean over elements, otherwise the weighted sum.
    """
    y = np.asarray(label, dtype=prob.data.dtype)
    if y.shape != prob.shape:
        y = np.broadcast_to(y, prob.shape)
    dt = prob.data.dtype
    w = np.full(prob.shape, 1.0 / max(prob.data.size, 1), dtype=dt) if weights is None else np.asarray(weights, dtype=dt)
    p = np.clip(prob.data, BCE_EPS, 1 - BCE_EPS)
    loss = -(w * (y * np.log(p) + (1 - y) * np.log(1 - p))).sum()
    return _record("bce_loss", np.asarray(loss, dtype=prob.data.dtype), (prob,), y=y, w=w, p=p)


# --------------------------------------------------------------------------- backward rules


def _add_bw(ctx, g, a, b, out):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_bw(ctx, g, a, b, out):
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _scalar_mul_bw(ctx, g, a, out):
    return (g * ctx["c"],)


def _matmul_bw(ctx, g, a, b, out):
    A, B = a.data, b.data
    if A.ndim == 1:
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.outer(A, g) if B.ndim == 2 else None
        return ga, gb
    ga = g @ np.swapaxes(B, -1, -2)
    if B.ndim == 2:
        gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
    return _unbroadcast(ga, A.shape), gb


def _tanh_bw(ctx, g, a, out):
    return (g * (1 - out.data * out.data),)


def _relu_bw(ctx, g, a, out):
    return (g * (a.data > 0),)


def _sigmoid_bw(ctx, g, a, out):
    s = out.data
    return (g * s * (1 - s),)


def _softmax_bw(ctx, g, a, out):
    y = out.data
    return (y * (g - (g * y).sum(axis=ctx["axis"], keepdims=True)),)


def _mha_bw(ctx, g, q, k, v, out):
    probs, h, scale = ctx["probs"], ctx["n_heads"], ctx["scale"]
    b, n, width = q.shape
    hd = width // h

    def split(x: np.ndarray) -> np.ndarray:
        return x.reshape(b, n, h, hd).transpose(0, 2, 1, 3)

    def merge(x: np.ndarray) -> np.ndarray:
        return x.transpose(0, 2, 1, 3).reshape(b, n, width)

    qh, kh, vh, gh = split(q.data), split(k.data), split(v.data), split(g)
    gv = probs.transpose(0, 1, 3, 2) @ gh
    gs = gh @ vh.transpose(0, 1, 3, 2)
    # softmax backward: sum_j p_ij * gs_ij equals g_i . out_i, which avoids another n x n pass
    gs -= (gh * ctx["out_h"]).sum(axis=-1, keepdims=True)
    gs *= probs
    sc = np.asarray(scale, dtype=gs.dtype)
    gq = (gs @ kh) * sc
    gk = (gs.transpose(0, 1, 3, 2) @ qh) * sc
    return merge(gq), merge(gk), merge(gv)


def _layer_norm_bw(ctx, g, x, gamma, beta, out):
    xhat, inv = ctx["xhat"], ctx["inv"]
    lead = tuple(range(g.ndim - 1))
    ggamma = (g * xhat).sum(axis=lead)
    gbeta = g.sum(axis=lead)
    gx_hat = g * gamma.data
    gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
    return gx, ggamma, gbeta


def _dropout_bw(ctx, g, a, out):
    return (g * ctx["keep"],)


def _embedding_bw(ctx, g, table, out):
    ids = ctx["ids"].reshape(-1)
    n_rows = table.shape[0]
    onehot = np.zeros((ids.size, n_rows), dtype=g.dtype)
    onehot[np.arange(ids.size), ids] = 1
    return (onehot.T @ g.reshape(ids.size, -1),)


def _concat_bw(ctx, g, *args):
    *inputs, out = args
    splits = np.cumsum(ctx["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=ctx["axis"]))


def _sum_bw(ctx, g, x, out):
    axis = ctx["axis"]
    if axis is not None and not ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape),)


def _reshape_bw(ctx, g, x, out):
    return (g.reshape(x.shape),)


def _transpose_bw(ctx, g, x, out):
    return (g.transpose(np.argsort(ctx["axes"])),)


def _bce_bw(ctx, g, prob, out):
    y, w, p = ctx["y"], ctx["w"], ctx["p"]
    inside = (prob.data > BCE_EPS) & (prob.data < 1 - BCE_EPS)
    return (g * w * (-(y / p) + (1 - y) / (1 - p)) * inside,)


BACKWARD: dict[str, Callable] = {
    "add": _add_bw,
    "mul": _mul_bw,
    "scalar_mul": _scalar_mul_bw,
    "matmul": _matmul_bw,
    "tanh": _tanh_bw,
    "relu": _relu_bw,
    "sigmoid": _sigmoid_bw,
    "softmax_masked": _softmax_bw,
    "multihead_attention": _mha_bw,
    "layer_norm": _layer_norm_bw,
    "dropout": _dropout_bw,
    "embedding_lookup": _embedding_bw,
    "concat": _concat_bw,
    "sum": _sum_bw,
    "reshape": _reshape_bw,
    "transpose": _transpose_bw,
    "bce_loss": _bce_bw,
}


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = BACKWARD[node.op](node.ctx, np.asarray(g), *node.inputs, node.out)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if gi.dtype != t.data.dtype:
                gi = gi.astype(t.data.dtype)
            if key in produced:
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """One bias-corrected Adam update; rebinds each ``param.data`` to the new array."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape}")
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        p.data = (p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)
    return state


# --------------------------------------------------------------------------- gradient check


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int = 500,
    seed: int = 0,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the graph from the current ``param.data`` each call.
    Up to ``max_coords`` coordinates per tensor are checked, chosen with ``seed``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
