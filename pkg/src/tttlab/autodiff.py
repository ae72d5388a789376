"""Reverse-mode differentiation over a recorded tape of primitives.

The tape is a flat list of nodes in construction (topological) order; one
backward pass visits each node exactly once, accumulating cotangents in a
fixed order so runs are bit-reproducible. Inner-training weight gradients
are themselves built on the tape as analytic expressions of these same
primitives, so a single reverse pass propagates outer-loop gradients through
unrolled inner updates; there are no nested tapes.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T


class ContractError(ValueError):
    """An autodiff op was called outside its contract (e.g. non-scalar root)."""


class OracleError(RuntimeError):
    """gradcheck was handed a non-deterministic function."""


class Node:
    """One tape entry: a value plus the rule for pushing cotangents to inputs."""

    __slots__ = ("tape", "idx", "value", "inputs", "vjp", "requires", "op")

    def __init__(self, tape, idx, value, inputs, vjp, requires, op):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.inputs = inputs
        self.vjp = vjp
        self.requires = requires
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape}, id={self.idx})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def leaf(self, value: np.ndarray, name: str | None = None, param: bool = False) -> Node:
        node = Node(self, len(self.nodes), np.asarray(value), (), None, param, "leaf")
        self.nodes.append(node)
        if param:
            if name is None:
                name = f"param{len(self.params)}"
            if name in self.params:
                raise ContractError(f"duplicate parameter name {name!r}")
            self.params[name] = node
        return node

    def push(self, value, inputs, vjp, op) -> Node:
        requires = any(n.requires for n in inputs)
        node = Node(self, len(self.nodes), value, tuple(inputs), vjp, requires, op)
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar root w.r.t. every parameter leaf (zeros if untouched)."""
        if root.tape is not self:
            raise ContractError("root belongs to a different tape")
        if root.value.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.value.shape}")
        grads: dict[int, np.ndarray] = {root.idx: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.idx + 1]):
            if node.vjp is None:
                continue
            g = grads.pop(node.idx, None)
            if g is None:
                continue
            cots = node.vjp(g)
            for inp, cot in zip(node.inputs, cots):
                if cot is None or not inp.requires:
                    continue
                if inp.idx in grads:
                    grads[inp.idx] = grads[inp.idx] + cot
                else:
                    grads[inp.idx] = cot
        out = {}
        for name, leaf in self.params.items():
            out[name] = grads.get(leaf.idx, np.zeros_like(leaf.value))
        return out

    def max_node_bytes(self) -> int:
        """Largest single buffer recorded on the tape (linear-memory assertions)."""
        return max(n.value.nbytes for n in self.nodes)


def backward(tape: Tape, root: Node) -> dict[str, np.ndarray]:
    return tape.backward(root)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent down to the shape of an operand that was broadcast up."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, like: Node) -> Node:
    if isinstance(a, Node):
        return a
    return like.tape.leaf(np.asarray(a, dtype=like.value.dtype))


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Node, b) -> Node:
    b = _coerce(b, a)
    out = T.add(a.value, b.value)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return a.tape.push(out, (a, b), vjp, "add")


def sub(a: Node, b) -> Node:
    b = _coerce(b, a)
    out = T.sub(a.value, b.value)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return a.tape.push(out, (a, b), vjp, "sub")


def mul(a: Node, b) -> Node:
    b = _coerce(b, a)
    av, bv = a.value, b.value
    out = T.mul(av, bv)

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return a.tape.push(out, (a, b), vjp, "mul")


def scale(a: Node, c: float) -> Node:
    out = T.scale(a.value, c)

    def vjp(g):
        return (g * c,)

    return a.tape.push(out, (a,), vjp, "scale")


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    out = T.matmul(av, bv)

    def vjp(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        db = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return da, db

    return a.tape.push(out, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# layout

def transpose(a: Node) -> Node:
    out = T.transpose(a.value)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return a.tape.push(out, (a,), vjp, "transpose")


def reshape(a: Node, shape) -> Node:
    src = a.value.shape
    out = T.reshape(a.value, shape)

    def vjp(g):
        return (g.reshape(src),)

    return a.tape.push(out, (a,), vjp, "reshape")


def rows(a: Node, lo: int, hi: int) -> Node:
    """Slice token rows [lo, hi) along axis -2."""
    out = np.ascontiguousarray(a.value[..., lo:hi, :])

    def vjp(g):
        z = np.zeros_like(a.value)
        z[..., lo:hi, :] = g
        return (z,)

    return a.tape.push(out, (a,), vjp, "rows")


def pad_rows(a: Node, n: int, lo: int, hi: int) -> Node:
    """Embed token rows back at [lo, hi) of an n-token zero field (adjoint of rows)."""
    shape = a.value.shape[:-2] + (n, a.value.shape[-1])
    out = np.zeros(shape, dtype=a.value.dtype)
    out[..., lo:hi, :] = a.value

    def vjp(g):
        return (np.ascontiguousarray(g[..., lo:hi, :]),)

    return a.tape.push(out, (a,), vjp, "pad_rows")


def concat_last(parts: list[Node]) -> Node:
    vals = [p.value for p in parts]
    out = np.concatenate(vals, axis=-1)
    widths = [v.shape[-1] for v in vals]
    offsets = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(s) for s in np.split(g, offsets, axis=-1))

    return parts[0].tape.push(out, tuple(parts), vjp, "concat_last")


# ---------------------------------------------------------------------------
# reductions

def sum_all(a: Node) -> Node:
    out = np.asarray(a.value.sum())
    T._tick(a.value.size)

    def vjp(g):
        return (np.full(a.value.shape, g, dtype=a.value.dtype),)

    return a.tape.push(out, (a,), vjp, "sum_all")


def sum_last(a: Node) -> Node:
    """Sum over the last axis."""
    out = a.value.sum(axis=-1)
    T._tick(a.value.size)

    def vjp(g):
        return (np.broadcast_to(g[..., None], a.value.shape).astype(a.value.dtype),)

    return a.tape.push(out, (a,), vjp, "sum_last")


def sum_last2(a: Node) -> Node:
    """Sum over the last two axes (per-sequence reduction of [.., B, d])."""
    out = a.value.sum(axis=(-2, -1))
    T._tick(a.value.size)

    def vjp(g):
        return (np.broadcast_to(g[..., None, None], a.value.shape).astype(a.value.dtype),)

    return a.tape.push(out, (a,), vjp, "sum_last2")


def matscale(m: Node, s: Node) -> Node:
    """Scale each [B, d] matrix of m by the matching scalar of s (shape m.shape[:-2])."""
    mv, sv = m.value, s.value
    if sv.shape != mv.shape[:-2]:
        raise ContractError(f"matscale rate shape {sv.shape} != {mv.shape[:-2]}")
    out = mv * sv[..., None, None]
    T._tick(mv.size)

    def vjp(g):
        return g * sv[..., None, None], (g * mv).sum(axis=(-2, -1))

    return m.tape.push(out, (m, s), vjp, "matscale")


def mean_tokens(a: Node) -> Node:
    """Mean over the token axis (-2): global average pooling."""
    n = a.value.shape[-2]
    out = a.value.mean(axis=-2)
    T._tick(a.value.size)

    def vjp(g):
        return (np.broadcast_to(g[..., None, :] / n, a.value.shape).astype(a.value.dtype),)

    return a.tape.push(out, (a,), vjp, "mean_tokens")


# ---------------------------------------------------------------------------
# elementwise

def silu(a: Node) -> Node:
    x = a.value
    s = T.sigmoid(x)
    out = x * s
    T._tick(x.size)

    def vjp(g):
        # SiLU'(x) = s + x s (1 - s), from the saved sigmoid
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return a.tape.push(out, (a,), vjp, "silu")


def silu_prime(a: Node) -> Node:
    """SiLU'(x) as a forward value; differentiable once more (SiLU'')."""
    x = a.value
    s = T.sigmoid(x)
    out = s * (1.0 + x * (1.0 - s))
    T._tick(3 * x.size)

    def vjp(g):
        # SiLU''(x) = s(1-s) (2 + x(1-2s))
        return (g * (s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))),)

    return a.tape.push(out, (a,), vjp, "silu_prime")


def sigmoid(a: Node) -> Node:
    s = T.sigmoid(a.value)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return a.tape.push(s, (a,), vjp, "sigmoid")


def sign(a: Node) -> Node:
    """Token-wise sign; blocks gradient flow (derivative zero a.e.)."""
    out = T.sign(a.value)

    def vjp(g):
        return (None,)

    return a.tape.push(out, (a,), vjp, "sign")


def abs_(a: Node) -> Node:
    out = T.abs_(a.value)

    def vjp(g):
        return (g * np.sign(a.value),)

    return a.tape.push(out, (a,), vjp, "abs")


def sqrt_(a: Node) -> Node:
    out = T.sqrt_(a.value)

    def vjp(g):
        return (g * (0.5 / out),)

    return a.tape.push(out, (a,), vjp, "sqrt")


def reciprocal(a: Node) -> Node:
    out = 1.0 / a.value

    def vjp(g):
        return (-g * out * out,)

    return a.tape.push(out, (a,), vjp, "reciprocal")


def clip_min(a: Node, c: float) -> Node:
    out = np.maximum(a.value, c)

    def vjp(g):
        return (g * (a.value > c),)

    return a.tape.push(out, (a,), vjp, "clip_min")


def huber(a: Node) -> Node:
    """Smooth-L1 kernel l(x) = x^2/2 inside |x|<1, |x| - 1/2 outside."""
    x = a.value
    inside = np.abs(x) < 1.0
    out = np.where(inside, 0.5 * x * x, np.abs(x) - 0.5)
    T._tick(3 * x.size)

    def vjp(g):
        return (g * np.where(inside, x, np.sign(x)),)

    return a.tape.push(out, (a,), vjp, "huber")


def huber_prime(a: Node) -> Node:
    """l'(x): identity inside the quadratic zone, sign outside."""
    x = a.value
    inside = np.abs(x) < 1.0
    out = np.where(inside, x, np.sign(x))
    T._tick(2 * x.size)

    def vjp(g):
        return (g * inside,)

    return a.tape.push(out, (a,), vjp, "huber_prime")


def colscale(m: Node, s: Node) -> Node:
    """Scale each token row of m by the matching entry of rate vector s."""
    mv, sv = m.value, s.value
    if sv.shape != mv.shape[:-1]:
        raise ContractError(f"colscale rate shape {sv.shape} != row shape {mv.shape[:-1]}")
    out = mv * sv[..., None]
    T._tick(mv.size)

    def vjp(g):
        return g * sv[..., None], (g * mv).sum(axis=-1)

    return m.tape.push(out, (m, s), vjp, "colscale")


def add_rowvec(m: Node, b: Node) -> Node:
    """Add a bias vector to every row (last axis)."""
    out = m.value + b.value
    T._tick(m.value.size)

    def vjp(g):
        return g, _unbroadcast(g, b.value.shape)

    return m.tape.push(out, (m, b), vjp, "add_rowvec")


# ---------------------------------------------------------------------------
# composite primitives with dedicated backward rules

def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gamma.value + beta.value
    T._tick(8 * xv.size)

    def vjp(g):
        dxhat = g * gamma.value
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = _unbroadcast(g * xhat, gamma.value.shape)
        dbeta = _unbroadcast(g, beta.value.shape)
        return dx, dgamma, dbeta

    return x.tape.push(out, (x, gamma, beta), vjp, "layer_norm")


def cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    lv = logits.value
    shifted = lv - lv.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    n = lv.shape[0]
    nll = logz - shifted[np.arange(n), labels]
    out = np.asarray(nll.mean())
    T._tick(5 * lv.size)

    def vjp(g):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return logits.tape.push(out, (logits,), vjp, "cross_entropy")


def dwconv3x3(x: Node, k: Node) -> Node:
    """Depthwise 3x3 conv on [b,H,W,C]; kernel shared [3,3,C] or per-sample [b,3,3,C]."""
    xv, kv = x.value, k.value
    out = T.dwconv3x3(xv, kv)

    def vjp(g):
        dx = T.dwconv3x3(g, T.flip_dw(kv))
        dk = T.dwconv3x3_wgrad(xv, g, per_sample=(kv.ndim == 4))
        return dx, dk

    return x.tape.push(out, (x, k), vjp, "dwconv3x3")


def conv3x3(x: Node, k: Node) -> Node:
    """Full 3x3 conv on [b,H,W,C]; kernel [3,3,Ci,Co] or per-sample [b,3,3,Ci,Co]."""
    xv, kv = x.value, k.value
    out = T.conv3x3_full(xv, kv)

    def vjp(g):
        dx = T.conv3x3_full(g, T.flip_full(kv))
        dk = T.conv3x3_full_wgrad(xv, g, per_sample=(kv.ndim == 5))
        return dx, dk

    return x.tape.push(out, (x, k), vjp, "conv3x3")


def dwconv3x3_wgrad(x: Node, g_in: Node) -> Node:
    """Per-sample kernel gradient of a depthwise conv, as a differentiable forward op."""
    xv, gv = x.value, g_in.value
    out = T.dwconv3x3_wgrad(xv, gv, per_sample=True)

    def vjp(ct):
        dx = T.dwconv3x3(gv, T.flip_dw(ct))
        dg = T.dwconv3x3(xv, ct)
        return dx, dg

    return x.tape.push(out, (x, g_in), vjp, "dwconv3x3_wgrad")


def conv3x3_wgrad(x: Node, g_in: Node) -> Node:
    """Per-sample kernel gradient of a full conv, as a differentiable forward op."""
    xv, gv = x.value, g_in.value
    out = T.conv3x3_full_wgrad(xv, gv, per_sample=True)

    def vjp(ct):
        dx = T.conv3x3_full(gv, T.flip_full(ct))
        dg = T.conv3x3_full(xv, ct)
        return dx, dg

    return x.tape.push(out, (x, g_in), vjp, "conv3x3_wgrad")


# ---------------------------------------------------------------------------
# numeric validation

def gradcheck(f: Callable[[dict], Node], params: dict[str, np.ndarray],
              eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` rebuilds its computation from a fresh parameter dict and returns the
    scalar root node; params must be float64 for the stated tolerances to be
    meaningful. Error metric per entry: |analytic - numeric| / max(1, |numeric|).
    """
    root = f(params)
    root2 = f(params)
    if not np.allclose(root.value, root2.value, rtol=0, atol=0):
        raise OracleError("gradcheck function is not deterministic")
    analytic = root.tape.backward(root)

    worst = 0.0
    for name, base in params.items():
        an = analytic[name]
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            pert = {k: (v if k != name else v.copy()) for k, v in params.items()}
            pflat = pert[name].reshape(-1)
            pflat[i] = orig + eps
            fp = float(f(pert).value)
            pflat[i] = orig - eps
            fm = float(f(pert).value)
            numeric = (fp - fm) / (2 * eps)
            err = abs(float(an.reshape(-1)[i]) - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
