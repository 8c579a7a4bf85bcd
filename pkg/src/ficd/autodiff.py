"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Graph` records primitive applications in execution order; calling
:func:`backward` walks the record in reverse and writes ``.grad`` on every
leaf tensor that asked for one.  Only the primitives the denoiser and the
autoencoder use are provided.

>>> g = Graph()
>>> x = Tensor([0.5], requires_grad=True)
>>> y = g.sum(g.square(x))
>>> _ = backward(g, y)
>>> x.grad
array([1.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np

from . import _backend


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.require(data, np.float64, "C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    index: int
    op: str
    inputs: tuple
    output: Tensor
    attrs: dict
    saved: object

    @property
    def input_ids(self):
        return tuple(t.node.index if t.node is not None else None for t in self.inputs)


@dataclass
class Primitive:
    name: str
    forward: Callable
    backward: Callable
    check: Callable | None = None


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name, check=None):
    def register(cls):
        PRIMITIVES[name] = Primitive(name, cls.forward, cls.backward, check)
        return cls
    return register


@dataclass
class Graph:
    """Append-only tape of primitive applications.

    With ``record=False`` nothing is saved for the backward pass, which is
    what sampling and finite-difference probes want.
    """
    record: bool = True
    nodes: list = field(default_factory=list)

    def apply(self, op, *inputs, **attrs):
        try:
            prim = PRIMITIVES[op]
        except KeyError:
            raise ValueError(f"unknown primitive {op!r}") from None
        inputs = tuple(t if isinstance(t, Tensor) else Tensor(t) for t in inputs)
        if prim.check is not None:
            prim.check(op, [t.data for t in inputs], attrs)
        out, saved = prim.forward(*[t.data for t in inputs], **attrs)
        result = Tensor(out)
        if self.record and any(t.requires_grad for t in inputs):
            result.requires_grad = True
            node = Node(len(self.nodes), op, inputs, result, attrs, saved)
            result.node = node
            self.nodes.append(node)
        return result

    def __getattr__(self, name):
        if name in PRIMITIVES:
            return partial(self.apply, name)
        raise AttributeError(name)


def backward(graph, output, leaves=()):
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf.

    Leaves that appear in ``leaves`` or in the graph but are not reachable
    from ``output`` receive zero gradients.  Returns ``{leaf: grad}``.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {}
    if output.node is not None:
        grads[id(output)] = np.ones_like(output.data)
    found = {id(t): t for t in leaves}
    for node in graph.nodes:
        for t in node.inputs:
            if t.node is None and t.requires_grad:
                found.setdefault(id(t), t)
    if output.node is None and output.requires_grad:
        found.setdefault(id(output), output)
        grads[id(output)] = np.ones_like(output.data)

    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        prim = PRIMITIVES[node.op]
        in_grads = prim.backward(g, node.saved, *[t.data for t in node.inputs], **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for key, leaf in found.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
        result[leaf] = leaf.grad
    return result


# ----------------------------------------------------------------------------
# shape checks

def _shape_error(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


def _check_conv(op, arrays, attrs):
    x, w = arrays[0], arrays[1]
    if x.ndim != 5 or w.ndim != 5:
        raise _shape_error(op, x.shape, w.shape)
    in_axis = 1 if op == "conv3d" else 0
    if w.shape[in_axis] != x.shape[1] or len(set(w.shape[2:])) != 1:
        raise _shape_error(op, x.shape, w.shape)
    if len(arrays) > 2:
        out_ch = w.shape[0] if op == "conv3d" else w.shape[1]
        if arrays[2].shape != (out_ch,):
            raise _shape_error(op, w.shape, arrays[2].shape)
    for key in ("stride", "padding"):
        if key in attrs and attrs[key] is not None and attrs[key] < (1 if key == "stride" else 0):
            raise ValueError(f"{op}: {key} must be positive, got {attrs[key]}")
    if op == "conv3d":
        k = w.shape[2]
        s = attrs.get("stride", 1)
        p = attrs.get("padding")
        p = (k - 1) // 2 if p is None else p
        if any(d + 2 * p < k for d in x.shape[2:]):
            raise ShapeError(f"{op}: input {x.shape} too small for kernel {k} with padding {p}")
        if s < 1:
            raise ValueError(f"{op}: stride must be positive")


def _check_broadcast(op, arrays, attrs):
    try:
        np.broadcast_shapes(arrays[0].shape, arrays[1].shape)
    except ValueError:
        raise _shape_error(op, arrays[0].shape, arrays[1].shape) from None


def _check_linear(op, arrays, attrs):
    x, w = arrays[0], arrays[1]
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise _shape_error(op, x.shape, w.shape)
    if len(arrays) > 2 and arrays[2].shape != (w.shape[0],):
        raise _shape_error(op, w.shape, arrays[2].shape)


def _check_group_norm(op, arrays, attrs):
    x, gamma, beta = arrays
    groups = attrs.get("groups", 1)
    if groups < 1:
        raise ValueError(f"{op}: groups must be positive")
    if x.ndim < 2 or x.shape[1] % groups or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise _shape_error(op, x.shape, gamma.shape)


def _check_bmm(op, arrays, attrs):
    a, b = arrays
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise _shape_error(op, a.shape, b.shape)


def _check_concat(op, arrays, attrs):
    axis = attrs.get("axis", 1)
    ref = arrays[0].shape
    for a in arrays[1:]:
        if a.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(a.shape, ref)) if i != axis % len(ref)):
            raise _shape_error(op, ref, a.shape)


def _check_reshape(op, arrays, attrs):
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != arrays[0].size or any(s < 1 for s in shape):
        raise _shape_error(op, arrays[0].shape, shape)


# ----------------------------------------------------------------------------
# primitives

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _conv_geometry(x_shape, k, stride, padding):
    return tuple((d + 2 * padding - k) // stride + 1 for d in x_shape[2:])


@primitive("conv3d", check=_check_conv)
class Conv3d:
    @staticmethod
    def forward(x, w, b=None, stride=1, padding=None):
        k = w.shape[2]
        p = (k - 1) // 2 if padding is None else padding
        xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
        do, ho, wo = _conv_geometry(x.shape, k, stride, p)
        out = _backend.conv_forward(np.ascontiguousarray(xpad), w, stride, do, ho, wo)
        if b is not None:
            out += b[None, :, None, None, None]
        return out, (xpad, p)

    @staticmethod
    def backward(g, saved, x, w, b=None, stride=1, padding=None):
        xpad, p = saved
        k = w.shape[2]
        g = np.ascontiguousarray(g)
        dw = _backend.conv_backward_weight(g, xpad, k, stride)
        dxpad = _backend.conv_backward_input(g, w, stride, *xpad.shape[2:])
        dx = dxpad[:, :, p:p + x.shape[2], p:p + x.shape[3], p:p + x.shape[4]] if p else dxpad
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads


@primitive("conv_transpose3d", check=_check_conv)
class ConvTranspose3d:
    # weight layout (C_in, C_out, k, k, k); the forward pass is the input
    # gradient of a conv3d whose weight has this same layout
    @staticmethod
    def forward(x, w, b=None, stride=2):
        k = w.shape[2]
        out_dims = tuple((s - 1) * stride + k for s in x.shape[2:])
        out = _backend.conv_backward_input(np.ascontiguousarray(x), w, stride, *out_dims)
        if b is not None:
            out += b[None, :, None, None, None]
        return out, None

    @staticmethod
    def backward(g, saved, x, w, b=None, stride=2):
        k = w.shape[2]
        g = np.ascontiguousarray(g)
        dx = _backend.conv_forward(g, w, stride, *x.shape[2:])
        dw = _backend.conv_backward_weight(np.ascontiguousarray(x), g, k, stride)
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads


@primitive("linear", check=_check_linear)
class Linear:
    @staticmethod
    def forward(x, w, b=None):
        out = x @ w.T
        if b is not None:
            out = out + b
        return out, None

    @staticmethod
    def backward(g, saved, x, w, b=None):
        g2 = g.reshape(-1, w.shape[0])
        grads = [g @ w, g2.T @ x.reshape(-1, w.shape[1])]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads


@primitive("group_norm", check=_check_group_norm)
class GroupNorm:
    @staticmethod
    def forward(x, gamma, beta, groups=1, eps=1e-5):
        n, c = x.shape[:2]
        xg = x.reshape(n, groups, -1)
        mean = xg.mean(axis=2, keepdims=True)
        centered = xg - mean
        var = (centered * centered).mean(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (centered * inv).reshape(x.shape)
        bshape = (1, c) + (1,) * (x.ndim - 2)
        out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
        return out, (xhat, inv)

    @staticmethod
    def backward(g, saved, x, gamma, beta, groups=1, eps=1e-5):
        xhat, inv = saved
        n, c = x.shape[:2]
        bshape = (1, c) + (1,) * (x.ndim - 2)
        axes = (0,) + tuple(range(2, x.ndim))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = (g * gamma.reshape(bshape)).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return [dx.reshape(x.shape), dgamma, dbeta]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@primitive("silu")
class SiLU:
    @staticmethod
    def forward(x):
        s = _sigmoid(x)
        return x * s, s

    @staticmethod
    def backward(g, s, x):
        return [g * s * (1.0 + x * (1.0 - s))]


@primitive("tanh")
class Tanh:
    @staticmethod
    def forward(x):
        y = np.tanh(x)
        return y, y

    @staticmethod
    def backward(g, y, x):
        return [g * (1.0 - y * y)]


@primitive("add", check=_check_broadcast)
class Add:
    @staticmethod
    def forward(a, b):
        return a + b, None

    @staticmethod
    def backward(g, saved, a, b):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


@primitive("mul", check=_check_broadcast)
class Mul:
    @staticmethod
    def forward(a, b):
        return a * b, None

    @staticmethod
    def backward(g, saved, a, b):
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


@primitive("scale")
class Scale:
    @staticmethod
    def forward(x, factor=1.0):
        return x * factor, None

    @staticmethod
    def backward(g, saved, x, factor=1.0):
        return [g * factor]


@primitive("shift")
class Shift:
    @staticmethod
    def forward(x, value=0.0):
        return x + value, None

    @staticmethod
    def backward(g, saved, x, value=0.0):
        return [g]


@primitive("concat", check=_check_concat)
class Concat:
    @staticmethod
    def forward(*xs, axis=1):
        return np.concatenate(xs, axis=axis), None

    @staticmethod
    def backward(g, saved, *xs, axis=1):
        edges = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.split(g, edges, axis=axis)


@primitive("softmax")
class Softmax:
    @staticmethod
    def forward(x, axis=-1):
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)
        return y, y

    @staticmethod
    def backward(g, y, x, axis=-1):
        return [y * (g - (g * y).sum(axis=axis, keepdims=True))]


@primitive("bmm", check=_check_bmm)
class BatchMatMul:
    @staticmethod
    def forward(a, b):
        return np.matmul(a, b), None

    @staticmethod
    def backward(g, saved, a, b):
        return [np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)]


@primitive("sum")
class Sum:
    @staticmethod
    def forward(x, axis=None, keepdims=False):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims)), None

    @staticmethod
    def backward(g, saved, x, axis=None, keepdims=False):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, x.shape).copy()]


@primitive("mean")
class Mean:
    @staticmethod
    def forward(x, axis=None, keepdims=False):
        return np.asarray(x.mean(axis=axis, keepdims=keepdims)), None

    @staticmethod
    def backward(g, saved, x, axis=None, keepdims=False):
        count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g / count, x.shape).copy()]


@primitive("abs")
class Abs:
    @staticmethod
    def forward(x):
        return np.abs(x), None

    @staticmethod
    def backward(g, saved, x):
        return [g * np.sign(x)]


@primitive("square")
class Square:
    @staticmethod
    def forward(x):
        return x * x, None

    @staticmethod
    def backward(g, saved, x):
        return [2.0 * g * x]


@primitive("reshape", check=_check_reshape)
class Reshape:
    @staticmethod
    def forward(x, shape=()):
        return x.reshape(shape), None

    @staticmethod
    def backward(g, saved, x, shape=()):
        return [g.reshape(x.shape)]


@primitive("transpose")
class Transpose:
    @staticmethod
    def forward(x, axes=None):
        return np.ascontiguousarray(np.transpose(x, axes)), None

    @staticmethod
    def backward(g, saved, x, axes=None):
        inverse = None if axes is None else np.argsort(axes)
        return [np.transpose(g, inverse)]


# ----------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    passed: bool
    max_error: float
    worst: tuple | None
    checked: int
    message: str = ""


def gradient_check(f, params, h=1e-5, tol=1e-4, coords=None):
    """Compare ``backward`` against central differences.

    ``f(graph)`` must build a scalar from the leaf tensors in ``params``.
    The error of a coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` optionally maps a parameter index to the flat indices to
    probe; by default every coordinate of every parameter is checked.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = list(params)
    g = Graph()
    out = f(g)
    backward(g, out, leaves=params)
    analytic = [p.grad.copy() for p in params]

    def value():
        return f(Graph(record=False)).item()

    worst, max_err, checked = None, 0.0, 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = range(flat.size) if coords is None or pi not in coords else coords[pi]
        ana = analytic[pi].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            checked += 1
            where = (p.name or pi, int(i))
            if not (np.isfinite(num) and np.isfinite(ana[i])):
                return GradCheckReport(False, float("inf"), where, checked,
                                       f"non-finite gradient at {where}")
            err = abs(ana[i] - num) / max(1.0, abs(num))
            if err > max_err or worst is None:
                max_err, worst = err, where
    ok = max_err <= tol
    msg = "" if ok else f"max error {max_err:.3e} at {worst}"
    return GradCheckReport(ok, float(max_err), worst, checked, msg)
