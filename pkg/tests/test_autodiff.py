import zlib

import numpy as np
import pytest

from ficd import _backend
from ficd.autodiff import (PRIMITIVES, Graph, Primitive, ShapeError, Tensor, backward,
                           gradient_check)
from ficd.rng import philox

CASES = 100


def naive_conv3d(x, w, b, stride, pad):
    # direct nested-loop correlation, independent of the im2col/BLAS path
    n, ci, d, h, wd = x.shape
    co, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    do = (d + 2 * pad - k) // stride + 1
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, do, ho, wo))
    for bi in range(n):
        for o in range(co):
            for i in range(do):
                for j in range(ho):
                    for l in range(wo):
                        acc = b[o] if b is not None else 0.0
                        for c in range(ci):
                            for a in range(k):
                                for bb in range(k):
                                    for cc in range(k):
                                        acc += w[o, c, a, bb, cc] * xp[bi, c, i * stride + a,
                                                                       j * stride + bb, l * stride + cc]
                        out[bi, o, i, j, l] = acc
    return out


def naive_conv_transpose3d(x, w, b, stride):
    n, ci, d, h, wd = x.shape
    _, co, k, _, _ = w.shape
    out = np.zeros((n, co, (d - 1) * stride + k, (h - 1) * stride + k, (wd - 1) * stride + k))
    for bi in range(n):
        for c in range(ci):
            for i in range(d):
                for j in range(h):
                    for l in range(wd):
                        out[bi, :, i * stride:i * stride + k, j * stride:j * stride + k,
                            l * stride:l * stride + k] += x[bi, c, i, j, l] * w[c]
    if b is not None:
        out += b[None, :, None, None, None]
    return out


# ----------------------------------------------------------------------------
# forward examples

def test_identity_kernel_conv_returns_input():
    x = Tensor(np.ones((1, 1, 3, 3, 3)))
    w = Tensor(np.ones((1, 1, 1, 1, 1)))
    out = Graph().conv3d(x, w, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_add_zero_is_identity(rng):
    x = rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(Graph().add(Tensor(x), Tensor(np.zeros_like(x))).data, x)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv3d_matches_nested_loops(stride, pad):
    rng = philox(7)
    x = rng.standard_normal((1, 1, 4, 4, 4))
    w = rng.standard_normal((1, 1, 3, 3, 3))
    got = Graph().conv3d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, naive_conv3d(x, w, None, stride, pad), rtol=0, atol=1e-12)


def test_multichannel_conv3d_matches_nested_loops():
    rng = philox(8)
    x = rng.standard_normal((2, 3, 5, 4, 6))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    b = rng.standard_normal(4)
    got = Graph().conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    np.testing.assert_allclose(got, naive_conv3d(x, w, b, 2, 1), rtol=0, atol=1e-12)


def test_conv_transpose_matches_scatter_oracle():
    rng = philox(9)
    x = rng.standard_normal((2, 3, 2, 3, 2))
    w = rng.standard_normal((3, 2, 2, 2, 2))
    b = rng.standard_normal(2)
    got = Graph().conv_transpose3d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    np.testing.assert_allclose(got, naive_conv_transpose3d(x, w, b, 2), rtol=0, atol=1e-12)


@pytest.mark.skipif("cython" not in _backend.available(), reason="extension not built")
def test_backends_agree():
    rng = philox(10)
    x = rng.standard_normal((2, 3, 6, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    g = rng.standard_normal((2, 4, 2, 2, 2))
    fast, slow = _backend.load("cython"), _backend.load("python")
    for name, args in (("conv_forward", (x, w, 2, 2, 2, 2)),
                       ("conv_backward_input", (g, w, 2, 6, 6, 6)),
                       ("conv_backward_weight", (g, x, 3, 2))):
        np.testing.assert_allclose(getattr(fast, name)(*args), getattr(slow, name)(*args),
                                   rtol=1e-12, atol=1e-12)


@pytest.mark.skipif("cython" not in _backend.available(), reason="extension not built")
def test_kernels_reject_out_of_bounds_geometry():
    fast = _backend.load("cython")
    g = np.zeros((1, 1, 3, 3, 3))
    w = np.zeros((1, 1, 3, 3, 3))
    with pytest.raises(ValueError):
        fast.conv_backward_input(g, w, 2, 6, 6, 6)
    with pytest.raises(ValueError):
        fast.conv_forward(np.zeros((1, 1, 4, 4, 4)), w, 1, 3, 3, 3)


def test_forward_is_bit_deterministic(rng):
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    a = Graph().conv3d(Tensor(x), Tensor(w)).data
    b = Graph().conv3d(Tensor(x), Tensor(w)).data
    assert a.tobytes() == b.tobytes()


# ----------------------------------------------------------------------------
# shape diagnostics

@pytest.mark.parametrize("op,args", [
    ("add", (np.zeros((2, 3)), np.zeros((4, 3)))),
    ("mul", (np.zeros((2, 3)), np.zeros((3, 2)))),
    ("conv3d", (np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))),
    ("linear", (np.zeros((2, 5)), np.zeros((3, 4)))),
    ("bmm", (np.zeros((2, 3, 4)), np.zeros((2, 5, 3)))),
    ("concat", (np.zeros((1, 2, 3)), np.zeros((1, 2, 4)))),
])
def test_shape_mismatch_names_primitive_and_shapes(op, args):
    with pytest.raises(ShapeError) as info:
        Graph().apply(op, *[Tensor(a) for a in args])
    msg = str(info.value)
    assert op in msg
    assert str(args[0].shape) in msg or str(args[1].shape) in msg


def test_group_norm_rejects_indivisible_groups():
    with pytest.raises(ShapeError, match="group_norm"):
        Graph().group_norm(Tensor(np.zeros((1, 6, 2))), Tensor(np.ones(6)), Tensor(np.zeros(6)),
                           groups=4)


# ----------------------------------------------------------------------------
# backward examples

def test_sum_gradient_is_all_ones(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    g = Graph()
    backward(g, g.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_sum_of_squares_gradient():
    x = Tensor([0.5], requires_grad=True)
    g = Graph()
    backward(g, g.sum(g.square(x)))
    np.testing.assert_array_equal(x.grad, [1.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    g = Graph()
    with pytest.raises(ShapeError):
        backward(g, g.square(x))


def test_unreachable_leaf_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    g = Graph()
    g.sum(y)
    backward(g, g.sum(x), leaves=[x, y])
    np.testing.assert_array_equal(y.grad, np.zeros(2))


def test_nodes_are_topologically_ordered(rng):
    x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    g = Graph()
    h = g.silu(g.linear(x, w))
    g.mean(g.square(g.add(h, g.scale(h, factor=2.0))))
    for node in g.nodes:
        assert all(i is None or i < node.index for i in node.input_ids)


def test_backward_visits_each_node_once(rng, monkeypatch):
    calls = []
    for name in ("linear", "silu", "add", "scale", "square", "mean"):
        prim = PRIMITIVES[name]

        def counted(*a, _bw=prim.backward, _n=name, **k):
            calls.append(_n)
            return _bw(*a, **k)

        monkeypatch.setitem(PRIMITIVES, name, Primitive(name, prim.forward, counted, prim.check))
    x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    g = Graph()
    h = g.silu(g.linear(x, w))
    out = g.mean(g.square(g.add(h, g.scale(h, factor=2.0))))
    backward(g, out)
    assert len(calls) == len(g.nodes) == 6


def test_backward_is_linear(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    a, b = 1.7, -0.3

    def grad_of(build):
        g = Graph()
        backward(g, build(g))
        return x.grad.copy()

    f = lambda g: g.sum(g.silu(x))  # noqa: E731
    h = lambda g: g.mean(g.square(x))  # noqa: E731
    combined = grad_of(lambda g: g.add(g.scale(f(g), factor=a), g.scale(h(g), factor=b)))
    np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(h), rtol=0, atol=1e-12)


def test_no_tape_without_record():
    x = Tensor(np.ones(3), requires_grad=True)
    g = Graph(record=False)
    g.sum(g.square(x))
    assert g.nodes == []


# ----------------------------------------------------------------------------
# gradient_check examples

def test_gradient_check_identity_sum_is_exact():
    # dyadic point and step keep every sum exact
    x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4) / 4, requires_grad=True)
    report = gradient_check(lambda g: g.sum(x), [x], h=2.0 ** -10)
    assert report.passed
    assert report.max_error == 0.0
    assert report.checked == 12


def test_gradient_check_group_norm_sum_of_squares():
    rng = philox(3)
    x = Tensor(rng.standard_normal((1, 8, 4, 4, 4)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 8), requires_grad=True)
    beta = Tensor(rng.standard_normal(8), requires_grad=True)
    report = gradient_check(lambda g: g.sum(g.square(g.group_norm(x, gamma, beta, groups=4))),
                            [x, gamma, beta], tol=1e-4)
    assert report.passed, report.message


def test_gradient_check_flags_wrong_backward(monkeypatch):
    monkeypatch.setitem(PRIMITIVES, "bad_square", Primitive(
        "bad_square", lambda x: (x * x, None), lambda g, s, x: [g * x]))
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    report = gradient_check(lambda g: g.sum(g.apply("bad_square", x)), [x])
    assert not report.passed
    assert report.worst is not None


def test_gradient_check_reports_nonfinite_coordinate(monkeypatch):
    monkeypatch.setitem(PRIMITIVES, "nan_grad", Primitive(
        "nan_grad", lambda x: (x.copy(), None), lambda g, s, x: [g * np.nan]))
    x = Tensor(np.ones(2), requires_grad=True, name="x")
    report = gradient_check(lambda g: g.sum(g.apply("nan_grad", x)), [x])
    assert not report.passed
    assert report.worst == ("x", 0)


def test_gradient_check_rejects_bad_step():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        gradient_check(lambda g: g.sum(x), [x], h=0.0)


# ----------------------------------------------------------------------------
# per-primitive finite-difference properties

def _leaf(rng, shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        # keep away from the kink of |x|
        data = np.sign(data) * (np.abs(data) + low)
    return Tensor(data, requires_grad=True)


def _project(g, out, rng):
    # random linear functional so every output coordinate feeds a distinct weight
    return g.sum(g.mul(out, Tensor(rng.standard_normal(out.shape))))


def case_conv3d(rng):
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    dims = tuple(int(d) for d in rng.integers(k, k + 3, size=3))
    x = _leaf(rng, (int(rng.integers(1, 3)), int(rng.integers(1, 3))) + dims)
    w = _leaf(rng, (int(rng.integers(1, 3)), x.shape[1], k, k, k))
    b = _leaf(rng, (w.shape[0],))
    pad = int(rng.integers(0, k))
    return lambda g: g.conv3d(x, w, b, stride=stride, padding=pad), [x, w, b]


def case_conv_transpose3d(rng):
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    x = _leaf(rng, (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
              + tuple(int(d) for d in rng.integers(1, 4, size=3)))
    w = _leaf(rng, (x.shape[1], int(rng.integers(1, 3)), k, k, k))
    b = _leaf(rng, (w.shape[1],))
    return lambda g: g.conv_transpose3d(x, w, b, stride=stride), [x, w, b]


def case_linear(rng):
    cin, cout = (int(v) for v in rng.integers(1, 6, size=2))
    lead = tuple(int(v) for v in rng.integers(1, 4, size=int(rng.integers(1, 3))))
    x = _leaf(rng, lead + (cin,))
    w = _leaf(rng, (cout, cin))
    b = _leaf(rng, (cout,))
    return lambda g: g.linear(x, w, b), [x, w, b]


def case_group_norm(rng):
    groups = int(rng.integers(1, 4))
    c = groups * int(rng.integers(1, 3))
    x = _leaf(rng, (int(rng.integers(1, 3)), c) + tuple(int(v) for v in rng.integers(2, 4, size=3)))
    gamma = _leaf(rng, (c,))
    beta = _leaf(rng, (c,))
    return lambda g: g.group_norm(x, gamma, beta, groups=groups), [x, gamma, beta]


def _shape(rng, ndim_max=4):
    return tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, ndim_max + 1))))


def case_silu(rng):
    x = _leaf(rng, _shape(rng))
    return lambda g: g.silu(x), [x]


def case_tanh(rng):
    x = _leaf(rng, _shape(rng))
    return lambda g: g.tanh(x), [x]


def _broadcast_pair(rng):
    shape = _shape(rng)
    other = tuple(1 if rng.random() < 0.4 else s for s in shape)
    if rng.random() < 0.3:
        other = other[1:] or (1,)
    return _leaf(rng, shape), _leaf(rng, other)


def case_add(rng):
    a, b = _broadcast_pair(rng)
    return lambda g: g.add(a, b), [a, b]


def case_mul(rng):
    a, b = _broadcast_pair(rng)
    return lambda g: g.mul(a, b), [a, b]


def case_scale(rng):
    x = _leaf(rng, _shape(rng))
    f = float(rng.uniform(-3, 3))
    return lambda g: g.scale(x, factor=f), [x]


def case_shift(rng):
    x = _leaf(rng, _shape(rng))
    v = float(rng.uniform(-3, 3))
    return lambda g: g.shift(x, value=v), [x]


def case_concat(rng):
    base = list(_shape(rng))
    axis = int(rng.integers(0, len(base)))
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        s = list(base)
        s[axis] = int(rng.integers(1, 4))
        parts.append(_leaf(rng, tuple(s)))
    return lambda g: g.concat(*parts, axis=axis), parts


def case_softmax(rng):
    x = _leaf(rng, _shape(rng))
    axis = int(rng.integers(-x.data.ndim, x.data.ndim))
    return lambda g: g.softmax(x, axis=axis), [x]


def case_bmm(rng):
    batch = tuple(int(v) for v in rng.integers(1, 4, size=int(rng.integers(1, 3))))
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    a = _leaf(rng, batch + (m, k))
    b = _leaf(rng, batch + (k, n))
    return lambda g: g.bmm(a, b), [a, b]


def case_sum(rng):
    x = _leaf(rng, _shape(rng))
    axis = None if rng.random() < 0.3 else int(rng.integers(0, x.data.ndim))
    keep = bool(rng.random() < 0.5)
    return lambda g: g.sum(x, axis=axis, keepdims=keep), [x]


def case_mean(rng):
    x = _leaf(rng, _shape(rng))
    axis = None if rng.random() < 0.3 else int(rng.integers(0, x.data.ndim))
    keep = bool(rng.random() < 0.5)
    return lambda g: g.mean(x, axis=axis, keepdims=keep), [x]


def case_abs(rng):
    x = _leaf(rng, _shape(rng), low=1e-2)
    return lambda g: g.abs(x), [x]


def case_square(rng):
    x = _leaf(rng, _shape(rng))
    return lambda g: g.square(x), [x]


def case_reshape(rng):
    x = _leaf(rng, _shape(rng))
    shape = (x.size,) if rng.random() < 0.5 else (1, x.size, 1)
    return lambda g: g.reshape(x, shape=shape), [x]


def case_transpose(rng):
    x = _leaf(rng, _shape(rng))
    axes = tuple(int(a) for a in rng.permutation(x.data.ndim))
    return lambda g: g.transpose(x, axes=axes), [x]


CASE_BUILDERS = {name[len("case_"):]: fn for name, fn in globals().items() if name.startswith("case_")}


def test_every_primitive_has_a_gradient_property():
    assert set(CASE_BUILDERS) == set(PRIMITIVES)


@pytest.mark.parametrize("name", sorted(CASE_BUILDERS))
def test_primitive_gradients_match_finite_differences(name):
    failures = []
    for seed in range(CASES):
        rng = philox(seed, zlib.crc32(name.encode()))
        build, leaves = CASE_BUILDERS[name](rng)
        proj_seed = int(rng.integers(1 << 30))
        report = gradient_check(lambda g: _project(g, build(g), philox(proj_seed)), leaves, tol=1e-4)
        if not report.passed:
            failures.append((seed, report.message))
    assert not failures, failures[:3]
