"""Dense reverse-mode automatic differentiation over float64 matrices.

Every value is a 2-D ``numpy.float64`` array wrapped in a :class:`Tensor`.
Operations record their inputs and a closure mapping the output gradient to
input gradients; :func:`backward` walks the recorded graph in reverse
topological order.  Leaf tensors created with ``requires_grad=True``
accumulate into ``.grad`` and are never zeroed implicitly.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from functools import lru_cache

import numpy as np


def _sigmoid(x):
    # tanh form: stable for any sign and cheaper than a direct exp
    return 0.5 + 0.5 * np.tanh(0.5 * x)


@lru_cache(maxsize=None)
def _gate_constants(hidden):
    """Row vectors for evaluating all four gates with one tanh.

    Sigmoid gates use s(z) = 1/2 + tanh(z/2)/2, so with t = tanh(pre * z) the
    activation is ``mul * t + add`` and its derivative is ``dmul * (1 - t^2)``.
    """
    def row(sig, cand):
        v = np.full((1, 4 * hidden), sig)
        v[:, 2 * hidden:3 * hidden] = cand
        v.flags.writeable = False
        return v

    return row(0.5, 1.0), row(0.5, 1.0), row(0.5, 0.0), row(0.25, 1.0)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""


class EmptyGraphError(ValueError):
    """An operation that needs at least one row received none."""


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, data, requires_grad=False, *, parents=(), backward_fn=None, op="leaf"):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {data.shape}")
        self.data = data
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.grad = np.zeros_like(data) if requires_grad and backward_fn is None else None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    @property
    def T(self):
        return transpose(self)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    # a NaN or infinity anywhere makes the sum non-finite
    if not math.isfinite(data.sum()):
        raise NonFiniteError(f"non-finite output from {op}")
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), backward_fn, "matmul")


def transpose(a):
    a = as_tensor(a)
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def concat_cols(tensors):
    tensors = [as_tensor(t) for t in tensors]
    rows = {t.data.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward_fn, "concat")


def slice_cols(a, start, stop):
    a = as_tensor(a)
    n_cols = a.data.shape[1]
    if not 0 <= start < stop <= n_cols:
        raise ShapeError(f"slice_cols: [{start}:{stop}] outside {n_cols} columns")

    def backward_fn(g):
        out = np.zeros_like(a.data)
        out[:, start:stop] = g
        return (out,)

    return _result(a.data[:, start:stop].copy(), (a,), backward_fn, "slice")


def sum_all(a):
    a = as_tensor(a)
    shape = a.data.shape
    return _result(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def scale(a, c):
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def add_row(a, row):
    """Add a 1 x n row vector to every row of an m x n matrix (bias add)."""
    a, row = as_tensor(a), as_tensor(row)
    if row.data.shape != (1, a.data.shape[1]):
        raise ShapeError(f"add_row: {row.data.shape} does not broadcast over {a.data.shape}")
    return _result(a.data + row.data, (a, row), lambda g: (g, g.sum(axis=0, keepdims=True)), "add_row")


def scale_rows(col, a):
    """Multiply row i of ``a`` by ``col[i, 0]``."""
    col, a = as_tensor(col), as_tensor(a)
    if col.data.shape != (a.data.shape[0], 1):
        raise ShapeError(f"scale_rows: {col.data.shape} does not match rows of {a.data.shape}")
    cd, ad = col.data, a.data

    def backward_fn(g):
        return ((g * ad).sum(axis=1, keepdims=True), g * cd)

    return _result(cd * ad, (col, a), backward_fn, "scale_rows")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(kind, *operands):
    if kind in _BINARY:
        if len(operands) != 2:
            raise TypeError(f"{kind} takes two operands")
        return _BINARY[kind](*operands)
    if kind in _UNARY:
        if len(operands) != 1:
            raise TypeError(f"{kind} takes one operand")
        return _UNARY[kind](*operands)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and normalisers


def softmax_rows(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (a,), backward_fn, "softmax")


def max_over_rows(a, block=None):
    """Column-wise max over rows, or over each run of ``block`` consecutive rows.

    Returns 1 x d, or (m / block) x d when ``block`` is given.
    """
    a = as_tensor(a)
    m, d = a.data.shape
    if m == 0:
        raise EmptyGraphError("max over zero rows")
    block = m if block is None else int(block)
    if block < 1 or m % block:
        raise ShapeError(f"max_over_rows: {m} rows do not split into blocks of {block}")
    groups = a.data.reshape(m // block, block, d)
    # np.argmax returns the first maximal index, which is the tie rule
    idx = np.argmax(groups, axis=1)
    rows = idx + (np.arange(m // block) * block)[:, None]
    cols = np.broadcast_to(np.arange(d), rows.shape)

    def backward_fn(g):
        out = np.zeros_like(a.data)
        out[rows, cols] = g
        return (out,)

    return _result(a.data[rows, cols], (a,), backward_fn, "max_rows")


def dropout(a, rate, training, rng=None):
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits, label):
    """Negative log-softmax probability of ``label`` for a 1 x C logit row."""
    logits = as_tensor(logits)
    n_classes = logits.data.shape[1]
    if logits.data.shape[0] != 1:
        raise ShapeError("cross_entropy expects a single logit row")
    if not (isinstance(label, (int, np.integer)) and 0 <= label < n_classes):
        raise ValueError(f"label must be an integer in [0, {n_classes}), got {label!r}")
    z = logits.data[0]
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    probs = np.exp(z - lse)

    def backward_fn(g):
        d = probs.copy()
        d[label] -= 1.0
        return (g[0, 0] * d[None, :],)

    return _result(np.array([[lse - z[label]]]), (logits,), backward_fn, "cross_entropy")


def cross_entropy_rows(logits, labels):
    """Per-row negative log-softmax probabilities (B x 1) for a B x C logit matrix."""
    logits = as_tensor(logits)
    b, n_classes = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (b,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross_entropy_rows needs one integer label per row")
    if ((labels < 0) | (labels >= n_classes)).any():
        raise ValueError(f"labels must lie in [0, {n_classes})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    probs = np.exp(z - lse)
    rows = np.arange(b)

    def backward_fn(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (g * d,)

    return _result(lse - z[rows, labels][:, None], (logits,), backward_fn, "cross_entropy_rows")


# ---------------------------------------------------------------------------
# fused model blocks


def lstm_cell(x, hc, w_x, w_h, b):
    """One LSTM step over a batch of rows.

    ``hc`` packs the previous hidden and cell state side by side (n x 2H);
    the result uses the same packing.  Gate blocks in ``w_x``, ``w_h`` and
    ``b`` are ordered input, forget, candidate, output.
    """
    x, hc, w_x, w_h, b = (as_tensor(t) for t in (x, hc, w_x, w_h, b))
    hidden = w_h.data.shape[0]
    if w_x.data.shape != (x.data.shape[1], 4 * hidden) or w_h.data.shape != (hidden, 4 * hidden):
        raise ShapeError("lstm_cell: weight shapes inconsistent with input/hidden widths")
    if b.data.shape != (1, 4 * hidden) or hc.data.shape != (x.data.shape[0], 2 * hidden):
        raise ShapeError("lstm_cell: bias or state shape inconsistent")
    xd, hd, cd = x.data, hc.data[:, :hidden], hc.data[:, hidden:]
    pre, mul, add, dmul = _gate_constants(hidden)
    z = xd @ w_x.data
    z += hd @ w_h.data
    z += b.data
    t = np.tanh(z * pre)
    act = t * mul + add
    i, f, gc, o = (act[:, k * hidden:(k + 1) * hidden] for k in range(4))
    out = np.empty((xd.shape[0], 2 * hidden))
    c_new = out[:, hidden:]
    np.multiply(f, cd, out=c_new)
    c_new += i * gc
    tc = np.tanh(c_new)
    np.multiply(o, tc, out=out[:, :hidden])

    def backward_fn(g):
        dh, dc = g[:, :hidden], g[:, hidden:]
        dc = dc + dh * o * (1.0 - tc * tc)
        # upstream gradient per gate block, then times each gate's derivative
        dz = np.empty_like(z)
        np.multiply(dc, gc, out=dz[:, :hidden])
        np.multiply(dc, cd, out=dz[:, hidden:2 * hidden])
        np.multiply(dc, i, out=dz[:, 2 * hidden:3 * hidden])
        np.multiply(dh, tc, out=dz[:, 3 * hidden:])
        dz *= dmul * (1.0 - t * t)
        d_hc = None
        if hc.requires_grad:
            d_hc = np.concatenate([dz @ w_h.data.T, dc * f], axis=1)
        d_x = dz @ w_x.data.T if x.requires_grad else None
        return (d_x, d_hc, xd.T @ dz, hd.T @ dz, dz.sum(axis=0, keepdims=True))

    return _result(out, (x, hc, w_x, w_h, b), backward_fn, "lstm_cell")


def const_matmul(a, h):
    """``a @ h`` for a constant matrix ``a`` (dense array or scipy sparse)."""
    h = as_tensor(h)
    if a.shape[1] != h.data.shape[0]:
        raise ShapeError(f"const_matmul: inner dimensions {a.shape} x {h.data.shape}")
    return _result(np.asarray(a @ h.data), (h,), lambda g: (np.asarray(a.T @ g),), "const_matmul")


def block_matmul(a, h):
    """Block-diagonal product for ``a`` stacking B square c x c blocks row-wise.

    ``a`` is (B c) x c and ``h`` is (B c) x d; block b of the result is
    ``a_b @ h_b``.  With B = 1 this is an ordinary matrix product.
    """
    a, h = as_tensor(a), as_tensor(h)
    m, c = a.data.shape
    if m % c or h.data.shape[0] != m:
        raise ShapeError(f"block_matmul: {a.data.shape} blocks against {h.data.shape}")
    b, d = m // c, h.data.shape[1]
    ab, hb = a.data.reshape(b, c, c), h.data.reshape(b, c, d)

    def backward_fn(g):
        gb = g.reshape(b, c, d)
        da = (gb @ hb.transpose(0, 2, 1)).reshape(m, c) if a.requires_grad else None
        return (da, (ab.transpose(0, 2, 1) @ gb).reshape(m, d))

    return _result((ab @ hb).reshape(m, d), (a, h), backward_fn, "block_matmul")


def segment_tmatmul(s, m, sizes=None):
    """Stacked ``s_b^T @ m_b`` over row segments of the given sizes.

    ``s`` is N x c and ``m`` is N x d with N = sum(sizes); the result is
    (B c) x d.  ``sizes=None`` means a single segment.
    """
    s, m = as_tensor(s), as_tensor(m)
    n, c = s.data.shape
    d = m.data.shape[1]
    sizes = [n] if sizes is None else [int(k) for k in sizes]
    if m.data.shape[0] != n or sum(sizes) != n or min(sizes) < 1:
        raise ShapeError(f"segment_tmatmul: segments {sizes} do not cover {s.data.shape} / {m.data.shape}")
    b = len(sizes)
    sd, md = s.data, m.data
    if len(set(sizes)) == 1:
        k = sizes[0]
        s3, m3 = sd.reshape(b, k, c), md.reshape(b, k, d)
        out = (s3.transpose(0, 2, 1) @ m3).reshape(b * c, d)

        def backward_fn(g):
            g3 = g.reshape(b, c, d)
            return ((m3 @ g3.transpose(0, 2, 1)).reshape(n, c), (s3 @ g3).reshape(n, d))
    else:
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        segs = [slice(bounds[i], bounds[i + 1]) for i in range(b)]
        out = np.vstack([sd[sl].T @ md[sl] for sl in segs])

        def backward_fn(g):
            ds, dm = np.empty_like(sd), np.empty_like(md)
            for i, sl in enumerate(segs):
                gi = g[i * c:(i + 1) * c]
                ds[sl] = md[sl] @ gi.T
                dm[sl] = sd[sl] @ gi
            return (ds, dm)

    return _result(out, (s, m), backward_fn, "segment_tmatmul")


def reweight_dense(a, p):
    """Rescale a weighted adjacency so each row keeps ``1 - p`` on the diagonal.

    The off-diagonal mass of every row is rescaled to total ``p``; rows
    without off-diagonal mass become unit rows.  The input diagonal is
    discarded.  ``a`` may also stack several square c x c blocks row-wise
    ((B c) x c), in which case each block is treated on its own.
    """
    a = as_tensor(a)
    m, c = a.data.shape
    if c == 0 or m % c:
        raise ShapeError("reweight_dense expects square blocks stacked row-wise")
    rows = np.arange(m)
    diag_cols = rows % c
    off = a.data.copy()
    off[rows, diag_cols] = 0.0
    r = off.sum(axis=1, keepdims=True)
    live = r[:, 0] > 0
    safe_r = np.where(r > 0, r, 1.0)
    out = p * off / safe_r
    out[~live] = 0.0
    out[rows, diag_cols] = np.where(live, 1.0 - p, 1.0)

    def backward_fn(g):
        g_off = g.copy()
        g_off[rows, diag_cols] = 0.0
        inner = (g_off * off).sum(axis=1, keepdims=True) / safe_r
        d = p * (g_off - inner) / safe_r
        d[rows, diag_cols] = 0.0
        d[~live] = 0.0
        return (d,)

    return _result(out, (a,), backward_fn, "reweight")


# ---------------------------------------------------------------------------
# reverse sweep


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, store=None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    ``store`` is accepted for symmetry with the optimiser API; gradients
    land on the leaf tensors themselves, which is where a ParamStore keeps
    them.
    """
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones((1, 1))}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameters and optimiser


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class ParamStore:
    """Named learnable tensors plus Adam moment buffers."""

    def __init__(self):
        self.params = OrderedDict()
        self.m = {}
        self.v = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def count(self):
        return int(sum(t.data.size for t in self.params.values()))

    def grads(self):
        return {k: t.grad.copy() for k, t in self.params.items()}

    def values(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_values(self, values):
        for name, t in self.params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: expected {t.data.shape}, got {arr.shape}")
            t.data[...] = arr

    def adam_step(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        """Adam with bias correction and decoupled weight decay."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            if weight_decay:
                p.data -= lr * weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    store.adam_step(lr, beta1, beta2, eps, weight_decay)
