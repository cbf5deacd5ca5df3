"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float64 by default) and, when it results
from an operation on tensors that require gradients, carries a ``Node``
recording its parents and a backward rule. ``backward(loss)`` builds the
tape (a topologically ordered node list) for the subgraph reachable from
``loss`` and walks it once in reverse, accumulating gradients into leaf
tensors' ``.grad`` buffers.

Every forward op validates shapes (ContractError) and output finiteness
(NumericError). ``grad_check`` verifies analytic gradients against central
finite differences, auto-skipping coordinates that sit on a kink.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/validation)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


class Node:
    """One recorded op: parents and the rule mapping d(out) to d(parents)."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=np.float64):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, out: np.ndarray):
    # sum() is NaN/Inf whenever any element is; avoids a bool temporary
    total = float(out.sum())
    if total - total != 0.0:
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{op}: non-finite output")


def _result(op, data, parents, backward_fn):
    """Wrap an op result, recording a tape node when gradients are needed."""
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting expanded."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op, a: Tensor, b: Tensor, fwd, da, db):
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    ash, bsh = a.shape, b.shape

    def backward_fn(g):
        return (_unbroadcast(da(g, a.data, b.data), ash),
                _unbroadcast(db(g, a.data, b.data), bsh))

    return _result(op, data, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    return _binary("add", _as_tensor(a), _as_tensor(b),
                   lambda x, y: x + y,
                   lambda g, x, y: g,
                   lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", _as_tensor(a), _as_tensor(b),
                   lambda x, y: x - y,
                   lambda g, x, y: g,
                   lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", _as_tensor(a), _as_tensor(b),
                   lambda x, y: x * y,
                   lambda g, x, y: g * y,
                   lambda g, x, y: g * x)


def div(a, b):
    return _binary("div", _as_tensor(a), _as_tensor(b),
                   lambda x, y: x / y,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y))


def neg(a):
    a = _as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def backward_fn(g):
        if ad.ndim == 1:
            return (g @ bd.T, np.outer(ad, g))
        return (g @ bd.T, ad.T @ g)

    return _result("matmul", data, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a):
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    xd = a.data
    return _result("log", y, (a,), lambda g: (g / xd,))


def sqrt(a):
    a = _as_tensor(a)
    y = np.sqrt(a.data)
    return _result("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def absolute(a):
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def softplus(a):
    """log(1 + exp(x)), computed stably for large |x|."""
    a = _as_tensor(a)
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    return _result("softplus", y, (a,), lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# softmax family (last axis)

def softmax(a, mask=None):
    """Row softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``a.shape``; True marks
    attendable positions. Masked positions get weight exactly 0. A row with
    no attendable position is a contract error.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax: fully-masked row (no attendable position)")
        shifted = np.where(mask, x, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
    else:
        e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _result("softmax", y, (a,), backward_fn)


def multihead_scores(q, k, heads, mask=None):
    """Per-head scaled dot-product attention weights in one op.

    q [Tq x h*hd], k [Tk x h*hd] -> weights [h x Tq x Tk]; rows softmax over
    keys with masked positions exactly 0.
    """
    q, k = _as_tensor(q), _as_tensor(k)
    tq, d = q.shape
    tk, dk = k.shape
    if d != dk or d % heads != 0:
        raise ContractError(f"multihead_scores: shapes q{q.shape} k{k.shape} "
                            f"with {heads} heads")
    hd = d // heads
    scale = 1.0 / np.sqrt(hd)
    qh = q.data.reshape(tq, heads, hd).transpose(1, 0, 2)
    kh = k.data.reshape(tk, heads, hd).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) * scale
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("multihead_scores: fully-masked row")
        shifted = np.where(mask, scores, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
    else:
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        ds = y * (g - dot) * scale
        dqh = ds @ kh
        dkh = ds.transpose(0, 2, 1) @ qh
        return (dqh.transpose(1, 0, 2).reshape(tq, d),
                dkh.transpose(1, 0, 2).reshape(tk, d))

    return _result("multihead_scores", y, (q, k), backward_fn)


def multihead_apply(weights, v, heads):
    """weights [h x Tq x Tk] times v [Tk x h*hd] -> [Tq x h*hd]."""
    w, v = _as_tensor(weights), _as_tensor(v)
    h, tq, tk = w.shape
    if h != heads or v.shape[0] != tk or v.shape[1] % heads != 0:
        raise ContractError(f"multihead_apply: shapes w{w.shape} v{v.shape} "
                            f"with {heads} heads")
    d = v.shape[1]
    hd = d // heads
    vh = v.data.reshape(tk, heads, hd).transpose(1, 0, 2)
    wh = w.data
    out = (wh @ vh).transpose(1, 0, 2).reshape(tq, d)

    def backward_fn(g):
        gh = g.reshape(tq, heads, hd).transpose(1, 0, 2)
        dw = gh @ vh.transpose(0, 2, 1)
        dvh = wh.transpose(0, 2, 1) @ gh
        return dw, dvh.transpose(1, 0, 2).reshape(tk, d)

    return _result("multihead_apply", out, (w, v), backward_fn)


def layer_norm(x, gain, bias, eps=1e-5):
    """Row-wise normalization with affine parameters, fused for speed."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ContractError(f"layer_norm: shapes x{x.shape} gain{gain.shape} "
                            f"bias{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = xc / s
    data = xhat * gain.data + bias.data
    gd = gain.data

    def backward_fn(g):
        dxhat = g * gd
        m = dxhat.mean(axis=-1, keepdims=True)
        mxh = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m - xhat * mxh) / s
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result("layer_norm", data, (x, gain, bias), backward_fn)


def logsumexp(a):
    """log(sum(exp(x))) over the last axis (stable); output drops that axis."""
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    y = np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m
    soft = np.exp(x - y)
    out = y.reshape(x.shape[:-1])

    def backward_fn(g):
        return (np.expand_dims(g, -1) * soft,)

    return _result("logsumexp", out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def backward_fn(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(data), (a,), backward_fn)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if a.ndim else 1
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot view {old} as {shape}") from None
    return _result("reshape", data, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result("transpose", np.transpose(a.data, axes).copy(), (a,),
                   lambda g: (np.transpose(g, inv).copy(),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: empty input list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _result("concat", data, tensors, backward_fn)


def slice_(a, key):
    a = _as_tensor(a)
    data = a.data[key]
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _result("slice", np.asarray(data).copy(), (a,), backward_fn)


def pad(a, pad_width):
    """Zero-pad; pad_width follows np.pad conventions."""
    a = _as_tensor(a)
    data = np.pad(a.data, pad_width, mode="constant")
    slices = tuple(slice(lo, lo + n) for (lo, _hi), n in zip(pad_width, a.shape))

    def backward_fn(g):
        return (g[slices].copy(),)

    return _result("pad", data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# lookup, dropout

def embedding(table, ids):
    """Row lookup: table [V x d], ids integer vector -> [len(ids) x d]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ContractError(f"embedding: ids must be a vector, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: id out of range for table of {table.shape[0]} rows")
    data = table.data[ids].copy()
    tshape = table.shape

    def backward_fn(g):
        dt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(dt, ids, g)
        return (dt,)

    return _result("embedding", data, (table,), backward_fn)


def dropout(a, rate, rng=None, training=False):
    """Inverted dropout. Identity when not training (and in grad checks)."""
    a = _as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout: training mode requires an rng")
    keep = rng.random(a.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    m = keep * scale
    return _result("dropout", a.data * m, (a,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# convolution

def conv1d(x, w, b=None, stride=1, padding=(0, 0)):
    """1-D convolution over time. x [n x c_in], w [k x c_in x c_out]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ContractError(f"conv1d: incompatible shapes x{x.shape} w{w.shape}")
    if stride < 1:
        raise ContractError(f"conv1d: stride must be >= 1, got {stride}")
    k, c_in, c_out = w.shape
    lo, hi = padding
    xp = np.pad(x.data, ((lo, hi), (0, 0)), mode="constant")
    n_out = (xp.shape[0] - k) // stride + 1
    if n_out < 1:
        raise ContractError(f"conv1d: input of {x.shape[0]} frames too short for kernel {k}")
    idx = np.arange(n_out)[:, None] * stride + np.arange(k)[None, :]
    patches = xp[idx].reshape(n_out, k * c_in)
    w2 = w.data.reshape(k * c_in, c_out)
    data = patches @ w2
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        data = data + b.data
        parents.append(b)
    n, npad = x.shape[0], xp.shape[0]

    def backward_fn(g):
        dp = (g @ w2.T).reshape(n_out, k, c_in)
        dxp = np.zeros((npad, c_in), dtype=g.dtype)
        for kk in range(k):
            dxp[kk:kk + n_out * stride:stride] += dp[:, kk, :]
        dx = dxp[lo:lo + n]
        dw = (patches.T @ g).reshape(k, c_in, c_out)
        if len(parents) == 3:
            return (dx, dw, g.sum(axis=0))
        return (dx, dw)

    return _result("conv1d", data, parents, backward_fn)


def conv2d(x, w, b=None, stride=(1, 1), padding=((0, 0), (0, 0))):
    """2-D convolution. x [h x w x c_in], w [kh x kw x c_in x c_out]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ContractError(f"conv2d: incompatible shapes x{x.shape} w{w.shape}")
    kh, kw, c_in, c_out = w.shape
    sh, sw = stride
    (pt, pb), (pl, pr) = padding
    xp = np.pad(x.data, ((pt, pb), (pl, pr), (0, 0)), mode="constant")
    oh = (xp.shape[0] - kh) // sh + 1
    ow = (xp.shape[1] - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ContractError(f"conv2d: input {x.shape} too small for kernel ({kh},{kw})")
    ii = (np.arange(oh)[:, None] * sh + np.arange(kh)[None, :])[:, None, :, None]
    jj = (np.arange(ow)[:, None] * sw + np.arange(kw)[None, :])[None, :, None, :]
    patches = xp[ii, jj]                       # [oh, ow, kh, kw, c_in]
    pm = patches.reshape(oh * ow, kh * kw * c_in)
    w2 = w.data.reshape(kh * kw * c_in, c_out)
    data = (pm @ w2).reshape(oh, ow, c_out)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        data = data + b.data
        parents.append(b)
    hs, ws = x.shape[0], x.shape[1]
    hp, wp = xp.shape[0], xp.shape[1]

    def backward_fn(g):
        gm = g.reshape(oh * ow, c_out)
        dp = (gm @ w2.T).reshape(oh, ow, kh, kw, c_in)
        dxp = np.zeros((hp, wp, c_in), dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                dxp[a:a + oh * sh:sh, b:b + ow * sw:sw] += dp[:, :, a, b, :]
        dx = dxp[pt:pt + hs, pl:pl + ws]
        dw = (pm.T @ gm).reshape(kh, kw, c_in, c_out)
        if len(parents) == 3:
            return (dx, dw, gm.sum(axis=0))
        return (dx, dw)

    return _result("conv2d", data, parents, backward_fn)


# ---------------------------------------------------------------------------
# backward pass

@dataclass
class Tape:
    """Topologically ordered op nodes for the subgraph under one output."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)  # tensor produced by each node


def trace(t: Tensor) -> Tape:
    """Build the tape below ``t`` (deterministic iterative postorder)."""
    tape = Tape()
    seen = set()
    stack = [(t, False)]
    while stack:
        cur, expanded = stack.pop()
        if cur.node is None:
            continue
        if expanded:
            tape.nodes.append(cur.node)
            tape.outputs.append(cur)
            continue
        if id(cur) in seen:
            continue
        seen.add(id(cur))
        stack.append((cur, True))
        for p in reversed(cur.node.parents):
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))
    return tape


def backward(loss: Tensor, params=None):
    """Accumulate d(loss)/d(leaf) into .grad of reachable leaf tensors.

    Leaves in ``params`` (if given) that the loss does not reach get a zero
    grad buffer, so optimizers see an explicit zero rather than None.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("backward: loss has no recorded ops (empty tape)")
    tape = trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node, out in zip(reversed(tape.nodes), reversed(tape.outputs)):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                # leaf: accumulate into the public grad buffer
                p.ensure_grad()
                p.grad += pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is not None:
        for p in params:
            if p.requires_grad:
                p.ensure_grad()


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    n_checked: int
    n_skipped: int
    worst: tuple | None = None  # (input index, flat coordinate)

    def __str__(self):
        return (f"grad_check: max_rel_err={self.max_rel_err:.3e} "
                f"checked={self.n_checked} skipped={self.n_skipped} "
                f"{'PASS' if self.passed else 'FAIL'}")


def grad_check(f, inputs, eps=1e-5, tol=1e-4, kink_tol=1e-3) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` to central differences.

    Relative error per coordinate is |analytic - central| / max(1, |central|).
    A coordinate whose one-sided differences disagree by more than kink_tol
    (relative) is skipped: the function is locally non-smooth there (ReLU/abs
    kinks, max ties), where finite differences are invalid.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    saved_flags = [t.requires_grad for t in inputs]
    saved_grads = [t.grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out = f(*inputs)
        if out.data.size != 1:
            raise ContractError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
        backward(out, params=inputs)
        analytic = [t.grad.copy() for t in inputs]
        f0 = out.item()

        def evaluate():
            # finite-difference evaluations need values only, not the tape
            with no_grad():
                return f(*inputs).item()

        max_rel = 0.0
        worst = None
        n_checked = 0
        n_skipped = 0
        for i, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            aflat = analytic[i].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                try:
                    fp = evaluate()
                    flat[j] = orig - eps
                    fm = evaluate()
                except NumericError as e:
                    raise NumericError(f"grad_check: input {i} coordinate {j}: {e}") from None
                finally:
                    flat[j] = orig
                central = (fp - fm) / (2.0 * eps)
                fwd = (fp - f0) / eps
                bwd = (f0 - fm) / eps
                if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                    n_skipped += 1
                    continue
                rel = abs(aflat[j] - central) / max(1.0, abs(central))
                n_checked += 1
                if rel > max_rel:
                    max_rel = rel
                    worst = (i, j)
        return GradCheckReport(passed=max_rel <= tol, max_rel_err=max_rel,
                               n_checked=n_checked, n_skipped=n_skipped, worst=worst)
    finally:
        for t, flag, g in zip(inputs, saved_flags, saved_grads):
            t.requires_grad = flag
            t.grad = g
