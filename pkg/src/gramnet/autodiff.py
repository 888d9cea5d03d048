"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every operation here accepts either plain arrays or :class:`Node` objects.
When no operand lives on a tape the operation simply returns the numpy
result, so the same model code serves both training (recorded) and
evaluation or finite-difference probing (unrecorded).

    tape = Tape()
    a = tape.param("a", np.eye(3))
    loss = trace(a @ a)
    grads = tape.backward(loss)      # {"a": 2 * a}
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import linalg
from .errors import PrecisionMismatch, ShapeMismatch

ARCCOS_EPS = 1e-7


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self):
        self.nodes = []
        self.param_ids = {}

    def param(self, name, value):
        if name in self.param_ids:
            raise ValueError(f"parameter {name!r} registered twice")
        value = np.array(value, copy=True)
        node = Node(self, value, "param", (), None)
        self.param_ids[name] = node.index
        return node

    def backward(self, loss):
        """Gradients of the scalar ``loss`` for every registered parameter.

        Parameters that do not feed into ``loss`` receive exact zeros.
        """
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ValueError("loss must be a node recorded on this tape")
        if loss.value.size != 1:
            raise ShapeMismatch(f"loss must be scalar, got shape {loss.value.shape}")
        grads = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                j = parent.index
                if pg.shape != parent.value.shape:
                    pg = np.reshape(pg, parent.value.shape)
                grads[j] = pg if grads[j] is None else grads[j] + pg
        out = {}
        for name, idx in self.param_ids.items():
            g = grads[idx] if idx <= loss.index else None
            out[name] = np.zeros_like(self.nodes[idx].value) if g is None else g
        return out


class Node:
    __array_priority__ = 1000

    __slots__ = ("tape", "index", "value", "op", "parents", "vjp")

    def __init__(self, tape, value, op, parents, vjp):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    def __repr__(self):
        return f"Node(#{self.index} {self.op} shape={self.value.shape} dtype={self.value.dtype})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value(x):
    return x.value if isinstance(x, Node) else x


def is_node(x):
    return isinstance(x, Node)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _record(op, val, operands, vjp):
    tape = _tape_of(*operands)
    if tape is None:
        return val
    parents = tuple(x if isinstance(x, Node) else None for x in operands)
    return Node(tape, val, op, parents, vjp)


def _arr(x):
    return np.asarray(value(x))


def _binary_operands(a, b):
    va, vb = value(a), value(b)
    aa, ab = np.asarray(va), np.asarray(vb)
    if aa.dtype.kind == "f" and ab.dtype.kind == "f" and aa.dtype != ab.dtype:
        # 0-d values act like python scalars and adopt the array's precision
        if aa.ndim == 0:
            va = aa.astype(ab.dtype)
        elif ab.ndim == 0:
            vb = ab.astype(aa.dtype)
        else:
            raise PrecisionMismatch(f"mixed precision operands {aa.dtype} and {ab.dtype}")
    return va, vb


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    va, vb = _binary_operands(a, b)
    sa, sb = np.shape(va), np.shape(vb)
    return _record("add", va + vb, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    va, vb = _binary_operands(a, b)
    sa, sb = np.shape(va), np.shape(vb)
    return _record("sub", va - vb, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    va, vb = _binary_operands(a, b)
    sa, sb = np.shape(va), np.shape(vb)
    return _record(
        "mul", va * vb, (a, b),
        lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)),
    )


def div(a, b):
    va, vb = _binary_operands(a, b)
    sa, sb = np.shape(va), np.shape(vb)
    out = va / vb
    return _record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / vb, sa), _unbroadcast(-g * out / vb, sb)),
    )


def scale(a, s):
    """Multiply by a constant scalar."""
    return mul(a, s)


def neg(a):
    return _record("neg", -_arr(a), (a,), lambda g: (-g,))


def power(a, p):
    va = _arr(a)
    return _record("pow", va ** p, (a,), lambda g: (g * p * va ** (p - 1),))


def square(a):
    va = _arr(a)
    return _record("square", va * va, (a,), lambda g: (2.0 * g * va,))


def matmul(a, b):
    va, vb = _binary_operands(a, b)
    va, vb = np.asarray(va), np.asarray(vb)
    if va.ndim < 2 or vb.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    if va.shape[-1] != vb.shape[-2]:
        raise ShapeMismatch(f"matmul shapes {va.shape} and {vb.shape} do not conform")
    sa, sb = va.shape, vb.shape

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(vb, -1, -2), sa) if isinstance(a, Node) else None
        gb = _unbroadcast(np.swapaxes(va, -1, -2) @ g, sb) if isinstance(b, Node) else None
        return ga, gb

    return _record("matmul", va @ vb, (a, b), vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def transpose(a, axes=None):
    va = _arr(a)
    if axes is None:
        axes = tuple(range(va.ndim))[::-1]
    inv = np.argsort(axes)
    return _record("transpose", np.transpose(va, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    va = _arr(a)
    return _record("reshape", va.reshape(shape), (a,), lambda g: (g.reshape(va.shape),))


def getitem(a, idx):
    va = _arr(a)

    def vjp(g):
        z = np.zeros_like(va)
        np.add.at(z, idx, g)
        return (z,)

    return _record("getitem", va[idx], (a,), vjp)


def concat(xs, axis=0):
    xs = list(xs)
    vals = [np.asarray(v) for v in (_binary_operands(xs[0], x)[1] for x in xs)]
    sizes = [v.shape[axis] for v in vals]
    cuts = np.cumsum(sizes)[:-1]
    return _record("concat", np.concatenate(vals, axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def sum_(a, axis=None, keepdims=False):
    va = _arr(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return _record("sum", np.sum(va, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    va = _arr(a)
    n = va.size if axis is None else np.prod([va.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def tril(a, k=0):
    return _record("tril", np.tril(_arr(a), k), (a,), lambda g: (np.tril(g, k),))


def diag_part(a):
    va = _arr(a)
    if va.ndim != 2:
        raise ShapeMismatch("diag_part expects a matrix")
    return _record("diag_part", np.diagonal(va).copy(), (a,), lambda g: (np.diag(g),))


def diag_embed(v):
    vv = _arr(v)
    if vv.ndim != 1:
        raise ShapeMismatch("diag_embed expects a vector")
    return _record("diag_embed", np.diag(vv), (v,), lambda g: (np.diagonal(g).copy(),))


def eye_like(a, n=None):
    va = _arr(a)
    return np.eye(va.shape[0] if n is None else n, dtype=va.dtype)


# ---------------------------------------------------------------------------
# elementwise


def exp(a):
    out = np.exp(_arr(a))
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    va = _arr(a)
    return _record("log", np.log(va), (a,), lambda g: (g / va,))


def sqrt(a):
    out = np.sqrt(_arr(a))
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def reciprocal(a):
    out = 1.0 / _arr(a)
    return _record("reciprocal", out, (a,), lambda g: (-g * out * out,))


def arccos(a):
    """Arc-cosine of inputs clamped to ``[-1 + eps, 1 - eps]``."""
    va = _arr(a)
    lim = 1.0 - ARCCOS_EPS
    inside = (va > -lim) & (va < lim)
    c = np.clip(va, -lim, lim)
    out = np.arccos(c)
    return _record("arccos", out, (a,),
                   lambda g: (np.where(inside, -g / np.sqrt(1.0 - c * c), 0.0).astype(va.dtype),))


def sigmoid(a):
    va = _arr(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * va))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a, lo):
    va = _arr(a)
    keep = va > lo
    return _record("clamp_min", np.where(keep, va, lo).astype(va.dtype), (a,),
                   lambda g: (np.where(keep, g, 0.0).astype(g.dtype),))


def clip(a, lo, hi):
    va = _arr(a)
    keep = (va >= lo) & (va <= hi)
    return _record("clip", np.clip(va, lo, hi), (a,),
                   lambda g: (np.where(keep, g, 0.0).astype(g.dtype),))


# ---------------------------------------------------------------------------
# reductions


def trace(a):
    va = _arr(a)
    if va.ndim != 2 or va.shape[0] != va.shape[1]:
        raise ShapeMismatch("trace expects a square matrix")
    return _record("trace", np.trace(va), (a,), lambda g: (g * np.eye(va.shape[0], dtype=va.dtype),))


def frobenius_norm_sq(a):
    va = _arr(a)
    return _record("frobenius_norm_sq", np.sum(va * va), (a,), lambda g: (2.0 * g * va,))


# ---------------------------------------------------------------------------
# linear algebra


def cholesky(a, jitter=0.0):
    """Lower Cholesky factor of ``a + jitter * I``.

    Only the lower triangle of ``a`` is read; the returned gradient is the
    symmetric one, appropriate when ``a`` is itself built symmetrically.
    """
    va = _arr(a)
    low = linalg.cholesky_lower(va, jitter)

    def vjp(g):
        phi = np.tril(low.T @ np.tril(g))
        phi[np.diag_indices_from(phi)] *= 0.5
        left = scipy.linalg.solve_triangular(low, phi, lower=True, trans="T", check_finite=False)
        s = scipy.linalg.solve_triangular(low, left.T, lower=True, trans="T", check_finite=False).T
        return (0.5 * (s + s.T),)

    return _record("cholesky", low, (a,), vjp)


def solve_triangular(low, b, trans=False):
    """Solve ``L X = b`` (or ``L^T X = b`` with ``trans``) for lower ``L``."""
    vl, vb = _binary_operands(low, b)
    vl, vb = np.asarray(vl), np.asarray(vb)
    if vb.shape[0] != vl.shape[0]:
        raise ShapeMismatch(f"triangular solve: factor dim {vl.shape[0]}, rhs rows {vb.shape[0]}")
    x = scipy.linalg.solve_triangular(vl, vb, lower=True, trans="T" if trans else "N",
                                      check_finite=False)

    def vjp(g):
        gb = scipy.linalg.solve_triangular(vl, g, lower=True, trans="N" if trans else "T",
                                           check_finite=False)
        gl = None
        if isinstance(low, Node):
            gb2 = gb.reshape(gb.shape[0], -1)
            x2 = x.reshape(x.shape[0], -1)
            gl = -np.tril(x2 @ gb2.T) if trans else -np.tril(gb2 @ x2.T)
        return gl, gb

    return _record("solve_triangular", x, (low, b), vjp)


def chol_solve(low, b):
    """Solve ``(L L^T) X = b`` given the lower factor ``L``."""
    return solve_triangular(low, solve_triangular(low, b), trans=True)


def logdet_chol(low):
    return mul(sum_(log(diag_part(low))), 2.0)


def logdet(a, jitter=0.0):
    return logdet_chol(cholesky(a, jitter))


# ---------------------------------------------------------------------------
# probabilistic helpers


def log_softmax(x, axis=-1):
    vx = _arr(x)
    m = np.max(vx, axis=axis, keepdims=True)
    z = vx - m
    out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), vjp)


def softmax(x, axis=-1):
    return exp(log_softmax(x, axis))


def softmax_log_likelihood(logits, labels):
    """Categorical log-probability of ``labels`` under ``softmax(logits)``.

    ``logits`` has classes on the last axis; ``labels`` broadcasts against
    the leading axes.  Returns one log-probability per leading position.
    """
    vx = _arr(logits)
    labels = np.asarray(labels)
    lab = np.broadcast_to(labels, vx.shape[:-1])
    m = np.max(vx, axis=-1, keepdims=True)
    z = vx - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    lsm = z - lse
    picked = np.take_along_axis(lsm, lab[..., None], axis=-1)[..., 0]

    def vjp(g):
        onehot = np.zeros_like(vx)
        np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
        return ((onehot - np.exp(lsm)) * g[..., None],)

    return _record("softmax_log_likelihood", picked, (logits,), vjp)


def gaussian_reparam_sample(mean, scale, noise, chol=False):
    """``mean + scale * noise`` with the noise held constant.

    With ``chol=True`` ``scale`` is a lower-triangular covariance factor and
    the last axis of ``noise`` is mapped through it.
    """
    if chol:
        return add(mean, matmul(noise, transpose(scale)))
    return add(mean, mul(scale, noise))


# ---------------------------------------------------------------------------
# convolution support


def extract_patches(x, kh, kw, stride=1):
    """Zero-padded 'same' patches of a ``(P, H, W, C)`` array.

    Returns ``(P, H', W', kh * kw, C)`` where ``H' = ceil(H / stride)``; patch
    offsets are centred on the output location.
    """
    vx = _arr(x)
    p, h, w, c = vx.shape
    ph, pw = kh // 2, kw // 2
    ho, wo = -(-h // stride), -(-w // stride)
    padded = np.zeros((p, h + 2 * ph, w + 2 * pw, c), dtype=vx.dtype)
    padded[:, ph:ph + h, pw:pw + w, :] = vx
    rows = (np.arange(ho) * stride)[:, None] + np.arange(kh)[None, :]
    cols = (np.arange(wo) * stride)[:, None] + np.arange(kw)[None, :]
    ri = rows[:, None, :, None]
    ci = cols[None, :, None, :]
    out = padded[:, ri, ci, :]                      # (P, H', W', kh, kw, C)
    out = out.reshape(p, ho, wo, kh * kw, c)

    def vjp(g):
        gp = np.zeros_like(padded)
        np.add.at(gp, (slice(None), ri, ci, slice(None)), g.reshape(p, ho, wo, kh, kw, c))
        return (gp[:, ph:ph + h, pw:pw + w, :],)

    return _record("extract_patches", out, (x,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    max_rel_error: float
    max_abs_error: float
    finite: bool


def grad_check(loss_fn, params, step=1e-5):
    """Compare tape gradients against central finite differences.

    ``loss_fn(params)`` must build the loss from a dict of parameters; it is
    called once with tape nodes and then repeatedly with perturbed plain
    arrays.  The relative error of a parameter is the largest coordinate
    discrepancy divided by the larger of the two gradients' max-norms.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    tape = Tape()
    nodes = {k: tape.param(k, v) for k, v in params.items()}
    loss = loss_fn(nodes)
    grads = tape.backward(loss)

    report = {}
    for name, base in params.items():
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            trial = dict(params)
            plus = base.copy()
            plus.reshape(-1)[i] += step
            trial[name] = plus
            f_plus = float(np.asarray(value(loss_fn(trial))))
            minus = base.copy()
            minus.reshape(-1)[i] -= step
            trial[name] = minus
            f_minus = float(np.asarray(value(loss_fn(trial))))
            flat[i] = (f_plus - f_minus) / (2.0 * step)
        analytic = grads[name]
        finite = bool(np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric)))
        abs_err = float(np.max(np.abs(analytic - numeric))) if base.size else 0.0
        denom = max(float(np.max(np.abs(analytic), initial=0.0)),
                    float(np.max(np.abs(numeric), initial=0.0)))
        rel = 0.0 if abs_err == 0.0 else (abs_err / denom if denom > 0 else float("inf"))
        if not finite:
            rel = float("nan")
        report[name] = GradCheckEntry(rel, abs_err, finite)
    return report
