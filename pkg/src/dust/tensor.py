"""Minimal dense tensors with tape-based reverse-mode differentiation.

Tensors wrap float64 numpy arrays.  When a :class:`Tape` is active and any
input of an op is tracked, the op appends one node to the tape holding a
backward closure; :func:`gradients` replays the tape in reverse.

Shape rules
-----------
matmul
    ``(..., n, k) @ (k, m) -> (..., n, m)`` or
    ``(..., n, k) @ (..., k, m)`` with identical leading extents.
linear
    fused ``x @ w + b`` with ``w: (k, m)`` and ``b: (m,)``.
add, sub, mul
    numpy broadcasting; the gradient of a broadcast operand is summed back
    to its own shape.
scale
    tensor times a python float.
concat / split
    along one axis; ``split`` takes the list of extents.
reshape, transpose
    as in numpy (``transpose`` takes a full axis permutation).
softmax
    along one axis, max-subtracted; an optional boolean ``mask`` (True =
    keep) broadcastable to the input drops logits to exactly zero weight.
layer_norm
    along one axis, no affine, ``(x - mean) / sqrt(var + 1e-6)``.
silu, relu
    elementwise.
mean, mse
    reduce all elements to a scalar (shape ``()``).
gaussian_sample
    untracked standard normal draw from a :class:`~dust.rng.SeededRng`.

Fused ops (``adaln``, ``gated_residual``, ``attention``) compose the
primitives above into one node each; see their docstrings.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-6


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tape:
    """Append-only record of tracked ops.

    ``nodes[i]`` is ``(op_kind, input_ids, backward)`` where ``backward`` maps
    the output cotangent to one cotangent per input (``None`` for inputs
    that need none).  Leaves have ``backward=None``.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int, ...], Callable | None]] = []
        self.shapes: list[tuple[int, ...]] = []
        self.param_ids: dict[str, int] = {}
        self.last_visits = 0

    def _push(self, op_kind, input_ids, backward, shape) -> int:
        self.nodes.append((op_kind, tuple(input_ids), backward))
        self.shapes.append(tuple(shape))
        return len(self.nodes) - 1

    def watch(self, t: "Tensor", name: str | None = None) -> "Tensor":
        """Register ``t`` as a trainable leaf and return the tracked tensor."""
        out = Tensor(t.data)
        out.node = self._push("leaf", (), None, t.data.shape)
        out.tape = self
        if name is not None:
            self.param_ids[name] = out.node
        return out

    def __len__(self):
        return len(self.nodes)


_ACTIVE: list[Tape] = []


@contextmanager
def recording(tape: Tape | None = None):
    tape = Tape() if tape is None else tape
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


class Tensor:
    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, node: int | None = None, tape: Tape | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(op: str, out: np.ndarray) -> np.ndarray:
    # a float64 sum is finite iff every term is (barring overflow near 1e308)
    if not math.isfinite(out.sum()):
        raise NonFiniteError(f"{op}: non-finite output")
    return out


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    _finite(op, out)
    res = Tensor(out)
    if not _ACTIVE:
        return res
    tape = _ACTIVE[-1]
    if any(t.node is not None and t.tape is tape for t in inputs):
        ids = tuple(t.node if t.tape is tape else -1 for t in inputs)
        res.node = tape._push(op, ids, backward, out.shape)
        res.tape = tape
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2] or (
            B.ndim > 2 and A.shape[:-2] != B.shape[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {A.shape} and {B.shape}")
    out = A @ B

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), out, backward)


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for ``x: (..., k)``, ``w: (k, m)``, ``b: (m,)``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    X, W = x.data, w.data
    if W.ndim != 2 or X.shape[-1] != W.shape[0] or b.data.shape != (W.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {X.shape}, {W.shape}, {b.shape}")
    out = X @ W + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ W.T, X.reshape(-1, X.shape[-1]).T @ g2, g2.sum(axis=0)

    return _record("linear", (x, w, b), out, backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    A, B = a.data, b.data
    return _record("mul", (a, b), A * B,
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(t.data.shape[i] != ts[0].data.shape[i]
                                    for i in range(nd) if i != ax):
            raise ShapeError(f"concat(axis={axis}): shapes {ts[0].shape} and {t.shape} disagree")
    sizes = [t.data.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _record("concat", ts, out, lambda g: tuple(np.split(g, cuts, axis=ax)))


def split(a, sizes: Sequence[int], axis: int) -> list[Tensor]:
    a = as_tensor(a)
    ax = axis % a.data.ndim
    if sum(sizes) != a.data.shape[ax] or any(s < 1 for s in sizes):
        raise ShapeError(f"split(axis={axis}): extents {list(sizes)} do not partition shape {a.shape}")
    shape = a.data.shape
    outs = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * a.data.ndim
        idx[ax] = slice(start, start + s)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros(shape)
            full[idx] = g
            return (full,)

        outs.append(_record("split", (a,), a.data[idx], backward))
        start += s
    return outs


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    nd = a.data.ndim
    axes = tuple(reversed(range(nd))) if axes is None else tuple(ax % nd for ax in axes)
    if sorted(axes) != list(range(nd)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.data, axes),
                   lambda g: (np.transpose(g, inv),))


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (a,), y, backward)


def layer_norm(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + LN_EPS)
    xh = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xh).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xh * gx),)

    return _record("layer_norm", (a,), xh, backward)


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _record("silu", (a,), x * s, lambda g: (g * (s + x * s * (1.0 - s)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    pos = x > 0
    return _record("relu", (a,), np.where(pos, x, 0.0), lambda g: (g * pos,))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.data.shape, a.data.size
    return _record("mean", (a,), np.asarray(a.data.mean()),
                   lambda g: (np.full(shape, float(g) / n),))


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    n = d.size

    def backward(g):
        ga = d * (2.0 * float(g) / n)
        return ga, -ga

    return _record("mse", (a, b), np.asarray(np.mean(d * d)), backward)


# ---------------------------------------------------------------- fused ops
# Each equals a composition of the primitives above (verified in tests) but
# records a single tape node.

def _chunk(mod: np.ndarray, i: int, d: int) -> np.ndarray:
    c = mod[..., i * d:(i + 1) * d]
    return c[:, None, :] if c.ndim == 2 else c


def _chunk_grad(g_chunk: np.ndarray, mod_shape, i: int, d: int, out: np.ndarray | None):
    if out is None:
        out = np.zeros(mod_shape)
    if len(mod_shape) == 2:
        g_chunk = g_chunk.sum(axis=1)
    out[..., i * d:(i + 1) * d] += g_chunk
    return out


def adaln(x, mod, j: int) -> Tensor:
    """``layer_norm(x) * (1 + scale) + shift`` on ``x: (B, T, d)``.

    ``mod`` is ``(B, 6d)`` (one modulation per sample) or ``(B, T, 6d)``
    (per token); shift / scale are chunks ``3j`` / ``3j + 1`` of width d.
    """
    x, mod = as_tensor(x), as_tensor(mod)
    X, M = x.data, mod.data
    d = X.shape[-1]
    if X.ndim != 3 or M.shape[-1] != 6 * d or M.shape[0] != X.shape[0] or (
            M.ndim == 3 and M.shape[1] != X.shape[1]):
        raise ShapeError(f"adaln: incompatible shapes {X.shape} and {M.shape}")
    shift, scl = _chunk(M, 3 * j, d), _chunk(M, 3 * j + 1, d)
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    out = xh * (1.0 + scl) + shift

    def backward(g):
        gh = g * (1.0 + scl)
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xh * (gh * xh).mean(axis=-1, keepdims=True))
        gm = _chunk_grad(g, M.shape, 3 * j, d, None)
        _chunk_grad(g * xh, M.shape, 3 * j + 1, d, gm)
        return gx, gm

    return _record("adaln", (x, mod), out, backward)


def gated_residual(x, y, mod, j: int) -> Tensor:
    """``x + gate * y`` with gate = chunk ``3j + 2`` of ``mod`` (see :func:`adaln`)."""
    x, y, mod = as_tensor(x), as_tensor(y), as_tensor(mod)
    X, Y, M = x.data, y.data, mod.data
    d = X.shape[-1]
    if X.shape != Y.shape or X.ndim != 3 or M.shape[-1] != 6 * d:
        raise ShapeError(f"gated_residual: incompatible shapes {X.shape}, {Y.shape}, {M.shape}")
    gate = _chunk(M, 3 * j + 2, d)

    def backward(g):
        return g, g * gate, _chunk_grad(g * Y, M.shape, 3 * j + 2, d, None)

    return _record("gated_residual", (x, y, mod), X + gate * Y, backward)


def attention(q, k, v, n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``q: (B, Tq, d)``, ``k, v: (B, Tk, d)`` -> ``(B, Tq, d)``; ``mask``
    (True = attend) broadcasts to ``(B, H, Tq, Tk)``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    Q, K, V = q.data, k.data, v.data
    if Q.ndim != 3 or K.shape != V.shape or K.ndim != 3 or Q.shape[0] != K.shape[0] or (
            Q.shape[2] != K.shape[2]) or Q.shape[2] % n_heads:
        raise ShapeError(f"attention: incompatible shapes {Q.shape}, {K.shape}, {V.shape}")
    B, Tq, d = Q.shape
    Tk = K.shape[1]
    dh = d // n_heads
    c = 1.0 / math.sqrt(dh)
    qh = Q.reshape(B, Tq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = K.reshape(B, Tk, n_heads, dh).transpose(0, 2, 1, 3)
    vh = V.reshape(B, Tk, n_heads, dh).transpose(0, 2, 1, 3)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * c
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    oh = p @ vh
    out = oh.transpose(0, 2, 1, 3).reshape(B, Tq, d)

    def backward(g):
        gh = g.reshape(B, Tq, n_heads, dh).transpose(0, 2, 1, 3)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh
        merge = lambda t, n: t.transpose(0, 2, 1, 3).reshape(B, n, d)
        return merge(gq, Tq), merge(gk, Tk), merge(gv, Tk)

    return _record("attention", (q, k, v), out, backward)


def gaussian_sample(rng, shape) -> Tensor:
    return Tensor(rng.normal(tuple(shape)))


_OPS = {
    "matmul": matmul, "linear": linear, "add": add, "sub": sub, "mul": mul, "scale": scale,
    "concat": concat, "split": split, "reshape": reshape, "transpose": transpose,
    "softmax": softmax, "layer_norm": layer_norm, "silu": silu, "relu": relu,
    "mean": mean, "mse": mse,
    "adaln": adaln, "gated_residual": gated_residual, "attention": attention,
}


def apply(op_kind: str, inputs: Sequence, **attrs):
    """Dispatch by name: ``apply("softmax", [x], axis=-1)``.

    ``concat`` takes its whole input list as the tensor sequence;
    ``gaussian_sample`` takes ``rng`` and ``shape`` attributes and no inputs.
    """
    if op_kind == "gaussian_sample":
        return gaussian_sample(attrs["rng"], attrs["shape"])
    if op_kind == "concat":
        return concat(inputs, **attrs)
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- differentiation

def gradients(loss: Tensor, params) -> dict:
    """Reverse-mode gradients of scalar ``loss``.

    ``params`` is either a mapping ``name -> Tensor`` or a sequence of tracked
    tensors.  Returns a dict with the same keys (names, or positions for a
    sequence) mapping to float64 arrays.  Parameters that do not reach the
    loss get exact zeros.
    """
    if loss.data.shape != ():
        raise ShapeError(f"gradients: loss must be a scalar, got shape {loss.shape}")
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = list(enumerate(params))
    if loss.node is None:
        return {k: np.zeros(p.shape) for k, p in items}
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.node: np.ones(())}
    visits = 0
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        op, inputs, backward = tape.nodes[nid]
        visits += 1
        if backward is None:
            continue
        del grads[nid]
        for iid, gi in zip(inputs, backward(g)):
            if iid < 0 or gi is None:
                continue
            prev = grads.get(iid)
            grads[iid] = gi if prev is None else prev + gi
    tape.last_visits = visits
    out = {}
    for k, p in items:
        g = grads.get(p.node) if p.tape is tape else None
        out[k] = np.zeros(p.shape) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
    return out


def finite_diff(f: Callable[[dict], float], params: dict, h: float = 1e-5,
                coords: dict | None = None) -> dict:
    """Central-difference gradient of ``f`` with respect to ``params``.

    ``params`` maps name -> ndarray and is perturbed in place (restored on
    return).  ``coords`` optionally restricts each name to a list of flat
    indices; unlisted coordinates come back as zero.
    """
    out = {}
    for name, arr in params.items():
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idx = range(flat.size) if coords is None else coords.get(name, ())
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params)
            flat[i] = orig - h
            fm = f(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den))
