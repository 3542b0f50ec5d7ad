"""Dense float tensors with a reverse-mode gradient tape.

The engine covers exactly the primitives the dual-encoder model needs.
Tensors are immutable numpy arrays (f32 or f64, C-contiguous). A Tensor
either lives on a Tape (it was produced by a recorded primitive or
registered as a leaf) or is a constant. Mixing constants into taped
expressions is fine; gradients only flow to taped inputs.

Every primitive validates shapes/precision up front and checks that its
output is finite; NaN/Inf raises ``NonFiniteError`` instead of silently
propagating. A Tape is single-use: run the forward pass again to
differentiate again.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "tensor",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "affine",
    "linear",
    "layernorm",
    "softmax",
    "gelu",
    "attention_core",
    "causal_mask",
    "cosine_similarity",
    "l2_normalize",
    "reduce_sum",
    "mean",
    "log",
    "row",
    "stack_rows",
    "pick",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_PRECISION = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_NEG_INF_FILL = -1e9  # finite stand-in for -inf in additive attention masks


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite value in result")


class Tensor:
    """Immutable dense float array, optionally recorded on a Tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, dtype: np.dtype | str | None = None):
        if isinstance(dtype, str):
            if dtype not in _DTYPES:
                raise ValueError(f"unknown precision {dtype!r}; expected 'f32' or 'f64'")
            dtype = _DTYPES[dtype]
        arr = np.array(data, dtype=dtype if dtype is not None else None, order="C")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        _check_finite(arr, "Tensor")
        self.data = arr
        self.tape = None
        self.node = None

    # Internal: wrap a freshly computed array without copying.
    @staticmethod
    def _wrap(arr: np.ndarray, tape: "Tape | None" = None, node: int | None = None) -> "Tensor":
        t = object.__new__(Tensor)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)  # numpy scalars have no flags
        arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> str:
        return _PRECISION[self.data.dtype]

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        tag = " on tape" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, {self.precision}{tag})"

    def __array__(self, dtype=None, copy=None):
        arr = self.data if dtype is None else self.data.astype(dtype)
        if copy and arr is self.data:
            arr = arr.copy()
        return arr

    # Arithmetic sugar; canonical API is the module-level functions.
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype: str | np.dtype | None = None) -> Tensor:
    return Tensor(data, dtype=dtype)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: int, inputs: tuple[int | None, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitives; replayed once, in reverse, by backward()."""

    def __init__(self):
        self._records: list[_Record] = []
        self._leaves: dict[int, Tensor] = {}
        self._n_nodes = 0
        self._consumed = False

    def _new_node(self) -> int:
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def leaf(self, value) -> Tensor:
        """Register a trainable leaf; its gradient is collected by backward()."""
        base = value if isinstance(value, Tensor) else Tensor(value)
        t = Tensor._wrap(np.asarray(base.data), self, self._new_node())
        self._leaves[t.node] = t
        return t

    @property
    def num_records(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Reverse-mode gradients of a scalar loss for every leaf.

        Leaves that the loss does not depend on get exact zeros. The tape
        is consumed: a second backward() raises.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed; rerun the forward pass")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if loss.tape is None:
            # constant loss: depends on no leaf, so every gradient is zero
            self._consumed = True
            return {nid: Tensor._wrap(np.zeros_like(leaf.data)) for nid, leaf in self._leaves.items()}
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        self._consumed = True

        grads: list[np.ndarray | None] = [None] * self._n_nodes
        grads[loss.node] = np.ones_like(loss.data)
        for rec in reversed(self._records):
            g = grads[rec.out]
            if g is None:
                continue
            for nid, gi in zip(rec.inputs, rec.vjp(g)):
                if nid is None or gi is None:
                    continue
                if grads[nid] is None:
                    grads[nid] = gi
                else:
                    grads[nid] = grads[nid] + gi
            grads[rec.out] = None  # free as we go

        out: dict[int, Tensor] = {}
        for nid, leaf in self._leaves.items():
            g = grads[nid]
            if g is None:
                g = np.zeros_like(leaf.data)
            else:
                _check_finite(g, "backward")
            out[nid] = Tensor._wrap(np.ascontiguousarray(g))
        return out


def _tape_of(tensors: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("inputs come from different tapes")
    return tape


def _same_precision(op: str, *tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ValueError(f"{op}: precision mismatch ({_PRECISION[dt]} vs {_PRECISION[t.data.dtype]})")
    return dt


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable | None) -> Tensor:
    """Finish a primitive: finite-check, and record it if any input is taped."""
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    _check_finite(out, op)
    tape = _tape_of(inputs)
    if tape is None or tape._consumed:
        if tape is not None and tape._consumed:
            raise RuntimeError("tape already consumed; rerun the forward pass")
        return Tensor._wrap(out)
    node = tape._new_node()
    ids = tuple(t.node if t.tape is tape else None for t in inputs)
    tape._records.append(_Record(node, ids, vjp))
    return Tensor._wrap(out, tape, node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after last-axis/scalar broadcast."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    # shape must be a suffix of g.shape with matching trailing axes
    extra = g.ndim - len(shape)
    return np.ascontiguousarray(g.sum(axis=tuple(range(extra))))


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    # last-axis affine broadcast: (..., d) with (d,)
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return
    raise ValueError(f"{op}: shapes {sa} and {sb} do not broadcast (last-axis only)")


# ------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_precision("add", a, b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_precision("sub", a, b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_precision("mul", a, b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    da, db = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * db, a.shape), _unbroadcast(g * da, b.shape)

    return _emit("mul", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


def affine(y: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Per-channel y * a + b over the last axis (the agent-layer primitive)."""
    _same_precision("affine", y, a, b)
    d = y.shape[-1] if y.ndim else None
    if a.shape != (d,) or b.shape != (d,):
        raise ValueError(f"affine: scale/shift of shape {a.shape}/{b.shape} do not match last axis {d}")
    out = y.data * a.data + b.data
    yd, ad = y.data, a.data

    def vjp(g):
        return (
            g * ad,
            _unbroadcast(g * yd, a.shape),
            _unbroadcast(g, b.shape),
        )

    return _emit("affine", out, (y, a, b), vjp)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _erf(x * np.float64(0.7071067811865476)).astype(x.dtype)
    out = 0.5 * x * (1.0 + inner)
    pdf = (np.exp(-0.5 * x * x) * x.dtype.type(0.3989422804014327)).astype(x.dtype)

    def vjp(g):
        return (g * (0.5 * (1.0 + inner) + x * pdf),)

    return _emit("gelu", out, (a,), vjp)


# ------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; also supports matrix @ vector."""
    _same_precision("matmul", a, b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dimension mismatch ({a.shape} @ {b.shape})")
        out = a.data @ b.data
        ad, bd = a.data, b.data

        def vjp(g):
            return g @ bd.T, ad.T @ g

        return _emit("matmul", out, (a, b), vjp)
    if a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dimension mismatch ({a.shape} @ {b.shape})")
        out = a.data @ b.data
        ad, bd = a.data, b.data

        def vjp(g):
            return np.outer(g, bd), ad.T @ g

        return _emit("matmul", out, (a, b), vjp)
    raise ValueError(f"matmul: unsupported ranks {a.ndim} and {b.ndim}")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose: expected a matrix")
    return _emit("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (np.ascontiguousarray(g.T),))


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ w.T + bias for x of shape (d_in,) or (n, d_in), w of shape (d_out, d_in)."""
    _same_precision("linear", x, w, *(() if bias is None else (bias,)))
    if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: x {x.shape} incompatible with weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if bias is not None:
        out = out + bias.data
    xd, wd = x.data, w.data

    def vjp(g):
        dx = g @ wd
        dw = np.outer(g, xd) if xd.ndim == 1 else g.T @ xd
        db = None
        if bias is not None:
            db = g if g.ndim == 1 else g.sum(axis=0)
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("linear", out, inputs, vjp)


# ------------------------------------------------------------------
# normalization and attention


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Population variance (divide by d); eps sits inside the square root.
    """
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    _same_precision("layernorm", x, gamma, beta)
    d = x.shape[-1] if x.ndim else 0
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layernorm: gamma/beta {gamma.shape}/{beta.shape} do not match last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = centered * inv_sigma
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def vjp(g):
        gx = g * gd
        # d/dx of (x - mu) / sigma with population variance
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv_sigma * (gx - m1 - xhat * m2)
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        return dx, dgamma, dbeta

    return _emit("layernorm", out, (x, gamma, beta), vjp)


def _softmax_forward(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    y = _softmax_forward(x.data, axis)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _emit("softmax", y, (x,), vjp)


def attention_core(q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over column-split heads.

    q, k, v: (n, d) with d divisible by n_heads; mask: additive (n, n)
    constant (0 where attention is allowed, a large negative value where
    it is not). Gradients flow to q, k, v.
    """
    _same_precision("attention_core", q, k, v)
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"attention_core: q/k/v shapes {q.shape}/{k.shape}/{v.shape} must match")
    n, d = q.shape
    if d % n_heads != 0:
        raise ValueError(f"attention_core: width {d} not divisible by {n_heads} heads")
    if mask is not None and mask.shape != (n, n):
        raise ValueError(f"attention_core: mask shape {mask.shape} != ({n}, {n})")
    dh = d // n_heads
    sc = q.data.dtype.type(1.0 / np.sqrt(dh))

    qd, kd, vd = q.data, k.data, v.data
    probs: list[np.ndarray] = []
    out = np.empty_like(qd)
    for h in range(n_heads):
        s = slice(h * dh, (h + 1) * dh)
        scores = (qd[:, s] @ kd[:, s].T) * sc
        if mask is not None:
            scores = scores + mask
        p = _softmax_forward(scores, -1)
        probs.append(p)
        out[:, s] = p @ vd[:, s]

    def vjp(g):
        dq = np.empty_like(qd)
        dk = np.empty_like(kd)
        dv = np.empty_like(vd)
        for h in range(n_heads):
            s = slice(h * dh, (h + 1) * dh)
            p = probs[h]
            go = g[:, s]
            dv[:, s] = p.T @ go
            dp = go @ vd[:, s].T
            ds = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p
            dq[:, s] = (ds @ kd[:, s]) * sc
            dk[:, s] = (ds.T @ qd[:, s]) * sc
        return dq, dk, dv

    return _emit("attention_core", out, (q, k, v), vjp)


def causal_mask(n: int, dtype: np.dtype) -> np.ndarray:
    """Additive lower-triangular mask: 0 on/below the diagonal, -1e9 above."""
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = dtype.type(_NEG_INF_FILL)
    return m


# ------------------------------------------------------------------
# reductions and similarity


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    ashape = a.shape
    if axis is None:
        out = np.asarray(a.data.sum(), dtype=a.data.dtype)

        def vjp(g):
            return (np.broadcast_to(g, ashape).astype(g.dtype, copy=True),)

        return _emit("reduce_sum", out, (a,), vjp)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"reduce_sum: axis {axis} invalid for shape {ashape}")
    ax = axis % a.ndim
    out = np.ascontiguousarray(a.data.sum(axis=ax))

    def vjp_axis(g):
        return (np.broadcast_to(np.expand_dims(g, ax), ashape).astype(g.dtype, copy=True),)

    return _emit("reduce_sum", out, (a,), vjp_axis)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def l2_normalize(a: Tensor, min_norm: float = 0.0) -> Tensor:
    """Scale rows (or a single vector) to unit Euclidean norm."""
    if a.ndim not in (1, 2):
        raise ValueError("l2_normalize: expected a vector or matrix")
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if np.any(norms <= min_norm) or np.any(norms == 0.0):
        raise ValueError("l2_normalize: zero-norm input")
    y = a.data / norms

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * inner) / norms,)

    return _emit("l2_normalize", y, (a,), vjp)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between two vectors, in [-1, 1]."""
    _same_precision("cosine_similarity", u, v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ValueError(f"cosine_similarity: expected equal-length vectors, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_similarity: zero-norm input")
    ud, vd = u.data, v.data
    c = float(ud @ vd) / (nu * nv)
    out = np.asarray(c, dtype=ud.dtype)

    def vjp(g):
        gs = float(g)
        du = gs * (vd / (nu * nv) - ud * (c / (nu * nu)))
        dv = gs * (ud / (nu * nv) - vd * (c / (nv * nv)))
        return du.astype(ud.dtype), dv.astype(vd.dtype)

    return _emit("cosine_similarity", out, (u, v), vjp)


# ------------------------------------------------------------------
# structural primitives


def row(a: Tensor, i: int) -> Tensor:
    if a.ndim != 2:
        raise ValueError("row: expected a matrix")
    if not 0 <= i < a.shape[0]:
        raise ValueError(f"row: index {i} out of range for {a.shape[0]} rows")
    out = np.ascontiguousarray(a.data[i])
    ashape = a.shape

    def vjp(g):
        da = np.zeros(ashape, dtype=g.dtype)
        da[i] = g
        return (da,)

    return _emit("row", out, (a,), vjp)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    if not rows:
        raise ValueError("stack_rows: empty input")
    _same_precision("stack_rows", *rows)
    d = rows[0].shape
    if any(r.shape != d for r in rows) or len(d) != 1:
        raise ValueError("stack_rows: expected equal-length vectors")
    out = np.stack([r.data for r in rows])

    def vjp(g):
        return tuple(np.ascontiguousarray(g[i]) for i in range(len(rows)))

    return _emit("stack_rows", out, tuple(rows), vjp)


def pick(p: Tensor, indices: np.ndarray) -> Tensor:
    """Select p[j, indices[j]] for every row j."""
    if p.ndim != 2:
        raise ValueError("pick: expected a matrix")
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.shape[0] != p.shape[0]:
        raise ValueError(f"pick: need one index per row, got {idx.shape} for {p.shape}")
    if np.any(idx < 0) or np.any(idx >= p.shape[1]):
        raise ValueError("pick: index out of range")
    rows_idx = np.arange(p.shape[0])
    out = np.ascontiguousarray(p.data[rows_idx, idx])
    pshape = p.shape

    def vjp(g):
        dp = np.zeros(pshape, dtype=g.dtype)
        dp[rows_idx, idx] = g
        return (dp,)

    return _emit("pick", out, (p,), vjp)
