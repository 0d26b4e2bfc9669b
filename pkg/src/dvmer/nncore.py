"""Minimal reverse-mode autodiff over numpy arrays.

Implements exactly the tensor operations the dual-view architecture needs:
linear maps, temperature softmax, layer norm, exact GELU, multi-head
attention, dropout, and the reductions that glue them together. Gradients
are verified against central finite differences via gradient_check.

Training runs in float32; gradient checking runs in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import (
    BadTemperature,
    HeadDivisibility,
    NonFiniteValue,
    ShapeMismatch,
)

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _check_finite(data, op_name):
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite value produced by op '{op_name}'")


class Tensor:
    """Array node in a dynamically built computation graph.

    data is float32 by default; pass float64 arrays for gradient checking.
    Every op validates its output for NaN/Inf.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse-mode sweep from this node; seeds with ones by default."""
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)

        # iterative post-order DFS; parent tuples keep traversal deterministic
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward, op_name) -> Tensor:
    _check_finite(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _accum(t: Tensor, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _reduce_to(g, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and structural ops -------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    return _node(data, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data - b.data

    def backward(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(-g, b.data.shape))

    return _node(data, (a, b), backward, "sub")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward, "neg")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _node(data, (a, b), backward, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data / b.data

    def backward(g):
        _accum(a, _reduce_to(g / b.data, a.data.shape))
        _accum(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _reduce_to(ga, a.data.shape))
        _accum(b, _reduce_to(gb, b.data.shape))

    return _node(data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _node(data, (a,), backward, "transpose")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _node(data, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / count)

    return _node(data, (a,), backward, "mean")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _node(data, (a,), backward, "exp")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (0.5 / data))

    return _node(data, (a,), backward, "sqrt")


def log_clipped(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero on the clipped region.

    Keeps 0*log(0) terms finite when hard one-hot distributions are fed
    into divergence expressions.
    """
    clipped = np.maximum(a.data, floor)
    data = np.log(clipped)

    def backward(g):
        _accum(a, np.where(a.data > floor, g / clipped, 0.0))

    return _node(data, (a,), backward, "log_clipped")


def concat(tensors, axis=-1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _node(data, tuple(tensors), backward, "concat")


# -- nonlinearities and normalisation ------------------------------------


def softmax(a: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature-scaled softmax with max-subtraction for stability."""
    if temperature <= 0:
        raise BadTemperature(f"temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gz = (g - (g * data).sum(axis=axis, keepdims=True)) * data
        _accum(a, gz / temperature)

    return _node(data, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        _accum(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _node(data, (a,), backward, "log_softmax")


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU, x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    data = x * phi

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accum(a, g * (phi + x * pdf))

    return _node(data, (a,), backward, "gelu")


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p).astype(a.dtype) / (1.0 - p)
    data = a.data * mask

    def backward(g):
        _accum(a, g * mask)

    return _node(data, (a,), backward, "dropout")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x W^T + b over the last axis; w is [d_out, d_in]."""
    if x.data.shape[-1] != w.data.shape[-1]:
        raise ShapeMismatch(f"linear: input dim {x.data.shape[-1]} vs weight {w.data.shape}")
    if b is not None and b.data.shape != (w.data.shape[0],):
        raise ShapeMismatch(f"linear: bias shape {b.data.shape} vs weight {w.data.shape}")
    data = x.data @ w.data.T
    if b is not None:
        data = data + b.data

    def backward(g):
        _accum(x, g @ w.data)
        d_out, d_in = w.data.shape
        _accum(w, g.reshape(-1, d_out).T @ x.data.reshape(-1, d_in))
        if b is not None:
            _accum(b, g.reshape(-1, d_out).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, backward, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token normalisation over the last axis, then affine (gamma, beta)."""
    mu = tmean(x, axis=-1, keepdims=True)
    centred = sub(x, mu)
    var = tmean(mul(centred, centred), axis=-1, keepdims=True)
    inv_std = div(_as_tensor(1.0, x.dtype), sqrt(add(var, eps)))
    normed = mul(centred, inv_std)
    return add(mul(normed, gamma), beta)


def select_classes(t: Tensor, idx) -> Tensor:
    """Pick one entry per row of a [B, C] tensor; used for cross-entropy."""
    idx = np.asarray(idx, dtype=np.int64)
    if t.data.ndim != 2 or idx.shape != (t.data.shape[0],):
        raise ShapeMismatch(f"select_classes: {t.data.shape} with index {idx.shape}")
    rows = np.arange(t.data.shape[0])
    data = t.data[rows, idx]

    def backward(g):
        full = np.zeros_like(t.data)
        full[rows, idx] = g
        _accum(t, full)

    return _node(data, (t,), backward, "select_classes")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample negative log likelihood at temperature 1; returns shape [B]."""
    return neg(select_classes(log_softmax(logits), labels))


def l2_normalize(t: Tensor, eps: float = 1e-12) -> Tensor:
    norm = sqrt(add(tsum(mul(t, t), axis=-1, keepdims=True), eps))
    return div(t, norm)


# -- parameter initialisation --------------------------------------------


def init_linear_params(d_out: int, d_in: int, rng: np.random.Generator, dtype=np.float32):
    """Uniform fan-in scaling for weight and bias."""
    bound = 1.0 / np.sqrt(d_in)
    w = Tensor(rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=(d_out,)).astype(dtype), requires_grad=True)
    return w, b


def init_layer_norm_params(dim: int, dtype=np.float32):
    gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
    beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    return gamma, beta


class MultiHeadAttention:
    """Scaled dot-product attention with learned Q/K/V and output projections."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads != 0:
            raise HeadDivisibility(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq, self.bq = init_linear_params(dim, dim, rng, dtype)
        self.wk, self.bk = init_linear_params(dim, dim, rng, dtype)
        self.wv, self.bv = init_linear_params(dim, dim, rng, dtype)
        self.wo, self.bo = init_linear_params(dim, dim, rng, dtype)

    def parameters(self) -> dict:
        return {
            "wq": self.wq, "bq": self.bq,
            "wk": self.wk, "bk": self.bk,
            "wv": self.wv, "bv": self.bv,
            "wo": self.wo, "bo": self.bo,
        }

    def _split_heads(self, t: Tensor, batch: int, n: int) -> Tensor:
        return transpose(reshape(t, (batch, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        if query.ndim != 3 or key.ndim != 3 or value.ndim != 3:
            raise ShapeMismatch("attention expects [B, N, D] inputs")
        if query.shape[-1] != self.dim or key.shape[-1] != self.dim or value.shape[-1] != self.dim:
            raise ShapeMismatch(
                f"attention dim {self.dim} vs inputs {query.shape}, {key.shape}, {value.shape}"
            )
        if key.shape[:2] != value.shape[:2] or query.shape[0] != key.shape[0]:
            raise ShapeMismatch(
                f"attention batch/key mismatch: {query.shape}, {key.shape}, {value.shape}"
            )
        batch, n_q, _ = query.shape
        n_k = key.shape[1]

        q = self._split_heads(linear(query, self.wq, self.bq), batch, n_q)
        k = self._split_heads(linear(key, self.wk, self.bk), batch, n_k)
        v = self._split_heads(linear(value, self.wv, self.bv), batch, n_k)

        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        weights = softmax(scores, axis=-1)
        context = matmul(weights, v)
        merged = reshape(transpose(context, (0, 2, 1, 3)), (batch, n_q, self.dim))
        return linear(merged, self.wo, self.bo)


# -- gradient verification ------------------------------------------------


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    per_input: dict

    def __post_init__(self):
        assert self.max_rel_error >= 0.0


def _rel_error(a: float, b: float, denom_floor: float) -> float:
    denom = max(abs(a), abs(b))
    if denom == 0.0:
        return 0.0
    return abs(a - b) / max(denom, denom_floor)


def gradient_check(
    fn,
    inputs: dict,
    step: float = 1e-4,
    op_name: str = "op",
    denom_floor: float = 1e-6,
) -> GradReport:
    """Compare reverse-mode gradients of a scalar-valued fn against central
    finite differences.

    fn must rebuild its graph from the given Tensors on every call and
    return a scalar Tensor. All inputs must be float64 and step must lie
    in [1e-5, 1e-3]. Relative error uses max(|a|, |b|) as denominator with
    the 0/0 := 0 convention; denom_floor keeps structurally-zero gradients
    (both sides pure roundoff noise below the floor) from inflating the
    ratio, comparing them on an absolute scale instead.
    """
    if not (1e-5 <= step <= 1e-3):
        raise ValueError(f"step {step} outside [1e-5, 1e-3]")
    for name, t in inputs.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"gradient_check requires float64 inputs; '{name}' is {t.data.dtype}")
        if not t.requires_grad:
            raise ValueError(f"gradient_check input '{name}' must require gradients")

    for t in inputs.values():
        t.zero_grad()
    out = fn()
    if out.data.size != 1:
        raise ShapeMismatch("gradient_check expects a scalar output")
    out.backward()
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in inputs.items()
    }

    per_input = {}
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_error(float(analytic[name].reshape(-1)[i]), fd, denom_floor))
        per_input[name] = worst

    max_err = max(per_input.values()) if per_input else 0.0
    return GradReport(op_name=op_name, max_rel_error=max_err, per_input=per_input)


# -- named-parameter container (checkpoint building block) ----------------

_DTYPE_TAGS = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8}
_TAG_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_TAGS.items()}


def pack_array_table(named: dict) -> bytes:
    """Serialise a name -> ndarray mapping (little-endian, row-major)."""
    parts = [struct.pack("<I", len(named))]
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        tag = _TAG_FOR_DTYPE.get(arr.dtype)
        if tag is None:
            raise ValueError(f"unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def unpack_array_table(buf: bytes, offset: int = 0):
    """Inverse of pack_array_table; returns (mapping, new_offset)."""
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    named = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag, rank = struct.unpack_from("<BB", buf, offset)
        offset += 2
        dims = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        dtype = np.dtype(_DTYPE_TAGS[tag]).newbyteorder("<")
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(buf[offset:offset + n_bytes], dtype=dtype).reshape(dims)
        offset += n_bytes
        named[name] = arr.astype(np.dtype(_DTYPE_TAGS[tag]))
    return named, offset
