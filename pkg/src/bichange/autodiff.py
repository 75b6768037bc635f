"""Dense float64 tensor primitives with exact reverse-mode gradients.

Values are plain C-contiguous ``numpy.float64`` arrays.  All differentiable
computation goes through an explicit, append-only :class:`Graph`: every
primitive appends one node (or a short fixed chain of nodes) in construction
order, and ``backward`` walks the node list in strict reverse order, so the
gradient of a given program is fully deterministic.

Conventions fixed here and relied on by golden tests elsewhere:

* convolution is cross-correlation (no kernel flip),
* transposed convolution is the stride-aware scatter adjoint of conv2d,
* bilinear resizing uses the align-corners-false coordinate rule
  ``src = (dst + 0.5) * in_size / out_size - 0.5`` with edge clamping,
* gelu is the exact Gaussian-CDF form, never the tanh approximation,
* every node value is checked finite on creation; a NaN/Inf raises
  instead of propagating.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Node",
    "Graph",
    "as_tensor",
]

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array and reject non-finite values."""
    arr = np.asarray(x, dtype=np.float64, order="C")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("input tensor contains NaN or Inf")
    return arr


class Node:
    """One graph entry: a value plus the rule for pushing gradients back."""

    __slots__ = ("value", "parents", "vjp", "op", "param_name")

    def __init__(self, value, parents, vjp, op, param_name=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.param_name = param_name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Graph:
    """Append-only computation graph over float64 arrays.

    Nodes are visited in construction order on the forward pass (they are
    built eagerly) and in exact reverse construction order by
    :meth:`backward`.  Learnable leaves are registered with
    :meth:`parameter` under unique names; everything else enters through
    :meth:`constant`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # -- leaves ----------------------------------------------------------

    def parameter(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already bound")
        node = self._append(as_tensor(value), (), None, "parameter", name)
        self.params[name] = node
        return node

    def constant(self, value) -> Node:
        return self._append(as_tensor(value), (), None, "constant")

    def _append(self, value, parents, vjp, op, param_name=None) -> Node:
        value = np.asarray(value, dtype=np.float64, order="C")
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"primitive {op!r} produced NaN or Inf")
        node = Node(value, parents, vjp, op, param_name)
        self.nodes.append(node)
        return node

    # -- elementwise -----------------------------------------------------

    def _binary(self, a: Node, b: Node, op: str):
        if a.value.shape != b.value.shape and a.value.shape != () and b.value.shape != ():
            raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")

    @staticmethod
    def _unbroadcast(g, shape):
        # reduce a gradient on the broadcast result back to a scalar operand
        if shape == ():
            return np.asarray(g.sum())
        return g

    def add(self, a: Node, b: Node) -> Node:
        self._binary(a, b, "add")
        def vjp(g):
            return self._unbroadcast(g, a.shape), self._unbroadcast(g, b.shape)
        return self._append(a.value + b.value, (a, b), vjp, "add")

    def sub(self, a: Node, b: Node) -> Node:
        self._binary(a, b, "sub")
        def vjp(g):
            return self._unbroadcast(g, a.shape), self._unbroadcast(-g, b.shape)
        return self._append(a.value - b.value, (a, b), vjp, "sub")

    def mul(self, a: Node, b: Node) -> Node:
        self._binary(a, b, "mul")
        def vjp(g):
            return (self._unbroadcast(g * b.value, a.shape),
                    self._unbroadcast(g * a.value, b.shape))
        return self._append(a.value * b.value, (a, b), vjp, "mul")

    def div(self, a: Node, b: Node) -> Node:
        self._binary(a, b, "div")
        def vjp(g):
            return (self._unbroadcast(g / b.value, a.shape),
                    self._unbroadcast(-g * a.value / (b.value * b.value), b.shape))
        return self._append(a.value / b.value, (a, b), vjp, "div")

    def scale(self, x: Node, c: float) -> Node:
        c = float(c)
        return self._append(x.value * c, (x,), lambda g: (g * c,), "scale")

    def shift(self, x: Node, c: float) -> Node:
        return self._append(x.value + float(c), (x,), lambda g: (g,), "shift")

    def absval(self, x: Node) -> Node:
        sign = np.sign(x.value)
        return self._append(np.abs(x.value), (x,), lambda g: (g * sign,), "abs")

    def relu(self, x: Node) -> Node:
        mask = x.value > 0.0
        return self._append(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")

    def sigmoid(self, x: Node) -> Node:
        v = x.value
        y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                     np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
        return self._append(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def gelu(self, x: Node) -> Node:
        v = x.value
        cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
        y = v * cdf
        pdf = np.exp(-0.5 * v * v) * _INV_SQRT_2PI
        return self._append(y, (x,), lambda g: (g * (cdf + v * pdf),), "gelu")

    def sqrt(self, x: Node) -> Node:
        y = np.sqrt(x.value)
        return self._append(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")

    # -- softmax family (last axis) ---------------------------------------

    def softmax(self, x: Node) -> Node:
        v = x.value
        if v.shape[-1] < 1:
            raise ShapeError("softmax: empty last axis")
        z = v - v.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        def vjp(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
        return self._append(y, (x,), vjp, "softmax")

    def log_softmax(self, x: Node) -> Node:
        v = x.value
        z = v - v.max(axis=-1, keepdims=True)
        y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        def vjp(g):
            return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)
        return self._append(y, (x,), vjp, "log_softmax")

    # -- linear algebra ---------------------------------------------------

    def linear(self, x: Node, w: Node, b: Node | None = None) -> Node:
        """y = x @ w.T (+ b) over the trailing axis; w is [C_out, C_in]."""
        if x.value.shape[-1] != w.value.shape[1]:
            raise ShapeError(
                f"linear: input trailing dim {x.value.shape[-1]} != C_in {w.value.shape[1]}")
        y = x.value @ w.value.T
        if b is not None:
            if b.value.shape != (w.value.shape[0],):
                raise ShapeError("linear: bias shape mismatch")
            y = y + b.value
        def vjp(g):
            gx = g @ w.value
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.value.reshape(-1, x.value.shape[-1])
            gw = g2.T @ x2
            if b is None:
                return gx, gw
            return gx, gw, g2.sum(axis=0)
        parents = (x, w) if b is None else (x, w, b)
        return self._append(y, parents, vjp, "linear")

    def matmul(self, a: Node, b: Node) -> Node:
        """Batched matmul on the trailing two axes; batch dims must match."""
        if a.value.shape[:-2] != b.value.shape[:-2] or a.value.shape[-1] != b.value.shape[-2]:
            raise ShapeError(f"matmul: {a.value.shape} @ {b.value.shape}")
        y = a.value @ b.value
        def vjp(g):
            return g @ np.swapaxes(b.value, -1, -2), np.swapaxes(a.value, -1, -2) @ g
        return self._append(y, (a, b), vjp, "matmul")

    # -- convolutions ------------------------------------------------------

    def conv2d(self, x: Node, k: Node, b: Node | None = None,
               stride: int = 1, padding: int = 0) -> Node:
        """Cross-correlation of [C_in,H,W] with [C_out,C_in,kh,kw]."""
        if stride < 1:
            raise ShapeError("conv2d: stride must be >= 1")
        c_in, h, w = x.value.shape
        c_out, kc, kh, kw = k.value.shape
        if kc != c_in:
            raise ShapeError(f"conv2d: kernel C_in {kc} != input channels {c_in}")
        if h + 2 * padding < kh or w + 2 * padding < kw:
            raise ShapeError("conv2d: kernel larger than padded input")
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (w + 2 * padding - kw) // stride + 1

        def im2col(arr):
            padded = np.pad(arr, ((0, 0), (padding, padding), (padding, padding)))
            cols = np.empty((c_in, kh, kw, ho, wo))
            for a in range(kh):
                for c in range(kw):
                    cols[:, a, c] = padded[:, a:a + (ho - 1) * stride + 1:stride,
                                           c:c + (wo - 1) * stride + 1:stride]
            return cols.reshape(c_in * kh * kw, ho * wo)

        k2 = k.value.reshape(c_out, c_in * kh * kw)
        y = (k2 @ im2col(x.value)).reshape(c_out, ho, wo)
        if b is not None:
            if b.value.shape != (c_out,):
                raise ShapeError("conv2d: bias shape mismatch")
            y = y + b.value[:, None, None]

        def vjp(g):
            # the column buffer is rebuilt here rather than retained, keeping
            # per-node memory at one output tensor
            cols2 = im2col(x.value)
            g2 = g.reshape(c_out, ho * wo)
            gk = (g2 @ cols2.T).reshape(c_out, c_in, kh, kw)
            gcols = (k2.T @ g2).reshape(c_in, kh, kw, ho, wo)
            gxp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
            for a in range(kh):
                for c in range(kw):
                    gxp[:, a:a + (ho - 1) * stride + 1:stride,
                        c:c + (wo - 1) * stride + 1:stride] += gcols[:, a, c]
            gx = gxp[:, padding:padding + h, padding:padding + w]
            if b is None:
                return gx, gk
            return gx, gk, g.sum(axis=(1, 2))

        parents = (x, k) if b is None else (x, k, b)
        return self._append(y, parents, vjp, "conv2d")

    def deconv2d(self, x: Node, k: Node, stride: int) -> Node:
        """Transposed convolution of [C_in,H,W] with [C_in,C_out,kh,kw].

        Output spatial size is (H-1)*stride + kh; forward is the scatter-add
        adjoint of conv2d's input gradient, so <conv2d(x,K), y> == <x, deconv2d(y,K')>
        holds for matching kernel layouts.
        """
        if stride < 1:
            raise ShapeError("deconv2d: stride must be >= 1")
        c_in, h, w = x.value.shape
        kc, c_out, kh, kw = k.value.shape
        if kc != c_in:
            raise ShapeError(f"deconv2d: kernel C_in {kc} != input channels {c_in}")
        ho = (h - 1) * stride + kh
        wo = (w - 1) * stride + kw
        y = np.zeros((c_out, ho, wo))
        for a in range(kh):
            for c in range(kw):
                y[:, a:a + (h - 1) * stride + 1:stride,
                  c:c + (w - 1) * stride + 1:stride] += np.einsum(
                      "chw,co->ohw", x.value, k.value[:, :, a, c])

        def vjp(g):
            gx = np.zeros_like(x.value)
            gk = np.zeros_like(k.value)
            for a in range(kh):
                for c in range(kw):
                    gs = g[:, a:a + (h - 1) * stride + 1:stride,
                           c:c + (w - 1) * stride + 1:stride]
                    gx += np.einsum("ohw,co->chw", gs, k.value[:, :, a, c])
                    gk[:, :, a, c] = np.einsum("chw,ohw->co", x.value, gs)
            return gx, gk

        return self._append(y, (x, k), vjp, "deconv2d")

    # -- resizing ----------------------------------------------------------

    @staticmethod
    def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
        m = np.zeros((n_out, n_in))
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w1 = src - i0
        m[np.arange(n_out), i0] += 1.0 - w1
        m[np.arange(n_out), i1] += w1
        return m

    def bilinear_resize(self, x: Node, out_h: int, out_w: int) -> Node:
        """Resize [C,H,W] to [C,out_h,out_w] (align-corners-false, clamped)."""
        if out_h < 1 or out_w < 1:
            raise ShapeError("bilinear_resize: target size must be >= 1")
        _, h, w = x.value.shape
        r = self._interp_matrix(out_h, h)
        c = self._interp_matrix(out_w, w)
        # y[c] = R @ x[c] @ C^T, dense interpolation matrices so the adjoint
        # is exactly the transposed product
        t = np.tensordot(r, x.value, axes=(1, 1)).transpose(1, 0, 2)
        y = t @ c.T
        def vjp(g):
            u = np.tensordot(r, g, axes=(0, 1)).transpose(1, 0, 2)
            return (u @ c,)
        return self._append(y, (x,), vjp, "bilinear_resize")

    # -- shape movement ----------------------------------------------------

    def reshape(self, x: Node, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        return self._append(x.value.reshape(shape), (x,),
                            lambda g: (g.reshape(x.value.shape),), "reshape")

    def transpose(self, x: Node, perm) -> Node:
        perm = tuple(perm)
        inv = tuple(np.argsort(perm))
        return self._append(x.value.transpose(perm), (x,),
                            lambda g: (g.transpose(inv),), "transpose")

    def concat(self, parts: list[Node], axis: int) -> Node:
        if not parts:
            raise ShapeError("concat: no operands")
        ref = list(parts[0].value.shape)
        for p in parts[1:]:
            s = list(p.value.shape)
            s[axis] = ref[axis]
            if s != ref:
                raise ShapeError("concat: non-axis dims differ")
        sizes = [p.value.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        def vjp(g):
            return tuple(np.ascontiguousarray(piece)
                         for piece in np.split(g, splits, axis=axis))
        return self._append(np.concatenate([p.value for p in parts], axis=axis),
                            tuple(parts), vjp, "concat")

    def concat_channels(self, a: Node, b: Node) -> Node:
        """Concatenate [C1,H,W] and [C2,H,W] along the channel axis."""
        if a.value.shape[1:] != b.value.shape[1:]:
            raise ShapeError(
                f"concat_channels: spatial shapes {a.value.shape[1:]} != {b.value.shape[1:]}")
        return self.concat([a, b], axis=0)

    def expand(self, x: Node, shape) -> Node:
        """Broadcast singleton axes of x up to `shape`; adjoint sums them back."""
        shape = tuple(int(s) for s in shape)
        if len(shape) != x.value.ndim:
            raise ShapeError("expand: rank mismatch")
        axes = []
        for i, (a, b) in enumerate(zip(x.value.shape, shape)):
            if a != b:
                if a != 1:
                    raise ShapeError(f"expand: axis {i} is {a}, target {b}")
                axes.append(i)
        axes = tuple(axes)
        def vjp(g):
            return (g.sum(axis=axes, keepdims=True) if axes else g,)
        return self._append(np.broadcast_to(x.value, shape).copy(), (x,), vjp, "expand")

    def take_rows(self, table: Node, indices: np.ndarray) -> Node:
        """Gather rows of `table` by an integer index array (scatter-add adjoint)."""
        idx = np.asarray(indices, dtype=np.int64)
        y = table.value[idx]
        def vjp(g):
            gt = np.zeros_like(table.value)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, *table.value.shape[1:]))
            return (gt,)
        return self._append(y, (table,), vjp, "take_rows")

    # -- reductions --------------------------------------------------------

    def reduce_sum(self, x: Node, axis=None, keepdims: bool = False) -> Node:
        if axis is not None and not isinstance(axis, tuple):
            axis = (axis,)
        y = x.value.sum(axis=axis, keepdims=keepdims)
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, x.value.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, x.value.shape).copy(),)
        return self._append(y, (x,), vjp, "reduce_sum")

    def reduce_mean(self, x: Node, axis=None, keepdims: bool = False) -> Node:
        if axis is None:
            n = x.value.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([x.value.shape[a] for a in ax]))
        return self.scale(self.reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)

    # -- composed map ------------------------------------------------------

    def cosine_map(self, a: Node, b: Node, eps: float = 1e-8) -> Node:
        """Per-pixel cosine similarity over the channel axis of [C,H,W] pairs."""
        if a.value.shape != b.value.shape:
            raise ShapeError("cosine_map: shapes differ")
        if eps <= 0:
            raise ValueError("cosine_map: eps must be > 0")
        num = self.reduce_sum(self.mul(a, b), axis=0)
        na = self.sqrt(self.shift(self.reduce_sum(self.mul(a, a), axis=0), 1e-300))
        nb = self.sqrt(self.shift(self.reduce_sum(self.mul(b, b), axis=0), 1e-300))
        return self.div(num, self.shift(self.mul(na, nb), eps))

    # -- backward ----------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss for every bound parameter.

        Visits nodes in strict reverse construction order; parameters not
        reachable from the loss get explicit zero gradients.
        """
        if loss.value.shape != ():
            raise ShapeError(f"backward: loss must be scalar, got {loss.value.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = {}
        for name, node in self.params.items():
            g = grads.get(id(node))
            out[name] = np.zeros_like(node.value) if g is None else np.asarray(g)
        return out


def bilinear_resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Graph-free bilinear resize of [C,H,W], same convention as the primitive."""
    x = as_tensor(x)
    r = Graph._interp_matrix(out_h, x.shape[1])
    c = Graph._interp_matrix(out_w, x.shape[2])
    return np.tensordot(r, x, axes=(1, 1)).transpose(1, 0, 2) @ c.T
