"""Minimal dense tensor library with reverse-mode differentiation.

Only the fixed operation set needed by the multi-task models lives here:
2-D convolution (stride/padding/dilation), pointwise relu/add/scale, dense
linear layers, global average pooling, bilinear upsampling and per-pixel
channel normalization.  Arrays are row-major numpy buffers; image tensors
are ordered (batch, channel, height, width).

A ``Tensor`` wraps a numpy array plus an optional backward closure.  Ops
build a DAG of tensors; ``Tensor.backward()`` topologically sorts it and
visits every node exactly once, accumulating gradients into the ``.grad``
of leaves that require them.  There is no broadcasting beyond what each op
defines explicitly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense array node in the autodiff tape.

    Leaf tensors created with ``requires_grad=True`` act as parameters:
    after ``loss.backward()`` their ``.grad`` holds d(loss)/d(leaf), with
    the same shape and dtype as the leaf.  Gradients accumulate across
    backward calls until ``zero_grad`` resets them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Raises ``ShapeError`` if this tensor is not a scalar (shape ``()``).
        """
        if self.data.shape != ():
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None:
                        continue
                    existing = grads.get(id(parent))
                    if existing is None:
                        grads[id(parent)] = pg
                    else:
                        # out-of-place: ops may return aliased arrays for
                        # repeated parents (e.g. add(x, x))
                        grads[id(parent)] = existing + pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order of the DAG below ``root`` (iterative)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def gradients(loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of ``loss`` w.r.t. each leaf, from a fresh backward pass."""
    for leaf in leaves:
        leaf.zero_grad()
    loss.backward()
    return [
        leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int,
                   dilation: int) -> tuple[int, int]:
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            ho: int, wo: int) -> np.ndarray:
    """(B,C,Hp,Wp) -> (C*kh*kw, B*ho*wo) patch matrix (single-GEMM layout)."""
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, b, ho, wo),
        strides=(sc, dilation * sh, dilation * sw, sb, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(c * kh * kw, b * ho * wo)


def conv2d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
               stride: int = 1, padding: int = 0, dilation: int = 1) -> np.ndarray:
    """Forward-only cross-correlation on raw arrays (shared with inference)."""
    out, _, _ = _conv2d_forward(x, w, b, stride, padding, dilation)
    return out


def _conv2d_forward(x, w, b, stride, padding, dilation):
    bsz, c, h, wdt = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(
            f"conv2d: input has {c} channels but weight expects {cw} "
            f"(input {x.shape}, weight {w.shape})"
        )
    if stride < 1 or dilation < 1:
        raise ValueError(f"conv2d: stride/dilation must be >= 1, got {stride}/{dilation}")
    ho, wo = conv_output_hw(h, wdt, kh, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d: non-positive output size {ho}x{wo} for input {h}x{wdt}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}, dilation {dilation}"
        )
    if padding:
        xp = np.zeros((bsz, c, h + 2 * padding, wdt + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + wdt] = x
    else:
        xp = x
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    out = np.matmul(w.reshape(f, -1), cols).reshape(f, bsz, ho, wo).swapaxes(0, 1)
    if b is not None:
        out = out + b[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)
    return out, cols, xp.shape


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of (B,C,H,W) input with (F,C,Kh,Kw) weight."""
    out, cols, padded_shape = _conv2d_forward(
        x.data, w.data, None if b is None else b.data, stride, padding, dilation
    )
    f, _, kh, kw = w.shape
    bsz, _, ho, wo = out.shape
    need_gx = x.requires_grad or x._backward is not None

    def backward(go: np.ndarray):
        go_flat = go.transpose(1, 0, 2, 3).reshape(f, bsz * ho * wo)
        gw = np.matmul(go_flat, cols.T).reshape(w.shape)
        gx = None
        if need_gx:
            gcols = np.matmul(w.data.reshape(f, -1).T, go_flat)
            gxp = np.zeros(padded_shape, dtype=go.dtype)
            g6 = gcols.reshape(x.shape[1], kh, kw, bsz, ho, wo)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :,
                        i * dilation:i * dilation + stride * ho:stride,
                        j * dilation:j * dilation + stride * wo:stride] \
                        += g6[:, i, j].swapaxes(0, 1)
            if padding:
                gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
            else:
                gx = gxp
        gb = None if b is None else go.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient at 0 is 0."""
    out = np.maximum(x.data, 0)

    def backward(go):
        return (go * (x.data > 0),)

    return _node(out, (x,), backward, "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise sum of equal-shape tensors (residual connections)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(go):
        return go, go

    return _node(a.data + b.data, (a, b), backward, "add")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    factor = float(factor)

    def backward(go):
        return (go * factor,)

    return _node(x.data * factor, (x,), backward, "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise product of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(go):
        return go * b.data, go * a.data

    return _node(a.data * b.data, (a, b), backward, "mul")


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    def backward(go):
        return (np.full(x.shape, go, dtype=x.dtype),)

    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum_all")


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale-shift on (B,C,H,W); the unregularized stand-in for
    normalization layers."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"channel_affine: expected ({c},) scale/shift, got {gamma.shape}/{beta.shape}"
        )
    out = x.data * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(go):
        gx = go * gamma.data[None, :, None, None]
        ggamma = (go * x.data).sum(axis=(0, 2, 3))
        gbeta = go.sum(axis=(0, 2, 3))
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), backward, "channel_affine")


# ---------------------------------------------------------------------------
# dense layers and pooling
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(B,D) @ (O,D)^T + (O,)."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"linear: input dim {x.shape[1]} != weight dim {w.shape[1]}"
        )
    out = x.data @ w.data.T + b.data

    def backward(go):
        return go @ w.data, go.T @ x.data, go.sum(axis=0)

    return _node(out, (x, w, b), backward, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C) spatial mean per channel."""
    _, _, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    inv = 1.0 / (h * w)

    def backward(go):
        return (np.broadcast_to(go[:, :, None, None] * inv, x.shape).astype(go.dtype),)

    return _node(out, (x,), backward, "global_avg_pool")


_INTERP_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """(n_out, n_in) bilinear weights, align-corners-false convention."""
    key = (n_in, n_out, np.dtype(dtype).str)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    mat = np.zeros((n_out, n_in), dtype=dtype)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    _INTERP_CACHE[key] = mat
    return mat


def bilinear_upsample(x: Tensor, target_hw: tuple[int, int]) -> Tensor:
    """Resize (B,C,h,w) to (B,C,H,W) with H >= h, W >= w."""
    th, tw = target_hw
    _, _, h, w = x.shape
    if th <= 0 or tw <= 0:
        raise ShapeError(f"bilinear_upsample: degenerate target {target_hw}")
    if th < h or tw < w:
        raise ShapeError(f"bilinear_upsample: target {target_hw} smaller than input {h}x{w}")
    rows = _interp_matrix(h, th, x.dtype)
    cols = _interp_matrix(w, tw, x.dtype)
    out = np.matmul(np.matmul(rows[None, None], x.data), cols.T[None, None])

    def backward(go):
        return (np.matmul(np.matmul(rows.T[None, None], go), cols[None, None]),)

    return _node(out, (x,), backward, "bilinear_upsample")


def bilinear_upsample_raw(x: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    rows = _interp_matrix(x.shape[2], target_hw[0], x.dtype)
    cols = _interp_matrix(x.shape[3], target_hw[1], x.dtype)
    return np.matmul(np.matmul(rows[None, None], x), cols.T[None, None])


def channel_l2_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each pixel's channel vector of (B,C,H,W) to unit L2 norm.

    Norms below ``eps`` are floored at ``eps`` (treated as constant in the
    backward pass), keeping gradients finite for near-zero vectors.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward(go):
        inv = 1.0 / denom
        gx = go * inv
        active = norm > eps
        dot = (go * x.data).sum(axis=1, keepdims=True)
        gx -= np.where(active, x.data * dot * inv ** 3, 0)
        return (gx,)

    return _node(out, (x,), backward, "channel_l2_normalize")


def channel_l2_normalize_raw(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norm, eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the leaf ``x`` to a scalar tensor.  Per-coordinate error is
    |analytic - numeric| / max(1, |numeric|); the max over coordinates is
    returned.  Run in float64 for meaningful tolerances.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x.zero_grad()
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + epsilon
        hi = float(f(x).data)
        flat[j] = orig - epsilon
        lo = float(f(x).data)
        flat[j] = orig
        numeric[j] = (hi - lo) / (2 * epsilon)
    numeric = numeric.reshape(x.data.shape)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
