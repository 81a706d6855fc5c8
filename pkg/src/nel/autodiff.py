"""Reverse-mode automatic differentiation on rank-4 arrays.

Every value in the engine is a dense (batch, channel, height, width) array in
float32 or float64.  Ops build a graph of closures; ``Tensor.backward`` walks
it once in reverse topological order and accumulates gradients into ``.grad``.
There is no broadcasting: elementwise ops require identical shapes, and the
only shape-changing ops are the explicit structural ones (conv2d, maxpool2,
upsample2, concat_channels, reductions).

Design points that matter downstream:

* conv2d is cross-correlation (kernels are not flipped) with zero padding and
  an exact output-size contract: (H + 2*pad - k) must divide by stride.
* The production conv path lowers to one GEMM via stride tricks.  A naive
  directly-indexed implementation stays live as ``impl="reference"`` and the
  two are compared in tests.  They agree to rounding, not bitwise, because
  their summation orders differ.
* maxpool2 breaks ties by the lowest linear index inside each 2x2 block.
* upsample2 is bilinear on the half-pixel grid (align_corners=False) with
  clamped borders; its backward is the exact adjoint of the forward, so the
  op is exactly linear and finite differences match it to rounding error.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    DTypeError,
    GeometryError,
    GraphStateError,
)

_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))

_DTYPE_ALIASES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run the block forward-only: ops inside build no graph."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def grad_enabled() -> bool:
    return _grad_enabled


def _coerce(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        if dtype in _DTYPE_ALIASES:
            dtype = _DTYPE_ALIASES[dtype]
        arr = arr.astype(np.dtype(dtype), copy=False)
    elif arr.dtype not in _ALLOWED:
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        else:
            raise DTypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.dtype not in _ALLOWED:
        raise DTypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim != 4:
        raise DimensionError(f"tensors are rank-4 (batch, channel, height, width); got rank {arr.ndim}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A rank-4 array plus an optional backward closure.

    Leaves are created directly; op outputs carry ``_backprop``, a closure
    mapping the output gradient to one gradient per parent (or None for a
    parent that does not need one).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_consumed", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backprop = None
        self._consumed = False
        self._op = "leaf"

    # -- introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad over the whole graph.

        self must be a single-element tensor.  A graph can be walked once;
        a second backward through any already-walked node raises.
        """
        if self.data.size != 1:
            raise ContractError("backward() starts from a scalar (single-element) tensor")
        if not self.requires_grad:
            raise GraphStateError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # Leaves are shared between graphs (parameters), so only interior
        # nodes carry the walked-once flag.
        for node in order:
            if node._consumed and node._backprop is not None:
                raise GraphStateError("backward() called twice through the same graph")

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is None:
                continue
            node._consumed = True
            if node.grad is None:
                continue
            pgrads = node._backprop(node.grad)
            for parent, g in zip(node._parents, pgrads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.dtype, copy=True)
                else:
                    parent.grad += g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# op construction helpers


def _result(data: np.ndarray, parents: tuple, backprop, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backprop = backprop
    else:
        out.requires_grad = False
        out._parents = ()
        out._backprop = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise DTypeError(f"{op}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b.  The caller guarantees b is nonzero."""
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backprop(g):
        ga = g / bd
        gb = -g * out / bd
        return ga, gb

    return _result(out, (a, b), backprop, "div")


def add_scalar(a: Tensor, c: float) -> Tensor:
    cv = a.dtype.type(c)
    return _result(a.data + cv, (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    cv = a.dtype.type(c)
    return _result(a.data * cv, (a,), lambda g: (g * cv,), "mul_scalar")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (g * (2.0 * ad),), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    v = a.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor) -> Tensor:
    out = np.array(a.data.sum(), dtype=a.dtype).reshape(1, 1, 1, 1)
    shape = a.shape
    return _result(out, (a,), lambda g: (np.full(shape, g.reshape(-1)[0], dtype=g.dtype),), "sum")


def reduce_mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    out = np.array(a.data.mean(), dtype=a.dtype).reshape(1, 1, 1, 1)
    shape = a.shape

    def backprop(g):
        return (np.full(shape, g.reshape(-1)[0] / g.dtype.type(n), dtype=g.dtype),)

    return _result(out, (a,), backprop, "mean")


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, pad: int):
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise GeometryError(f"pad must be >= 0, got {pad}")
    if x.dtype != weight.dtype or (bias is not None and bias.dtype != x.dtype):
        raise DTypeError("conv2d: input, weight and bias must share one dtype")
    B, C, H, W = x.shape
    OC, IC, KH, KW = weight.shape
    if KH != KW:
        raise GeometryError(f"conv2d kernels are square, got {KH}x{KW}")
    if IC != C:
        raise DimensionError(f"conv2d: weight expects {IC} input channels, tensor has {C}")
    if bias is not None and bias.shape != (1, OC, 1, 1):
        raise DimensionError(f"conv2d: bias shape must be (1, {OC}, 1, 1), got {bias.shape}")
    span_h = H + 2 * pad - KH
    span_w = W + 2 * pad - KW
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise GeometryError(
            f"conv2d geometry: input {H}x{W}, kernel {KH}, pad {pad}, stride {stride} "
            "does not produce an exact output size"
        )
    return B, C, H, W, OC, KH, span_h // stride + 1, span_w // stride + 1


def _im2col(xd: np.ndarray, k: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    """Lower padded input windows to a (B*OH*OW, C*k*k) matrix."""
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    B, C = xd.shape[0], xd.shape[1]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * oh * ow, C * k * k)
    return np.ascontiguousarray(cols)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    impl: str = "fast",
) -> Tensor:
    """2-D cross-correlation with zero padding.

    weight is (out_channels, in_channels, k, k); bias, if given, is
    (1, out_channels, 1, 1).  impl="fast" runs the im2col/GEMM path,
    impl="reference" runs a plain quadruple loop (same math, different
    summation order); both share the analytic backward.
    """
    B, C, H, W, OC, K, OH, OW = _conv_geometry(x, weight, bias, stride, pad)
    xd, wd = x.data, weight.data

    if impl == "fast":
        cols = _im2col(xd, K, stride, pad, OH, OW)
        out2 = cols @ wd.reshape(OC, C * K * K).T
        out = np.ascontiguousarray(out2.reshape(B, OH, OW, OC).transpose(0, 3, 1, 2))
        if bias is not None:
            out += bias.data
    elif impl == "reference":
        out = _conv_forward_reference(xd, wd, None if bias is None else bias.data, stride, pad, OH, OW)
    else:
        raise ContractError(f"conv2d impl must be 'fast' or 'reference', got {impl!r}")

    need_x = x.requires_grad
    need_w = weight.requires_grad
    need_b = bias is not None and bias.requires_grad

    def backprop(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * OH * OW, OC)
        gx = gw = gb = None
        if need_w:
            cols_b = _im2col(xd, K, stride, pad, OH, OW)
            gw = (g2.T @ cols_b).reshape(OC, C, K, K)
        if need_b:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, OC, 1, 1)
        if need_x:
            gcols = (g2 @ wd.reshape(OC, C * K * K)).reshape(B, OH, OW, C, K, K)
            HP, WP = H + 2 * pad, W + 2 * pad
            gxp = np.zeros((B, C, HP, WP), dtype=g.dtype)
            for ki in range(K):
                for kj in range(K):
                    gxp[:, :, ki : ki + stride * OH : stride, kj : kj + stride * OW : stride] += (
                        gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _result(out, parents, lambda g: backprop(g)[:2], "conv2d")
    return _result(out, parents, backprop, "conv2d")


def _conv_forward_reference(xd, wd, bd, stride, pad, oh, ow):
    """Naive directly indexed cross-correlation.  Slow; kept as a live oracle."""
    B, C, _, _ = xd.shape
    OC, _, K, _ = wd.shape
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((B, OC, oh, ow), dtype=xd.dtype)
    for b in range(B):
        for oc in range(OC):
            for i in range(oh):
                for j in range(ow):
                    acc = xd.dtype.type(0)
                    for c in range(C):
                        for ki in range(K):
                            for kj in range(K):
                                acc += xd[b, c, i * stride + ki, j * stride + kj] * wd[oc, c, ki, kj]
                    out[b, oc, i, j] = acc
    if bd is not None:
        out += bd
    return out


# ---------------------------------------------------------------------------
# pooling / upsampling / concat


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties go to the lowest linear index."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise GeometryError(f"maxpool2 needs even height and width, got {H}x{W}")
    OH, OW = H // 2, W // 2
    v = x.data.reshape(B, C, OH, 2, OW, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, OH, OW, 4)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def backprop(g):
        gv = np.zeros((B, C, OH, OW, 4), dtype=g.dtype)
        np.put_along_axis(gv, idx[..., None], g[..., None], axis=-1)
        gx = gv.reshape(B, C, OH, OW, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (np.ascontiguousarray(gx),)

    return _result(out, (x,), backprop, "maxpool2")


def _up2_axis(a: np.ndarray) -> np.ndarray:
    """Double the last axis by bilinear interpolation on the half-pixel grid.

    out[2i]   = 0.25*a[i-1] + 0.75*a[i]   (clamped at i=0)
    out[2i+1] = 0.75*a[i]   + 0.25*a[i+1] (clamped at i=n-1)
    """
    left = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    right = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    even = 0.25 * left + 0.75 * a
    odd = 0.75 * a + 0.25 * right
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = even
    out[..., 1::2] = odd
    return out


def _up2_axis_adjoint(g: np.ndarray) -> np.ndarray:
    """Exact adjoint of _up2_axis along the last axis (size 2n -> n)."""
    ge = g[..., 0::2]
    go = g[..., 1::2]
    gx = 0.75 * (ge + go)
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., 0] += 0.25 * ge[..., 0]
    gx[..., -1] += 0.25 * go[..., -1]
    return gx


def upsample2(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling, half-pixel grid, clamped borders."""
    B, C, H, W = x.shape
    if H < 1 or W < 1:
        raise GeometryError("upsample2 needs a non-empty spatial extent")
    rows = _up2_axis(np.ascontiguousarray(x.data.transpose(0, 1, 3, 2)))  # double H (moved last)
    out = _up2_axis(np.ascontiguousarray(rows.transpose(0, 1, 3, 2)))  # double W

    def backprop(g):
        gr = _up2_axis_adjoint(g)  # undo W doubling
        gx = _up2_axis_adjoint(np.ascontiguousarray(gr.transpose(0, 1, 3, 2)))
        return (np.ascontiguousarray(gx.transpose(0, 1, 3, 2)),)

    return _result(np.ascontiguousarray(out), (x,), backprop, "upsample2")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis.  Batch, spatial sizes and dtype must match."""
    if not tensors:
        raise ContractError("concat_channels needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        if t.dtype != first.dtype:
            raise DTypeError("concat_channels: dtype mismatch")
        if (t.shape[0], t.shape[2], t.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise DimensionError(f"concat_channels: incompatible shapes {first.shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = [t.shape[1] for t in tensors]

    def backprop(g):
        grads = []
        start = 0
        for t, c in zip(tensors, splits):
            grads.append(np.ascontiguousarray(g[:, start : start + c]) if t.requires_grad else None)
            start += c
        return tuple(grads)

    return _result(out, tuple(tensors), backprop, "concat")


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    eps: float = 1e-5,
    max_checks_per_input: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Compare analytic gradients of the scalar f() against central differences.

    f is re-evaluated with elements of each tensor in wrt perturbed in place;
    use float64 tensors for trustworthy numbers.  When max_checks_per_input is
    set, a deterministic sample of that many elements per tensor is tested
    instead of every element.  Returns the worst relative error
    |analytic - numeric| / max(|analytic|, |numeric|, floor); raise the floor
    when f is deep enough that cancellation noise in the central difference
    exceeds floor * tolerance.
    """
    for t in wrt:
        if not t.requires_grad:
            raise ContractError("grad_check: every tensor in wrt must require grad")
    zero_grads(list(wrt))
    out = f()
    if out.data.size != 1:
        raise ContractError("grad_check: f() must return a single-element tensor")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, ana in zip(wrt, analytic):
            flat = t.data.reshape(-1)
            n = flat.size
            if max_checks_per_input is not None and n > max_checks_per_input:
                picks = np.sort(rng.choice(n, size=max_checks_per_input, replace=False))
            else:
                picks = np.arange(n)
            aflat = ana.reshape(-1)
            for i in picks:
                saved = flat[i]
                flat[i] = saved + eps
                fp = f().item()
                flat[i] = saved - eps
                fm = f().item()
                flat[i] = saved
                numeric = (fp - fm) / (2.0 * eps)
                err = abs(numeric - float(aflat[i])) / max(abs(numeric), abs(float(aflat[i])), floor)
                if err > worst:
                    worst = err
    return worst
