"""Minimal dense-tensor engine with hand-written backward passes.

Exactly the operations the fusion projectors need, nothing more: exact-cover
convolution, GeLU, channel concatenation, 2x2 average pooling, token
reshaping, space-to-depth, and a squared-error loss. Values are stored as
contiguous float32 in row-major layout with the channel axis fastest;
reductions accumulate in float64 before the result is cast back.

Gradients are recorded define-by-run: an op whose inputs require gradients
attaches a backward closure to its output. ``Tensor.backward`` replays the
recorded graph in reverse topological order, carrying float64 gradients the
whole way, and accumulates (+=) into the float32 ``grad`` buffers with a
single final cast. Buffers need explicit zeroing between batches.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DivisibilityError, GraphError, ShapeMismatchError

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# Pre-activation value where the GeLU derivative crosses zero. Finite
# difference probes taken exactly there are numerically meaningless, so the
# gradcheck harness rejects inputs that land pre-activations on it.
GELU_FLAT_POINT = -0.751791524694


class Tensor:
    """Dense float32 array, at most 4 axes, with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim > 4:
            raise ShapeMismatchError(
                f"tensors support at most 4 axes, got {arr.ndim} (shape {arr.shape})"
            )
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(np.float32, copy=False)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self, output_grad: np.ndarray | float | None = None) -> None:
        """Propagate ``output_grad`` (default: ones) through the recorded graph.

        Gradients accumulate into the ``grad`` buffer of every tensor in the
        graph that requires them. Raises ``GraphError`` when called on a
        tensor with no recorded forward behind it.
        """
        if self._backward is None:
            raise GraphError(
                "backward called before a recorded forward; this tensor is not "
                "the output of a gradient-tracked operation"
            )
        if output_grad is None:
            seed = np.ones(self.data.shape, dtype=np.float64)
        else:
            seed = np.broadcast_to(
                np.asarray(output_grad, dtype=np.float64), self.data.shape
            ).copy()

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.accumulate_grad(g)
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not (parent.requires_grad or parent._parents):
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg


def _tracked(parents: Sequence[Tensor]) -> bool:
    return any(p.requires_grad or p._parents for p in parents)


def _record(out: Tensor, parents: Sequence[Tensor], backward) -> Tensor:
    if _tracked(parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Exact-cover cross-correlation: kernel k x k applied with stride k.

    ``x`` is H x W x Cin, ``weight`` is k x k x Cin x Cout, ``bias`` is a
    Cout vector. No padding exists; the kernel must tile the input exactly
    (the 1x1 stride-1 case is the k=1 instance). The dot products accumulate
    in float64 and the H/k x W/k x Cout result is stored as float32.
    """
    if x.ndim != 3:
        raise ShapeMismatchError(f"conv2d input must be H x W x C, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d weight must be k x k x Cin x Cout, got shape {weight.shape}"
        )
    H, W, Cin = x.shape
    kh, kw, wcin, Cout = weight.shape
    if kh != kw:
        raise ShapeMismatchError(f"kernel must be square, got {kh} x {kw}")
    k = kh
    if wcin != Cin:
        raise ShapeMismatchError(
            f"channel axis mismatch: input has {Cin} channels, weight expects {wcin}"
        )
    if bias.ndim != 1 or bias.shape[0] != Cout:
        raise ShapeMismatchError(
            f"bias must be a vector of length {Cout}, got shape {bias.shape}"
        )
    if k > H or k > W:
        raise ShapeMismatchError(
            f"kernel {k} x {k} does not fit input {H} x {W}"
        )
    if stride != k:
        raise ShapeMismatchError(
            f"engine supports exact-cover convolutions only: a {k} x {k} kernel "
            f"requires stride {k}, got {stride}"
        )
    if H % stride != 0:
        raise DivisibilityError(f"stride {stride} does not divide height {H}")
    if W % stride != 0:
        raise DivisibilityError(f"stride {stride} does not divide width {W}")

    Ho, Wo = H // k, W // k
    P = Ho * Wo
    # Disjoint windows make im2col a pure rearrangement: (Ho,k,Wo,k,C) ->
    # (Ho,Wo,k,k,C) -> (P, k*k*Cin), matching the weight's flattened layout.
    cols = (
        x.data.reshape(Ho, k, Wo, k, Cin)
        .transpose(0, 2, 1, 3, 4)
        .reshape(P, k * k * Cin)
    )
    wmat = weight.data.reshape(k * k * Cin, Cout)
    out64 = cols.astype(np.float64) @ wmat.astype(np.float64)
    out64 += bias.data.astype(np.float64)
    out = Tensor(out64.astype(np.float32).reshape(Ho, Wo, Cout))

    def backward(g: np.ndarray):
        gm = g.reshape(P, Cout).astype(np.float64)
        dcols = gm @ wmat.astype(np.float64).T
        dx = (
            dcols.reshape(Ho, Wo, k, k, Cin)
            .transpose(0, 2, 1, 3, 4)
            .reshape(H, W, Cin)
        )
        dw = (cols.astype(np.float64).T @ gm).reshape(k, k, Cin, Cout)
        db = gm.sum(axis=0)
        return ((x, dx), (weight, dw), (bias, db))

    return _record(out, (x, weight, bias), backward)


def _gelu64(x64: np.ndarray) -> np.ndarray:
    return 0.5 * x64 * (1.0 + erf(x64 * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of exact GeLU: Phi(x) + x * phi(x), evaluated in float64."""
    x64 = np.asarray(x, dtype=np.float64)
    Phi = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    phi = np.exp(-0.5 * x64 * x64) * _INV_SQRT2PI
    return Phi + x64 * phi


def gelu(x: Tensor) -> Tensor:
    """Elementwise x * Phi(x) with the exact Gaussian CDF (erf-based)."""
    x64 = x.data.astype(np.float64)
    out = Tensor(_gelu64(x64).astype(np.float32))

    def backward(g: np.ndarray):
        dx = g.astype(np.float64) * gelu_grad(x64)
        return ((x, dx),)

    return _record(out, (x,), backward)


def identity(x: Tensor) -> Tensor:
    """No-op activation, used by test harnesses to bypass GeLU."""
    return x


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate H x W x Ci maps along the channel axis, in argument order."""
    if not inputs:
        raise ShapeMismatchError("concat_channels requires at least one input")
    first = inputs[0]
    if first.ndim != 3:
        raise ShapeMismatchError(
            f"concat_channels inputs must be H x W x C, got shape {first.shape}"
        )
    H, W = first.shape[:2]
    for i, t in enumerate(inputs[1:], start=1):
        if t.ndim != 3 or t.shape[0] != H or t.shape[1] != W:
            raise ShapeMismatchError(
                f"input {i} has spatial extents {t.shape[:2]}, expected ({H}, {W})"
            )
    widths = [t.shape[2] for t in inputs]
    out = Tensor(np.concatenate([t.data for t in inputs], axis=2))

    def backward(g: np.ndarray):
        pieces = np.split(g, np.cumsum(widths)[:-1], axis=2)
        return tuple((t, p) for t, p in zip(inputs, pieces))

    return _record(out, tuple(inputs), backward)


def avgpool2x2(x: Tensor) -> Tensor:
    """Mean of each disjoint 2x2 window; H and W must be even."""
    if x.ndim != 3:
        raise ShapeMismatchError(f"avgpool2x2 input must be H x W x C, got {x.shape}")
    H, W, C = x.shape
    if H % 2 != 0:
        raise DivisibilityError(f"height {H} is odd; 2x2 pooling needs even extents")
    if W % 2 != 0:
        raise DivisibilityError(f"width {W} is odd; 2x2 pooling needs even extents")
    windows = x.data.reshape(H // 2, 2, W // 2, 2, C).astype(np.float64)
    out = Tensor(windows.mean(axis=(1, 3)).astype(np.float32))

    def backward(g: np.ndarray):
        dx = np.repeat(np.repeat(g * 0.25, 2, axis=0), 2, axis=1)
        return ((x, dx),)

    return _record(out, (x,), backward)


def space_to_depth(x: Tensor, k: int) -> Tensor:
    """Move each k x k spatial block into the channel axis, losslessly.

    Output channel order is window-position major, input channel fastest:
    out[y, x, (i*k + j)*C + c] == in[y*k + i, x*k + j, c].
    """
    if x.ndim != 3:
        raise ShapeMismatchError(f"space_to_depth input must be H x W x C, got {x.shape}")
    H, W, C = x.shape
    if H % k != 0:
        raise DivisibilityError(f"block size {k} does not divide height {H}")
    if W % k != 0:
        raise DivisibilityError(f"block size {k} does not divide width {W}")
    out = Tensor(
        x.data.reshape(H // k, k, W // k, k, C)
        .transpose(0, 2, 1, 3, 4)
        .reshape(H // k, W // k, k * k * C)
    )

    def backward(g: np.ndarray):
        dx = (
            g.reshape(H // k, W // k, k, k, C)
            .transpose(0, 2, 1, 3, 4)
            .reshape(H, W, C)
        )
        return ((x, dx),)

    return _record(out, (x,), backward)


def reshape_tokens(x: Tensor, splits: int) -> Tensor:
    """Split each position's channel vector into ``splits`` contiguous tokens.

    An H x W x C map becomes (H*W*splits) x (C/splits) tokens, emitted in
    row-major position order with the sub-token index fastest. For splits=1
    this is a pure flatten to H*W tokens of width C.
    """
    if x.ndim != 3:
        raise ShapeMismatchError(f"reshape_tokens input must be H x W x C, got {x.shape}")
    H, W, C = x.shape
    if C % splits != 0:
        raise DivisibilityError(
            f"token split {splits} does not divide channel width {C}"
        )
    out = Tensor(x.data.reshape(H * W * splits, C // splits))

    def backward(g: np.ndarray):
        return ((x, g.reshape(H, W, C)),)

    return _record(out, (x,), backward)


def squared_error(pred: Tensor, target: np.ndarray | float, reduction: str = "sum") -> Tensor:
    """Scalar sum (or mean) of squared differences, accumulated in float64."""
    tgt = np.broadcast_to(np.asarray(target, dtype=np.float32), pred.shape)
    diff = pred.data.astype(np.float64) - tgt.astype(np.float64)
    total = np.sum(diff * diff)
    if reduction == "mean":
        scale = 1.0 / diff.size
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = Tensor(np.float32(total * scale))

    def backward(g: np.ndarray):
        dp = 2.0 * scale * float(np.asarray(g).ravel()[0]) * diff
        return ((pred, dp),)

    return _record(out, (pred,), backward)
