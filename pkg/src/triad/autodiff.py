"""Minimal reverse-mode autodiff over dense float64 arrays.

A ``Tensor`` wraps a NumPy array and remembers how it was produced; calling
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates gradients into every reachable tensor that has
``requires_grad=True``.  The op set is deliberately small: exactly what the
three-path trainer and its losses need, each with a hand-written adjoint.

All data is float64.  Forward evaluation is deterministic for fixed inputs;
there is no hidden state and no threading.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = ["Tensor", "GraphError", "as_tensor", "concat_rows"]

Array = np.ndarray


class GraphError(ValueError):
    """Raised for structurally invalid graph operations."""


def as_tensor(value) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (reverses NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Node in the autodiff graph: float64 data plus an optional adjoint."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    def _accumulate(self, grad: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    @staticmethod
    def _result(data: Array, parents: Sequence["Tensor"],
                backward: Callable[[Array], None]) -> "Tensor":
        out = Tensor(data)
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out._parents = tracked
            out._backward = backward
        return out

    # -- reverse pass -------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        The root must be a scalar.  Unreached tensors are left untouched, so
        callers that want explicit zeros should zero-initialise first.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward() root must be scalar, got shape {self.data.shape}")
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        data = self.data + other.data

        def bw(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return self._result(data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bw(g: Array) -> None:
            self._accumulate(-g)

        return self._result(-self.data, (self,), bw)

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        data = self.data * other.data

        def bw(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return self._result(data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        data = self.data / other.data

        def bw(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(
                    -g * self.data / (other.data * other.data),
                    other.data.shape))

        return self._result(data, (self, other), bw)

    def __pow__(self, exponent: float) -> "Tensor":
        exponent = float(exponent)
        if exponent == 0.0:
            # x**0 == 1 with zero gradient; avoids 0 * x**-1 at x == 0
            return Tensor(np.ones_like(self.data))
        data = self.data ** exponent

        def bw(g: Array) -> None:
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return self._result(data, (self,), bw)

    # -- linear algebra -----------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise GraphError("matmul expects two 2-D tensors, got "
                             f"{self.data.shape} @ {other.data.shape}")
        data = self.data @ other.data

        def bw(g: Array) -> None:
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return self._result(data, (self, other), bw)

    __matmul__ = matmul

    def t(self) -> "Tensor":
        if self.data.ndim != 2:
            raise GraphError(f"t() expects a 2-D tensor, got {self.data.shape}")

        def bw(g: Array) -> None:
            self._accumulate(g.T)

        return self._result(self.data.T.copy(), (self,), bw)

    def reshape(self, *shape: int) -> "Tensor":
        old = self.data.shape

        def bw(g: Array) -> None:
            self._accumulate(g.reshape(old))

        return self._result(self.data.reshape(*shape), (self,), bw)

    def take_rows(self, index) -> "Tensor":
        """Gather rows along axis 0; the adjoint scatter-adds them back."""
        index = np.asarray(index, dtype=np.intp)
        data = self.data[index]

        def bw(g: Array) -> None:
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            self._accumulate(full)

        return self._result(data, (self,), bw)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def bw(g: Array) -> None:
            gg = g
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for ax in sorted(a % len(shape) for a in axes):
                    gg = np.expand_dims(gg, ax)
            self._accumulate(np.broadcast_to(gg, shape))

        return self._result(data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities ----------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0.0

        def bw(g: Array) -> None:
            self._accumulate(g * mask)

        return self._result(self.data * mask, (self,), bw)

    def tanh(self) -> "Tensor":
        data = np.tanh(self.data)

        def bw(g: Array) -> None:
            self._accumulate(g * (1.0 - data * data))

        return self._result(data, (self,), bw)

    def sigmoid(self) -> "Tensor":
        # stable in both tails
        data = np.where(self.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(self.data))),
                        np.exp(-np.abs(self.data))
                        / (1.0 + np.exp(-np.abs(self.data))))

        def bw(g: Array) -> None:
            self._accumulate(g * data * (1.0 - data))

        return self._result(data, (self,), bw)

    def exp(self) -> "Tensor":
        data = np.exp(self.data)

        def bw(g: Array) -> None:
            self._accumulate(g * data)

        return self._result(data, (self,), bw)

    def log(self, floor: float | None = None) -> "Tensor":
        """Natural log; with ``floor`` the argument is clamped below and the
        gradient is zero on the clamped region."""
        if floor is None:
            data = np.log(self.data)

            def bw(g: Array) -> None:
                self._accumulate(g / self.data)

            return self._result(data, (self,), bw)

        clamped = np.maximum(self.data, floor)
        live = self.data > floor

        def bw_floor(g: Array) -> None:
            self._accumulate(np.where(live, g / clamped, 0.0))

        return self._result(np.log(clamped), (self,), bw_floor)

    def sqrt(self) -> "Tensor":
        data = np.sqrt(self.data)

        def bw(g: Array) -> None:
            self._accumulate(g * 0.5 / data)

        return self._result(data, (self,), bw)

    # -- fused row-wise ops -------------------------------------------------

    def l2_normalize_rows(self, degenerate_below: float = 1e-12) -> "Tensor":
        """Scale every row to unit Euclidean norm.

        Rows whose pre-normalization norm falls below ``degenerate_below``
        are rejected: dividing by them would amplify noise without bound.
        """
        if self.data.ndim != 2:
            raise GraphError("l2_normalize_rows expects a 2-D tensor, got "
                             f"{self.data.shape}")
        norms = np.sqrt((self.data * self.data).sum(axis=1, keepdims=True))
        if np.any(norms < degenerate_below):
            bad = int(np.argmin(norms))
            raise GraphError(
                f"degenerate embedding: row {bad} has pre-normalization norm "
                f"{float(norms[bad, 0]):.3e} < {degenerate_below:g}")
        unit = self.data / norms

        def bw(g: Array) -> None:
            dot = (g * unit).sum(axis=1, keepdims=True)
            self._accumulate((g - unit * dot) / norms)

        return self._result(unit, (self,), bw)

    def log_softmax_rows(self) -> "Tensor":
        """Row-wise log-softmax with max subtraction for overflow safety."""
        if self.data.ndim != 2:
            raise GraphError("log_softmax_rows expects a 2-D tensor, got "
                             f"{self.data.shape}")
        shifted = self.data - self.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        out = shifted - lse
        softmax = np.exp(out)

        def bw(g: Array) -> None:
            self._accumulate(g - softmax * g.sum(axis=1, keepdims=True))

        return self._result(out, (self,), bw)

    # -- convolution stack --------------------------------------------------

    def conv2d(self, weight: "Tensor", bias: "Tensor",
               stride: int, padding: int) -> "Tensor":
        """2-D convolution of a B×C×H×W batch with an F×C×k×k kernel."""
        x = self.data
        if x.ndim != 4:
            raise GraphError(f"conv2d input must be 4-D, got {x.shape}")
        filters, in_ch, k, k2 = weight.data.shape
        if k != k2:
            raise GraphError("conv2d expects square kernels, got "
                             f"{weight.data.shape}")
        if x.shape[1] != in_ch:
            raise GraphError(
                f"conv2d channel dim mismatch: input has {x.shape[1]} "
                f"channels, kernel expects {in_ch}")
        if padding:
            xp = np.zeros((x.shape[0], in_ch,
                           x.shape[2] + 2 * padding,
                           x.shape[3] + 2 * padding))
            xp[:, :, padding:padding + x.shape[2],
               padding:padding + x.shape[3]] = x
        else:
            xp = np.ascontiguousarray(x)
        out_h = (xp.shape[2] - k) // stride + 1
        out_w = (xp.shape[3] - k) // stride + 1
        if out_h < 1 or out_w < 1:
            raise GraphError(
                f"conv2d spatial dims {x.shape[2]}x{x.shape[3]} too small "
                f"for kernel {k} stride {stride}")
        cols = kernels.im2col(xp, k, stride)           # (B, C*k*k, L)
        wmat = weight.data.reshape(filters, in_ch * k * k)
        out = np.matmul(wmat[None, :, :], cols)        # (B, F, L)
        out += bias.data[None, :, None]
        batch = x.shape[0]
        data = out.reshape(batch, filters, out_h, out_w)

        def bw(g: Array) -> None:
            gl = g.reshape(batch, filters, out_h * out_w)
            if bias.requires_grad:
                bias._accumulate(gl.sum(axis=(0, 2)))
            if weight.requires_grad:
                dw = np.matmul(gl, cols.transpose(0, 2, 1)).sum(axis=0)
                weight._accumulate(dw.reshape(weight.data.shape))
            if self.requires_grad:
                dcols = np.matmul(wmat.T[None, :, :], gl)
                dxp = kernels.col2im(dcols, in_ch, k, stride,
                                     xp.shape[2], xp.shape[3])
                if padding:
                    dxp = dxp[:, :, padding:padding + x.shape[2],
                              padding:padding + x.shape[3]]
                self._accumulate(dxp)

        return self._result(data, (self, weight, bias), bw)

    def global_avg_pool(self) -> "Tensor":
        """Spatial mean of a B×C×H×W batch, producing B×C."""
        if self.data.ndim != 4:
            raise GraphError(
                f"global_avg_pool input must be 4-D, got {self.data.shape}")
        return self.mean(axis=(2, 3))


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    """Stack tensors along axis 0; the adjoint splits the gradient back."""
    parts = list(parts)
    sizes = [p.data.shape[0] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)

    def bw(g: Array) -> None:
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(g[offset:offset + n])
            offset += n

    return Tensor._result(data, parts, bw)
