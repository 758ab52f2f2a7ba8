"""Dense double-precision tensors with minimal reverse-mode autodiff.

The operation set is just large enough to express a small convolutional
encoder/decoder/classifier and its two training losses: affine, strided
conv / transposed conv, ReLU, Tanh, softmax, cross-entropy and L1.
Everything runs on numpy float64 arrays; gradients are accumulated by a
single backward pass over the recorded graph.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class ContractError(RuntimeError):
    """Raised when an operation is used outside its contract."""


class Tensor:
    """An n-d float64 array that optionally participates in the grad tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._backward_fn = _backward_fn if self.requires_grad else None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None
        self._done = False

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate .grad on every requires_grad tensor reachable from self.

        Only defined for scalar tensors; calling it twice on the same node
        without zero_grad() is an error.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        if self._done:
            raise ContractError("backward() already ran on this tensor; zero_grad() first")
        order = []
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        self._done = True

    # -- arithmetic used to combine scalar losses --

    def __add__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(other)
        if self.shape != other.shape:
            raise ShapeError(f"add: {self.shape} vs {other.shape}")
        out = Tensor(self.data + other.data, _parents=(self, other))

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        out._backward_fn = _bw
        return out

    def __mul__(self, scalar: float) -> "Tensor":
        s = float(scalar)
        out = Tensor(self.data * s, _parents=(self,))

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * s)

        out._backward_fn = _bw
        return out

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum(), _parents=(self,))

        def _bw(g):
            if self.requires_grad:
                self._accumulate(np.full_like(self.data, float(g)))

        out._backward_fn = _bw
        return out

    def reshape(self, *shape) -> "Tensor":
        out = Tensor(self.data.reshape(*shape), _parents=(self,))

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g.reshape(self.data.shape))

        out._backward_fn = _bw
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out[n, j] = sum_i x[n, i] * weight[i, j] + bias[j]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"affine expects 2-d operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    out = Tensor(x.data @ weight.data + bias.data, _parents=(x, weight, bias))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    out._backward_fn = _bw
    return out


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> (N,C,k,k,OH,OW) patch view copy."""
    n, c, h, w = x.shape
    oh, ow = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def _col2im(cols: np.ndarray, h: int, w: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back to (N,C,H,W)."""
    n, c, k, _, oh, ow = cols.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, kernels: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    """Cross-correlation with zero padding; kernels are (F, C, kH, kW)."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.shape} and {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    k = kernels.shape[2]
    if kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"conv2d expects square kernels, got {kernels.shape}")
    h, w = x.shape[2], x.shape[3]
    if _out_size(h, k, stride, padding) < 1 or _out_size(w, k, stride, padding) < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k}")
    cols = _im2col(x.data, k, stride, padding)
    out_data = np.einsum("fcij,ncijhw->nfhw", kernels.data, cols, optimize=True)
    out = Tensor(out_data, _parents=(x, kernels))

    def _bw(g):
        if kernels.requires_grad:
            kernels._accumulate(np.einsum("nfhw,ncijhw->fcij", g, cols, optimize=True))
        if x.requires_grad:
            gcols = np.einsum("fcij,nfhw->ncijhw", kernels.data, g, optimize=True)
            x._accumulate(_col2im(gcols, h, w, stride, padding))

    out._backward_fn = _bw
    return out


def conv_transpose2d(x: Tensor, kernels: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution doubling spatial dims; kernels are (C, F, kH, kW).

    Exactly the adjoint of conv2d(·, kernels, stride, padding=1) on the
    doubled-size image, so <conv2d(a, k), b> == <a, conv_transpose2d(b, k)>.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d operands, got {x.shape} and {kernels.shape}")
    if x.shape[1] != kernels.shape[0]:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input {x.shape} vs kernels {kernels.shape}"
        )
    k = kernels.shape[2]
    pad = 1
    n, _, h, w = x.shape
    oh, ow = stride * h, stride * w
    gcols = np.einsum("cfij,nchw->nfijhw", kernels.data, x.data, optimize=True)
    out = Tensor(_col2im(gcols, oh, ow, stride, pad), _parents=(x, kernels))

    def _bw(g):
        cols = _im2col(g, k, stride, pad)
        if x.requires_grad:
            x._accumulate(np.einsum("cfij,nfijhw->nchw", kernels.data, cols, optimize=True))
        if kernels.requires_grad:
            kernels._accumulate(np.einsum("nchw,nfijhw->cfij", x.data, cols, optimize=True))

    out._backward_fn = _bw
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), _parents=(x,))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    out._backward_fn = _bw
    return out


_TANH_LIM = np.nextafter(1.0, 0.0)


def tanh(x: Tensor) -> Tensor:
    """Elementwise tanh, clamped into the open interval (-1, 1).

    float64 tanh saturates to exactly +/-1 for |x| >~ 19; the decoder output
    contract wants strictly open bounds, so saturated values are nudged in.
    """
    x = _as_tensor(x)
    y = np.clip(np.tanh(x.data), -_TANH_LIM, _TANH_LIM)
    out = Tensor(y, _parents=(x,))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - y * y))

    out._backward_fn = _bw
    return out


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects (N, K), got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, _parents=(x,))

    def _bw(g):
        if x.requires_grad:
            x._accumulate(y * (g - (g * y).sum(axis=1, keepdims=True)))

    out._backward_fn = _bw
    return out


PROB_FLOOR = 1e-12


def cross_entropy(y_onehot: Tensor, y_prob: Tensor) -> Tensor:
    """Batch-mean negative log likelihood of the one-hot targets."""
    y_onehot, y_prob = _as_tensor(y_onehot), _as_tensor(y_prob)
    if y_onehot.shape != y_prob.shape or y_onehot.data.ndim != 2:
        raise ShapeError(f"cross_entropy: targets {y_onehot.shape} vs probs {y_prob.shape}")
    t = y_onehot.data
    if not (np.isin(t, (0.0, 1.0)).all() and np.allclose(t.sum(axis=1), 1.0)):
        raise ValueError("cross_entropy targets must be one-hot rows")
    n = t.shape[0]
    p = np.maximum(y_prob.data, PROB_FLOOR)
    out = Tensor(-(t * np.log(p)).sum() / n, _parents=(y_onehot, y_prob))

    def _bw(g):
        if y_prob.requires_grad:
            grad = np.where(y_prob.data > PROB_FLOOR, -t / p, 0.0) * (float(g) / n)
            y_prob._accumulate(grad)

    out._backward_fn = _bw
    return out


def l1_loss(x: Tensor, x_recon: Tensor) -> Tensor:
    """Per-sample sum of absolute differences, averaged over the batch.

    1-d inputs count as a single sample. The subgradient at zero is 0.
    """
    x, x_recon = _as_tensor(x), _as_tensor(x_recon)
    if x.shape != x_recon.shape:
        raise ShapeError(f"l1_loss: {x.shape} vs {x_recon.shape}")
    n = 1 if x.data.ndim <= 1 else x.shape[0]
    diff = x.data - x_recon.data
    out = Tensor(np.abs(diff).sum() / n, _parents=(x, x_recon))

    def _bw(g):
        s = np.sign(diff) * (float(g) / n)
        if x.requires_grad:
            x._accumulate(s)
        if x_recon.requires_grad:
            x_recon._accumulate(-s)

    out._backward_fn = _bw
    return out
