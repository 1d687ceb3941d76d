"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and records the operations applied to it;
``backward()`` walks the recorded graph in reverse topological order and
accumulates gradients into every tensor created with ``requires_grad=True``.
Only the ops the detector and loss stack need are implemented:
elementwise arithmetic, matmul, exp/log/abs/relu/sqrt, reductions, reshape,
integer-array gather, 2-D convolution (im2col) and box-wise average pooling.

Gradients are validated against central finite differences in the test
suite; keep new ops covered the same way.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None

    # -- introspection ------------------------------------------------------

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
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, grad: np.ndarray):
        # Accumulation always rebinds (never mutates in place), so aliasing a
        # child's gradient array is safe.
        grad = np.asarray(grad, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, _parents=(self, other))

        def bw(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = bw
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, _parents=(self, other))

        def bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, _parents=(self, other))

        def bw(g):
            self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            other._accumulate(_unbroadcast(-g * self.data / (other.data ** 2), other.data.shape))

        out._backward = bw
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        out = Tensor(self.data ** exponent, _parents=(self,))

        def bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        out._backward = bw
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data @ other.data, _parents=(self, other))

        def bw(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        out._backward = bw
        return out

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        value = np.exp(self.data)
        out = Tensor(value, _parents=(self,))
        out._backward = lambda g: self._accumulate(g * value)
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,))
        out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def abs(self):
        out = Tensor(np.abs(self.data), _parents=(self,))
        out._backward = lambda g: self._accumulate(g * np.sign(self.data))
        return out

    def relu(self):
        mask = self.data > 0.0
        out = Tensor(self.data * mask, _parents=(self,))
        out._backward = lambda g: self._accumulate(g * mask)
        return out

    def sqrt(self):
        return self ** 0.5

    # -- reductions / shape -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        out = Tensor(self.data.reshape(shape), _parents=(self,))
        out._backward = lambda g: self._accumulate(g.reshape(orig))
        return out

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inverse = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), _parents=(self,))
        out._backward = lambda g: self._accumulate(g.transpose(inverse))
        return out

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _parents=(self,))

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        out._backward = bw
        return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


# -- composite functions ------------------------------------------------------


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t - Tensor(t.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t - Tensor(t.data.max(axis=axis, keepdims=True))
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits; stable for large |x|."""
    labels = np.asarray(labels, dtype=logits.data.dtype)
    loss = logits.relu() - logits * labels + (1.0 + (-logits.abs()).exp()).log()
    return loss.mean()


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 (Huber) loss; quadratic for |d| < beta, linear beyond."""
    diff = pred - Tensor(np.asarray(target, dtype=pred.data.dtype))
    inside = (np.abs(diff.data) < beta).astype(pred.data.dtype)
    quad = (diff * diff) * (0.5 / beta)
    lin = diff.abs() - 0.5 * beta
    return (quad * inside + lin * (1.0 - inside)).mean()


def l2_normalize_rows(t: Tensor, eps: float = 0.0) -> Tensor:
    norm = ((t * t).sum(axis=1, keepdims=True) + eps).sqrt()
    return t / norm


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1, dilation: int = 1) -> Tensor:
    """2-D convolution on a single image: x (C,H,W), w (C2,C,k,k), b (C2,)."""
    C, H, W = x.data.shape
    C2, _, k, _ = w.data.shape
    k_eff = (k - 1) * dilation + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k_eff) // stride + 1
    Wo = (W + 2 * pad - k_eff) // stride + 1
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (C, k, k, Ho, Wo),
        (s[0], s[1] * dilation, s[2] * dilation, s[1] * stride, s[2] * stride),
    )
    cols = np.ascontiguousarray(view.reshape(C * k * k, Ho * Wo))
    w_mat = w.data.reshape(C2, C * k * k)
    out_data = (w_mat @ cols).reshape(C2, Ho, Wo) + b.data[:, None, None]
    out = Tensor(out_data, _parents=(x, w, b))

    def bw(g):
        g_mat = g.reshape(C2, Ho * Wo)
        w._accumulate((g_mat @ cols.T).reshape(w.data.shape))
        b._accumulate(g_mat.sum(axis=1))
        g_cols = (w_mat.T @ g_mat).reshape(C, k, k, Ho, Wo)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                r0, c0 = ki * dilation, kj * dilation
                gxp[:, r0 : r0 + stride * Ho : stride, c0 : c0 + stride * Wo : stride] += g_cols[:, ki, kj]
        if pad:
            gxp = gxp[:, pad : pad + H, pad : pad + W]
        x._accumulate(gxp)

    out._backward = bw
    return out


def roi_avg_pool(fmap: Tensor, boxes: np.ndarray, out_size: int, spatial_scale: float) -> Tensor:
    """Average-pool feature-map regions into fixed (C, P, P) grids.

    ``boxes`` are (N,4) image-coordinate corners; ``spatial_scale`` maps image
    pixels to feature cells.  Bins use integer cell ranges (at least one cell
    wide), so the result is piecewise constant in the box coordinates and
    exactly linear in the features.
    """
    C, Hf, Wf = fmap.data.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    P = out_size
    out_data = np.zeros((n, C, P, P), dtype=fmap.data.dtype)
    bins: list[tuple] = []
    for i, (x0, y0, x1, y1) in enumerate(boxes * spatial_scale):
        x0 = min(max(x0, 0.0), Wf - 1.0)
        y0 = min(max(y0, 0.0), Hf - 1.0)
        x1 = min(max(x1, x0 + 1e-3), float(Wf))
        y1 = min(max(y1, y0 + 1e-3), float(Hf))
        xs = np.linspace(x0, x1, P + 1)
        ys = np.linspace(y0, y1, P + 1)
        row_bins = []
        for pi in range(P):
            r0 = int(np.floor(ys[pi]))
            r1 = max(r0 + 1, int(np.ceil(ys[pi + 1])))
            r1 = min(r1, Hf)
            r0 = min(r0, r1 - 1)
            for pj in range(P):
                c0 = int(np.floor(xs[pj]))
                c1 = max(c0 + 1, int(np.ceil(xs[pj + 1])))
                c1 = min(c1, Wf)
                c0 = min(c0, c1 - 1)
                out_data[i, :, pi, pj] = fmap.data[:, r0:r1, c0:c1].mean(axis=(1, 2))
                row_bins.append((r0, r1, c0, c1))
        bins.append(row_bins)
    out = Tensor(out_data, _parents=(fmap,))

    def bw(g):
        gf = np.zeros_like(fmap.data)
        for i in range(n):
            for flat, (r0, r1, c0, c1) in enumerate(bins[i]):
                pi, pj = divmod(flat, P)
                gf[:, r0:r1, c0:c1] += g[i, :, pi, pj, None, None] / ((r1 - r0) * (c1 - c0))
        fmap._accumulate(gf)

    out._backward = bw
    return out


def check_gradient(fn, params: list, eps: float = 1e-5, rtol: float = 1e-3, atol: float = 1e-8):
    """Compare analytic gradients of ``fn(params) -> scalar Tensor`` with central differences.

    Returns the worst relative error over all checked entries.  Used by the
    test suite; kept in the library so demos can call it too.
    """
    for p in params:
        p.grad = None
    out = fn(params)
    out.backward()
    worst = 0.0
    for p in params:
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = fn(params).item()
            flat[idx] = orig - eps
            lo = fn(params).item()
            flat[idx] = orig
            fd = (hi - lo) / (2.0 * eps)
            an = grad.reshape(-1)[idx]
            err = abs(an - fd) / max(atol / rtol, abs(an), abs(fd))
            worst = max(worst, err)
            if err > rtol and abs(an - fd) > atol:
                raise AssertionError(
                    f"gradient mismatch at {idx}: analytic={an:.6g} fd={fd:.6g} rel={err:.3g}"
                )
    return worst
