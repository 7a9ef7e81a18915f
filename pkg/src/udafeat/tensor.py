"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays and record a dynamic tape of operations;
calling backward() on a scalar walks the tape once in reverse topological
order and accumulates gradients into every requires_grad tensor. The tape is
freed after backward. Broadcasting is restricted to scalar-tensor pairs so
that shapes stay explicit.
"""

import numpy as np


class GraphConsumedError(RuntimeError):
    """Raised when backward() is invoked twice on the same graph."""


def _as_scalar_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(float(x))


def _check_elementwise(a, b):
    if a.data.size != 1 and b.data.size != 1 and a.data.shape != b.data.shape:
        raise ValueError(
            f"shape mismatch {a.data.shape} vs {b.data.shape} "
            "(only scalar-tensor broadcasting is supported)")


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.data.size == 1 and np.shape(g) != t.data.shape:
        g = np.asarray(g).sum().reshape(t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if self._consumed:
            raise GraphConsumedError("graph already consumed by backward()")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None
                node._parents = ()
                node._consumed = True
        self._consumed = True

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        other = _as_scalar_tensor(other)
        _check_elementwise(self, other)
        a, b = self, other

        def bw(g):
            _accum(a, g)
            _accum(b, g)
        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_scalar_tensor(other)
        _check_elementwise(self, other)
        a, b = self, other

        def bw(g):
            _accum(a, g)
            _accum(b, -g)
        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return _as_scalar_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = _as_scalar_tensor(other)
        _check_elementwise(self, other)
        a, b = self, other

        def bw(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_scalar_tensor(other)
        _check_elementwise(self, other)
        a, b = self, other

        def bw(g):
            _accum(a, g / b.data)
            _accum(b, -g * a.data / (b.data * b.data))
        return Tensor._make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return _as_scalar_tensor(other).__truediv__(self)

    def __neg__(self):
        a = self

        def bw(g):
            _accum(a, -g)
        return Tensor._make(-a.data, (a,), bw)

    def __pow__(self, p):
        p = float(p)
        a = self

        def bw(g):
            _accum(a, g * p * a.data ** (p - 1.0))
        return Tensor._make(a.data ** p, (a,), bw)

    # -- elementwise functions ---------------------------------------------

    def log(self):
        a = self

        def bw(g):
            _accum(a, g / a.data)
        return Tensor._make(np.log(a.data), (a,), bw)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bw(g):
            _accum(a, g * out_data)
        return Tensor._make(out_data, (a,), bw)

    def abs(self):
        a = self

        def bw(g):
            _accum(a, g * np.sign(a.data))
        return Tensor._make(np.abs(a.data), (a,), bw)

    def relu(self):
        a = self
        mask = a.data > 0.0

        def bw(g):
            _accum(a, g * mask)
        return Tensor._make(np.maximum(a.data, 0.0), (a,), bw)

    def clip(self, lo, hi):
        a = self
        inside = (a.data >= lo) & (a.data <= hi)

        def bw(g):
            _accum(a, g * inside)
        return Tensor._make(np.clip(a.data, lo, hi), (a,), bw)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None):
        a = self

        def bw(g):
            if axis is None:
                _accum(a, np.broadcast_to(g, a.data.shape))
            else:
                _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))
        return Tensor._make(a.data.sum(axis=axis), (a,), bw)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) / float(n)

    def max(self):
        """Global maximum; the gradient routes to the first argmax element."""
        a = self
        flat_idx = int(np.argmax(a.data))

        def bw(g):
            full = np.zeros_like(a.data)
            full.flat[flat_idx] = float(g)
            _accum(a, full)
        return Tensor._make(a.data.max(), (a,), bw)

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def bw(g):
            _accum(a, g.reshape(a.data.shape))
        return Tensor._make(a.data.reshape(shape), (a,), bw)

    def transpose(self, axes=None):
        a = self
        inv = None if axes is None else np.argsort(axes)

        def bw(g):
            _accum(a, g.transpose(inv) if inv is not None else g.transpose())
        return Tensor._make(a.data.transpose(axes), (a,), bw)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, key):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            full[key] += g
            _accum(a, full)
        return Tensor._make(a.data[key], (a,), bw)

    def index_rows(self, idx):
        """Gather rows of a 2-D tensor by an integer index map."""
        if self.data.ndim != 2:
            raise ValueError("index_rows expects a 2-D tensor")
        idx = np.asarray(idx, dtype=np.intp)
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)
        return Tensor._make(a.data[idx], (a,), bw)

    # -- linear algebra ----------------------------------------------------

    def __matmul__(self, other):
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul supports 2-D tensors only")
        a, b = self, other

        def bw(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        return Tensor._make(a.data @ b.data, (a, b), bw)

    # -- softmax family ----------------------------------------------------

    def softmax(self, axis):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accum(a, out_data * (g - dot))
        return Tensor._make(out_data, (a,), bw)

    def log_softmax(self, axis):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out_data = shifted - lse

        def bw(g):
            soft = np.exp(out_data)
            _accum(a, g - soft * g.sum(axis=axis, keepdims=True))
        return Tensor._make(out_data, (a,), bw)


# -- structural operations --------------------------------------------------

def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tuple(tensors), bw)


def add_channel_bias(x, b):
    """x[C,h,w] + b[C], broadcast over the spatial axes."""
    if x.data.ndim != 3 or b.data.shape != (x.data.shape[0],):
        raise ValueError("add_channel_bias expects x[C,h,w] and b[C]")

    def bw(g):
        _accum(x, g)
        _accum(b, g.sum(axis=(1, 2)))
    return Tensor._make(x.data + b.data[:, None, None], (x, b), bw)


# -- spatial operations ------------------------------------------------------

def _im2col(xp, k, stride, oh, ow):
    c = xp.shape[0]
    cols = np.empty((c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * oh:stride,
                               j:j + stride * ow:stride]
    return cols.reshape(c * k * k, oh * ow)


def _col2im(cols, c, hp, wp, k, stride, oh, ow):
    cols = cols.reshape(c, k, k, oh, ow)
    xp = np.zeros((c, hp, wp), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, i, j]
    return xp


def conv2d(x, kernel, stride=1, padding=0):
    """2-D convolution (cross-correlation): x[C_in,h,w] * kernel[C_out,C_in,k,k]."""
    c_in, h, w = x.data.shape
    c_out, c_in_k, k, k2 = kernel.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if c_in_k != c_in:
        raise ValueError(f"input has {c_in} channels, kernel expects {c_in_k}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = kernel.data.reshape(c_out, -1)
    out_data = (wmat @ cols).reshape(c_out, oh, ow)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        _accum(kernel, (g2 @ cols.T).reshape(kernel.data.shape))
        if x.requires_grad:
            dcols = wmat.T @ g2
            dxp = _col2im(dcols, c_in, h + 2 * padding, w + 2 * padding,
                          k, stride, oh, ow)
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding]
            _accum(x, dxp)
    return Tensor._make(out_data, (x, kernel), bw)


def maxpool2x2(x):
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError("maxpool2x2 requires even spatial dims")
    win = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4) \
        .reshape(c, h // 2, w // 2, 4)
    idx = win.argmax(axis=3)  # first occurrence on ties
    out_data = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]

    def bw(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=3)
        _accum(x, gwin.reshape(c, h // 2, w // 2, 2, 2)
               .transpose(0, 1, 3, 2, 4).reshape(c, h, w))
    return Tensor._make(out_data, (x,), bw)


def upsample_nearest(x, factor):
    c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        _accum(x, g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)))
    return Tensor._make(out_data, (x,), bw)


def downsample_nearest(x, factor):
    """Nearest-neighbor downsample sampling the top-left of each block."""
    c, h, w = x.data.shape
    if h % factor or w % factor:
        raise ValueError("spatial dims must be divisible by factor")

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, ::factor, ::factor] = g
        _accum(x, full)
    return Tensor._make(np.ascontiguousarray(x.data[:, ::factor, ::factor]),
                        (x,), bw)


def downsample_nearest_labels(labels, factor):
    """Label-map variant operating on plain integer arrays (no gradient)."""
    labels = np.asarray(labels)
    h, w = labels.shape
    if h % factor or w % factor:
        raise ValueError("spatial dims must be divisible by factor")
    return np.ascontiguousarray(labels[::factor, ::factor])
