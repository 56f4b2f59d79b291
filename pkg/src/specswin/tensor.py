"""Minimal N-d float32 tensor with reverse-mode automatic differentiation.

Storage and kernels are numpy; every derivative rule is written out by hand
and checked against central finite differences in the test suite. Reductions
accumulate in float64 before casting back to float32. All kernels are
deterministic: same inputs give bit-identical outputs.
"""

import numpy as np

from .errors import GraphError, NumericError, ShapeError


def _as_f32(data):
    arr = np.asarray(data, dtype=np.float32)
    return arr


class Tensor:
    """Array of 32-bit reals with optional gradient tracking.

    `grad` is allocated (zero-filled, same shape) iff `requires_grad` is set.
    Interior graph nodes carry their parents and a backward closure; leaves
    have neither.
    """

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self):
        """Reverse-mode pass from a scalar; visits nodes in reverse topological order."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward on a tensor that does not require grad")
        if self._backward_ran:
            raise GraphError("second backward pass without a new forward pass")

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.grad[...] = 1.0
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
        self._backward_ran = True

    # operator sugar; all heavy lifting is in the module-level ops
    def __add__(self, other):
        return add(self, _ensure(other))

    def __radd__(self, other):
        return add(_ensure(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, mul(_ensure(other), Tensor(-1.0)))

    def __rsub__(self, other):
        return add(_ensure(other), mul(self, Tensor(-1.0)))

    def __mul__(self, other):
        return mul(self, _ensure(other))

    def __rmul__(self, other):
        return mul(_ensure(other), self)

    def __matmul__(self, other):
        return matmul(self, _ensure(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _ensure(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.astype(np.float32, copy=False)


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward if req else None)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    out_data = a.data + b.data
    out = _make(out_data, (a, b), None)

    def _bw():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad, b.shape)

    out._backward = _bw if out.requires_grad else None
    return out


def mul(a, b):
    out = _make(a.data * b.data, (a, b), None)

    def _bw():
        if a.requires_grad:
            a.grad += _unbroadcast(b.data * out.grad, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(a.data * out.grad, b.shape)

    out._backward = _bw if out.requires_grad else None
    return out


def matmul(a, b):
    """Matrix product with numpy-style broadcasting over leading batch axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = _make(a.data @ b.data, (a, b), None)

    def _bw():
        if a.requires_grad:
            ga = out.grad @ np.swapaxes(b.data, -1, -2)
            a.grad += _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ out.grad
            b.grad += _unbroadcast(gb, b.shape)

    out._backward = _bw if out.requires_grad else None
    return out


def reshape(x, shape):
    old = x.shape
    out = _make(x.data.reshape(shape), (x,), None)

    def _bw():
        x.grad += out.grad.reshape(old)

    out._backward = _bw if out.requires_grad else None
    return out


def permute(x, axes):
    axes = tuple(axes)
    out = _make(x.data.transpose(axes), (x,), None)
    inv = tuple(np.argsort(axes))

    def _bw():
        x.grad += out.grad.transpose(inv)

    out._backward = _bw if out.requires_grad else None
    return out


def concat(tensors, axis):
    tensors = [_ensure(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.ndim
                idx[axis] = slice(lo, hi)
                t.grad += out.grad[tuple(idx)]

    out._backward = _bw if out.requires_grad else None
    return out


def sum_(x, axis=None, keepdims=False):
    data = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)
    out = _make(data, (x,), None)

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(a % x.ndim for a in axes):
                g = np.expand_dims(g, ax)
        x.grad += np.broadcast_to(g, x.shape)

    out._backward = _bw if out.requires_grad else None
    return out


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def take(table, indices):
    """Row gather: out[i] = table[indices[i]]; backward scatter-adds."""
    idx = np.asarray(indices)
    out = _make(table.data[idx], (table,), None)

    def _bw():
        np.add.at(table.grad, idx, out.grad)

    out._backward = _bw if out.requires_grad else None
    return out


def pad3d(x, pads):
    """Zero-pad the bottom-right of the first three axes by `pads` = (p0, p1, p2)."""
    if x.ndim < 3:
        raise ShapeError(f"pad3d needs >=3 axes, got shape {x.shape}")
    p0, p1, p2 = pads
    width = [(0, p0), (0, p1), (0, p2)] + [(0, 0)] * (x.ndim - 3)
    out = _make(np.pad(x.data, width), (x,), None)
    t, h, w = x.shape[:3]

    def _bw():
        x.grad += out.grad[:t, :h, :w]

    out._backward = _bw if out.requires_grad else None
    return out


def crop3d(x, extents):
    """Keep the leading `extents` = (e0, e1, e2) along the first three axes."""
    if x.ndim < 3:
        raise ShapeError(f"crop3d needs >=3 axes, got shape {x.shape}")
    e0, e1, e2 = extents
    out = _make(x.data[:e0, :e1, :e2], (x,), None)

    def _bw():
        x.grad[:e0, :e1, :e2] += out.grad

    out._backward = _bw if out.requires_grad else None
    return out


def roll3d(x, shifts):
    """Cyclic shift along the first three axes; shifts are taken modulo extents."""
    if x.ndim < 3:
        raise ShapeError(f"roll3d needs >=3 axes, got shape {x.shape}")
    shifts = tuple(int(s) for s in shifts)
    out = _make(np.roll(x.data, shifts, axis=(0, 1, 2)), (x,), None)

    def _bw():
        x.grad += np.roll(out.grad, tuple(-s for s in shifts), axis=(0, 1, 2))

    out._backward = _bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax_lastdim(x):
    """Numerically stable softmax over the last axis (max subtraction)."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs a nonempty last dimension")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (x,), None)

    def _bw():
        g = out.grad
        x.grad += y * (g - (g * y).sum(axis=-1, keepdims=True))

    out._backward = _bw if out.requires_grad else None
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm affine params must be shape ({c},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), None)

    def _bw():
        g = out.grad
        if gamma.requires_grad:
            gamma.grad += (g * xhat).reshape(-1, c).sum(axis=0, dtype=np.float64).astype(np.float32)
        if beta.requires_grad:
            beta.grad += g.reshape(-1, c).sum(axis=0, dtype=np.float64).astype(np.float32)
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.grad += inv * (gh - m1 - xhat * m2)

    out._backward = _bw if out.requires_grad else None
    return out


_GELU_C = np.float32(0.7978845608)
_GELU_A = np.float32(0.044715)


def gelu(x):
    """tanh-approximation GELU."""
    v = x.data
    t = np.tanh(_GELU_C * (v + _GELU_A * v * v * v))
    out = _make(0.5 * v * (1.0 + t), (x,), None)

    def _bw():
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * v * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        x.grad += d.astype(np.float32) * out.grad

    out._backward = _bw if out.requires_grad else None
    return out


def sigmoid(x):
    v = x.data
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-v)), np.exp(v) / (1.0 + np.exp(v)))
    y = y.astype(np.float32)
    out = _make(y, (x,), None)

    def _bw():
        x.grad += y * (1.0 - y) * out.grad

    out._backward = _bw if out.requires_grad else None
    return out


def clip01(x):
    """Clamp to [0, 1]; gradient passes only strictly inside the interval."""
    out = _make(np.clip(x.data, 0.0, 1.0), (x,), None)
    inside = ((x.data > 0.0) & (x.data < 1.0)).astype(np.float32)

    def _bw():
        x.grad += inside * out.grad

    out._backward = _bw if out.requires_grad else None
    return out


def linear(x, w, b=None):
    """x @ w (+ b), with x (..., c_in), w (c_in, c_out), b (c_out,)."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(flat, w)
    if b is not None:
        y = add(y, b)
    if x.ndim != 2:
        y = reshape(y, lead + (w.shape[-1],))
    return y


def conv3d_transpose(x, kernel, stride, bias=None):
    """Transposed 3D convolution, restricted to kernel == stride or 1x1x1.

    x: (T', H', W', C_in); kernel: (kt, kh, kw, C_in, C_out). With kernel ==
    stride each input voxel expands into a disjoint (kt, kh, kw) output block,
    so the op reduces to a reshape/permute around one matmul.
    """
    from .errors import ConfigError

    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d_transpose expects 4-d input and 5-d kernel, "
                         f"got {x.shape} and {kernel.shape}")
    kt, kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"input channels {x.shape[-1]} != kernel channels {cin}")
    stride = tuple(int(s) for s in stride)
    ksize = (kt, kh, kw)
    if ksize == (1, 1, 1):
        if stride != (1, 1, 1):
            raise ConfigError("1x1x1 kernel requires stride (1,1,1)")
    elif ksize != stride:
        raise ConfigError(
            f"only kernel == stride or 1x1x1 supported, got kernel {ksize} stride {stride}")

    t, h, w = x.shape[:3]
    flat = reshape(x, (t * h * w, cin))
    kmat = reshape(permute(kernel, (3, 0, 1, 2, 4)), (cin, kt * kh * kw * cout))
    y = matmul(flat, kmat)
    y = reshape(y, (t, h, w, kt, kh, kw, cout))
    y = permute(y, (0, 3, 1, 4, 2, 5, 6))
    y = reshape(y, (t * kt, h * kh, w * kw, cout))
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# parameter initialization


def trunc_normal(shape, rng, std=0.02):
    """Truncated normal init: std `std`, resampled until within +-2 std."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2.0 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2.0 * std
    return Tensor(vals.astype(np.float32), requires_grad=True)


def zeros(shape, requires_grad=True):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


def ones(shape, requires_grad=True):
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=requires_grad)
