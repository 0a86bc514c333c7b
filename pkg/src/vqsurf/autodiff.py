"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array plus an optional gradient slot. Operations
record their inputs and a local gradient rule on the output tensor; the
resulting implicit tape is replayed once, in reverse topological order,
by ``backward``. The tape is rebuilt from scratch on every forward pass
(define-by-run), which keeps variable-length ray batches simple.

Everything is float64. Gradients accumulate additively when a tensor is
used more than once.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "conv2d_transpose",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "relu",
    "sqrt",
    "absolute",
    "sin",
    "cos",
    "tensor_sum",
    "tensor_mean",
    "l1_norm",
    "l2_norm",
    "cumsum",
    "concat",
    "reshape",
    "transpose",
    "take_rows",
    "grad_check",
    "OPS",
]


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable for an op."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``data`` is always a numpy float64 array. ``grad`` is either None or
    an array of the same shape. Tensors produced by ops keep references
    to their parents and a gradient rule; leaf tensors have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None

    # -- convenience ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    # -- autograd core --------------------------------------------------
    def backward(self):
        """Populate ``grad`` on every requires_grad tensor reachable from here.

        The recorded tape is visited exactly once per node, in reverse
        topological order. Gradients from multiple uses accumulate.
        """
        if self.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad or self._grad_fn is None:
            raise ValueError("backward called on a tensor with an empty tape")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, children_done = stack.pop()
            if children_done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is None or node.grad is None:
                continue
            grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None else g
                else:
                    parent.grad = parent.grad + g

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    if rg:
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None


# -- elementwise binary ops ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _from_op(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    inv = 1.0 / b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * inv, a.shape),
            _unbroadcast(-g * a.data * inv * inv, b.shape),
        )

    return _from_op(a.data * inv, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        return (-g,)

    return _from_op(-a.data, (a,), grad_fn)


# -- matmul ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: expected (m,k) @ (k,n), got {a.shape} and {b.shape}"
        )

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(a.data @ b.data, (a, b), grad_fn)


# -- convolutions ----------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold a (C,H,W) array into (H'*W', C*kh*kw) patch rows."""
    c = x.shape[0]
    if pad > 0:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, H', W', kh, kw)
    _, ho, wo, _, _ = win.shape
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols: np.ndarray, c: int, h: int, w: int, kh: int, kw: int,
            stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add (H'*W', C*kh*kw) patch rows back to a (C,H,W) array."""
    out = np.zeros((c, h + 2 * pad, w + 2 * pad))
    patches = cols.reshape(ho, wo, c, kh, kw).transpose(2, 0, 1, 3, 4)
    for ki in range(kh):
        for kj in range(kw):
            out[:, ki:ki + stride * ho:stride,
                kj:kj + stride * wo:stride] += patches[:, :, :, ki, kj]
    if pad > 0:
        out = out[:, pad:-pad, pad:-pad]
    return out


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a (C_in,H,W) input with (C_out,C_in,kH,kW)
    kernels, explicit integer stride and symmetric zero padding."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or x.shape[0] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: expected (C_in,H,W) and (C_out,C_in,kH,kW), got "
            f"{x.shape} and {weight.shape}"
        )
    cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(
            f"conv2d: kernel {(kh, kw)} larger than padded input {x.shape}"
        )
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    w2 = weight.data.reshape(cout, -1)
    out = cols @ w2.T  # (ho*wo, cout)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(
                f"conv2d: bias shape {bias.shape} does not match C_out={cout}"
            )
        out = out + bias.data
        parents.append(bias)

    def grad_fn(g):
        g2 = g.transpose(1, 2, 0).reshape(ho * wo, cout)
        gx = _col2im(g2 @ w2, cin, h, w, kh, kw, stride, pad, ho, wo)
        gw = (g2.T @ cols).reshape(cout, cin, kh, kw)
        if bias is not None:
            return gx, gw, g2.sum(axis=0)
        return gx, gw

    return _from_op(
        out.T.reshape(cout, ho, wo), tuple(parents), grad_fn
    )


def conv2d_transpose(x, weight, bias=None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    """Transposed 2-D convolution (fractionally strided upsampling).

    Input (C_in,H,W), kernels (C_in,C_out,kH,kW), output
    (C_out, stride*(H-1)+kH-2*pad, stride*(W-1)+kW-2*pad). The adjoint of
    ``conv2d`` with the same stride and padding.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or x.shape[0] != weight.shape[0]:
        raise ShapeError(
            f"conv2d_transpose: expected (C_in,H,W) and (C_in,C_out,kH,kW), "
            f"got {x.shape} and {weight.shape}"
        )
    cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    ho = stride * (h - 1) + kh - 2 * pad
    wo = stride * (w - 1) + kw - 2 * pad
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d_transpose: output {(ho, wo)} non-positive for input "
            f"{x.shape}, kernel {(kh, kw)}, stride {stride}, pad {pad}"
        )
    x2 = x.data.transpose(1, 2, 0).reshape(h * w, cin)
    w2 = weight.data.reshape(cin, cout * kh * kw)
    cols = x2 @ w2  # (h*w, cout*kh*kw)
    out = _col2im(cols, cout, ho, wo, kh, kw, stride, pad, h, w)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(
                f"conv2d_transpose: bias shape {bias.shape} does not match "
                f"C_out={cout}"
            )
        out = out + bias.data.reshape(cout, 1, 1)
        parents.append(bias)

    def grad_fn(g):
        gcols, _, _ = _im2col(g, kh, kw, stride, pad)  # (h*w, cout*kh*kw)
        gx = (gcols @ w2.T).reshape(h, w, cin).transpose(2, 0, 1)
        gw = (x2.T @ gcols).reshape(cin, cout, kh, kw)
        if bias is not None:
            return gx, gw, g.sum(axis=(1, 2))
        return gx, gw

    return _from_op(out, tuple(parents), grad_fn)


# -- elementwise unary ops -------------------------------------------------

def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # stable: exp argument is always <= 0
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_raw(a.data)

    def grad_fn(g):
        return (g * (out * (1.0 - out)),)

    return _from_op(out, (a,), grad_fn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.isfinite(out).all():
        raise FloatingPointError("exp: overflow to non-finite values")

    def grad_fn(g):
        return (g * out,)

    return _from_op(out, (a,), grad_fn)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log: non-positive input")
    out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _from_op(out, (a,), grad_fn)


def softplus(a, beta: float = 1.0) -> Tensor:
    """Numerically stable (1/beta) * log(1 + exp(beta*x))."""
    a = _as_tensor(a)
    # max(x,0) + log1p(exp(-beta*|x|))/beta: the exp argument is always <= 0,
    # and exp(-beta*|x|) doubles as the sigmoid needed by the gradient
    t = np.exp(-beta * np.abs(a.data))
    out = np.maximum(a.data, 0.0) + np.log1p(t) / beta
    u = 1.0 / (1.0 + t)
    sig = np.where(a.data >= 0, u, 1.0 - u)

    def grad_fn(g):
        return (g * sig,)

    return _from_op(out, (a,), grad_fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # gradient at exactly 0 is defined as 0

    def grad_fn(g):
        return (g * mask,)

    return _from_op(np.where(mask, a.data, 0.0), (a,), grad_fn)


def sqrt(a) -> Tensor:
    """Elementwise square root; the gradient at 0 is defined as 0."""
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise FloatingPointError("sqrt: negative input")
    out = np.sqrt(a.data)

    def grad_fn(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _from_op(out, (a,), grad_fn)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)

    def grad_fn(g):
        return (g * sign,)

    return _from_op(np.abs(a.data), (a,), grad_fn)


def sin(a) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        return (g * np.cos(a.data),)

    return _from_op(np.sin(a.data), (a,), grad_fn)


def cos(a) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        return (-g * np.sin(a.data),)

    return _from_op(np.cos(a.data), (a,), grad_fn)


# -- reductions -------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).copy(),)

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / max(out.size, 1)

    def grad_fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / scale,)

    return _from_op(out, (a,), grad_fn)


def l1_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum of absolute values, optionally along an axis."""
    a = _as_tensor(a)
    sign = np.sign(a.data)

    def grad_fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) * sign,)

    return _from_op(
        np.abs(a.data).sum(axis=axis, keepdims=keepdims), (a,), grad_fn
    )


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm, optionally along an axis; gradient 0 at the origin."""
    a = _as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=keepdims)
    out = np.sqrt(sq)

    def grad_fn(g):
        safe = np.where(out > 0, out, 1.0)
        gn = _expand_reduced(g / safe, a.shape, axis, keepdims)
        mask = _expand_reduced(out > 0, a.shape, axis, keepdims)
        return (np.where(mask, gn * a.data, 0.0),)

    return _from_op(out, (a,), grad_fn)


def cumsum(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        rev = np.flip(g, axis=axis)
        return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)

    return _from_op(np.cumsum(a.data, axis=axis), (a,), grad_fn)


# -- shape ops ---------------------------------------------------------------

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
        grad_fn,
    )


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(
            f"reshape: cannot view {a.shape} as {shape}"
        ) from None

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _from_op(out, (a,), grad_fn)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inv),)

    return _from_op(a.data.transpose(axes).copy(), (a,), grad_fn)


def tensor_slice(a, key) -> Tensor:
    """Basic slicing with gradient scatter back into the source."""
    a = _as_tensor(a)
    out = a.data[key]

    def grad_fn(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _from_op(out.copy() if out.base is not None else out, (a,), grad_fn)


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0; gradient scatter-adds into the source."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(
            f"take_rows: index out of range for {a.shape[0]} rows"
        )

    def grad_fn(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _from_op(a.data[idx], (a,), grad_fn)


# -- gradient checking --------------------------------------------------------

def grad_check(f, x: Tensor, h: float = 1e-4, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of a scalar function against central
    finite differences.

    Returns the max over (optionally subsampled) coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    base = x.data.copy()
    var = Tensor(base.copy(), requires_grad=True)
    y = f(var)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ValueError("grad_check: f must return a scalar Tensor")
    if not np.isfinite(y.data).all():
        raise FloatingPointError("grad_check: non-finite function value")
    y.backward()
    analytic = var.grad
    if analytic is None:
        analytic = np.zeros_like(base)

    flat = var.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(var).data)
            flat[i] = orig - h
            fm = float(f(var).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(
                    "grad_check: non-finite evaluation during differencing"
                )
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


# Registry of differentiable ops; tests assert gradcheck coverage of each.
OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d_transpose": conv2d_transpose,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "relu": relu,
    "sqrt": sqrt,
    "absolute": absolute,
    "sin": sin,
    "cos": cos,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
    "cumsum": cumsum,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "slice": tensor_slice,
    "take_rows": take_rows,
}
