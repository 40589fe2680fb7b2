"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operations the segmentation network needs: elementwise
arithmetic, channel concatenation, per-row affine maps, LeakyReLU, axis
reductions, row gathering with scatter-add backward, and batch
normalization.  Two precisions are supported: float32 for training and
float64 for gradient verification.

Tensors are immutable once created except for gradient accumulation.
Backward runs over a tape in reverse topological order; only first-order
derivatives are supported.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class UsageError(ValueError):
    """Operation called outside its contract (wrong axis, non-scalar output, ...)."""


class EmptyReductionError(ValueError):
    """Reduction requested over an axis of extent zero."""


class GatherIndexError(IndexError):
    """gather_rows index outside [0, M)."""


class StatisticsError(ValueError):
    """Batch statistics undefined (train-mode batch norm with < 2 rows)."""


class Tensor:
    """N-dimensional array node in the autodiff graph.

    `data` is a numpy float32/float64 array and must not be mutated after
    construction.  `grad` is allocated lazily during backward and has the
    same shape as `data`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        """Backpropagate from a scalar output to every reachable leaf."""
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; the named functions below are the actual ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_all(self)


def _toposort(root):
    """Iterative DFS topological order of the tape below `root`."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _accumulate(tensor, grad):
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents, backward):
    """Wrap an op result; the tape is only extended when a parent needs grad."""
    track = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise and linear ops
# ---------------------------------------------------------------------------

def add(a, b):
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    """Elementwise product; `b` may be a python scalar."""
    if np.isscalar(b):
        s = a.dtype.type(b)

        def backward_scalar(g):
            if a.requires_grad:
                _accumulate(a, g * s)

        return _make(a.data * s, (a,), backward_scalar)

    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def concat_channels(tensors, axis=-1):
    """Concatenate along the channel (last) axis."""
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat_channels: empty input list")
    ndim = tensors[0].data.ndim
    if axis != -1 and axis != ndim - 1:
        raise UsageError(f"concat_channels: axis {axis} is not the channel axis")
    lead = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        if t.data.ndim != ndim or t.data.shape[:-1] != lead:
            raise DimensionError(
                f"concat_channels: shape mismatch: {tensors[0].data.shape} vs {t.data.shape}"
            )
    widths = [t.data.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accumulate(t, g[..., lo:hi])

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tensors, backward)


def affine(x, w, b):
    """x @ w + b applied to the last axis; x is 2-D or 3-D, w is (in, out)."""
    if x.data.ndim not in (2, 3) or w.data.ndim != 2:
        raise DimensionError(
            f"affine: expected 2-D/3-D input and 2-D weight, got {x.data.shape} and {w.data.shape}"
        )
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            f"affine: input width {x.data.shape} does not match weight {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise DimensionError(
            f"affine: bias shape {b.data.shape} does not match weight {w.data.shape}"
        )
    in_dim, out_dim = w.data.shape
    # float64 is the verification mode: einsum accumulates each output row
    # independently in a fixed order, so results never depend on batch shape.
    # float32 keeps the fast BLAS path.
    if x.data.dtype == np.float64:
        def mm(a, bb):
            return np.einsum("ij,jk->ik", a.reshape(-1, a.shape[-1]), bb,
                             optimize=False).reshape(*a.shape[:-1], bb.shape[-1])
    else:
        def mm(a, bb):
            return a @ bb

    def backward(g):
        if x.requires_grad:
            _accumulate(x, mm(g, w.data.T))
        if w.requires_grad:
            _accumulate(w, mm(x.data.reshape(-1, in_dim).T, g.reshape(-1, out_dim)))
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, out_dim).sum(axis=0))

    return _make(mm(x.data, w.data) + b.data, (x, w, b), backward)


def leaky_relu(x, slope=0.2):
    mask = x.data >= 0

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * np.where(mask, x.dtype.type(1), x.dtype.type(slope)))

    return _make(np.where(mask, x.data, x.dtype.type(slope) * x.data), (x,), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _check_axis(x, axis, op):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise UsageError(f"{op}: axis {axis} invalid for shape {x.data.shape}")
    axis = axis % x.data.ndim
    if x.data.shape[axis] == 0:
        raise EmptyReductionError(f"{op}: axis {axis} of shape {x.data.shape} is empty")
    return axis


def sum_axis(x, axis):
    axis = _check_axis(x, axis, "sum_axis")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _make(x.data.sum(axis=axis), (x,), backward)


def mean_axis(x, axis):
    axis = _check_axis(x, axis, "mean_axis")
    n = x.data.shape[axis]

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape) / n)

    return _make(x.data.mean(axis=axis), (x,), backward)


def max_axis(x, axis):
    """Maximum along an axis; backward routes to the argmax (lowest index on ties)."""
    axis = _check_axis(x, axis, "max_axis")
    arg = np.argmax(x.data, axis=axis)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(
                gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
            )
            _accumulate(x, gx)

    return _make(np.max(x.data, axis=axis), (x,), backward)


def softmax_axis(x, axis):
    axis = _check_axis(x, axis, "softmax_axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), backward)


def log_softmax_axis(x, axis):
    """Numerically stable log softmax; companion of softmax_axis for losses."""
    axis = _check_axis(x, axis, "log_softmax_axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    return _make(ls, (x,), backward)


def sum_all(x):
    """Sum of every element, as a scalar tensor."""

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(x.data.sum(), (x,), backward)


# ---------------------------------------------------------------------------
# Gather / scatter
# ---------------------------------------------------------------------------

def gather_rows(src, idx):
    """out[i, j, :] = src[idx[i, j], :]; backward scatter-adds into src rows."""
    if src.data.ndim != 2:
        raise DimensionError(f"gather_rows: src must be 2-D, got {src.data.shape}")
    idx = np.asarray(idx)
    if idx.ndim != 2:
        raise DimensionError(f"gather_rows: idx must be 2-D, got {idx.shape}")
    n = src.data.shape[0]
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise GatherIndexError(
            f"gather_rows: index {idx[i, j]} at ({i}, {j}) outside [0, {n})"
        )

    def backward(g):
        if src.requires_grad:
            gs = np.zeros_like(src.data)
            np.add.at(gs, idx.reshape(-1), g.reshape(-1, g.shape[-1]))
            _accumulate(src, gs)

    return _make(src.data[idx], (src,), backward)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Per-channel scale/shift parameters plus running statistics.

    Channels are the last axis; leading axes are flattened into the batch.
    Running variance stores the unbiased estimate; normalization uses the
    biased (1/N) batch variance.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=DEFAULT_DTYPE):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self):
        return self.gamma.data.shape[0]


def batch_norm(x, state, train):
    """Normalize per channel over all leading axes.

    Train mode uses batch statistics and updates the running estimates;
    eval mode uses the stored running statistics and is side-effect free.
    """
    c = x.data.shape[-1]
    if c != state.channels:
        raise DimensionError(
            f"batch_norm: {c} channels vs state with {state.channels}"
        )
    flat = x.data.reshape(-1, c)
    n = flat.shape[0]
    gamma, beta = state.gamma, state.beta
    eps = x.dtype.type(state.eps)

    if train:
        if n < 2:
            raise StatisticsError(f"batch_norm: train mode needs >= 2 rows, got {n}")
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)  # biased
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv_std
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(
            state.running_mean.dtype
        )
        unbiased = var * (n / (n - 1))
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(
            state.running_var.dtype
        )

        def backward(g):
            gf = g.reshape(-1, c)
            xh = xhat.reshape(-1, c)
            if gamma.requires_grad:
                _accumulate(gamma, (gf * xh).sum(axis=0))
            if beta.requires_grad:
                _accumulate(beta, gf.sum(axis=0))
            if x.requires_grad:
                # Gradient through the batch statistics themselves.
                gxhat = gf * gamma.data
                gx = (
                    gxhat
                    - gxhat.mean(axis=0)
                    - xh * (gxhat * xh).mean(axis=0)
                ) * inv_std
                _accumulate(x, gx.reshape(x.data.shape))

        return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)

    inv_std = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean) * inv_std

    def backward_eval(g):
        gf = g.reshape(-1, c)
        if gamma.requires_grad:
            _accumulate(gamma, (gf * xhat.reshape(-1, c)).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, gf.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, g * (gamma.data * inv_std))

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward_eval)


# ---------------------------------------------------------------------------
# Parameters and gradient checking
# ---------------------------------------------------------------------------

class Parameter:
    """A named leaf tensor with requires_grad set."""

    __slots__ = ("name", "tensor")

    def __init__(self, name, tensor):
        if not tensor.requires_grad:
            raise UsageError(f"parameter {name!r} must require grad")
        self.name = name
        self.tensor = tensor

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


def gradient_check(f, inputs, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps the given tensors to a scalar tensor.  Inputs must be float64
    and sit away from LeakyReLU kinks and max-pool ties by more than `step`.
    Returns max over all elements of |analytic - fd| / max(1, |fd|).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise UsageError("gradient_check requires float64 inputs")
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise UsageError(f"gradient_check: f returned shape {out.data.shape}")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    worst = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*inputs).item()
            flat[i] = orig - step
            lo = f(*inputs).item()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            err = abs(an_flat[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
