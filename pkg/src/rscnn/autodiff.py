"""Reverse-mode automatic differentiation on numpy arrays.

Provides the operator set the relation-shape convolution networks need:
matrix products, broadcast elementwise arithmetic, axis reductions, batch
normalization, dropout, row gathering, concatenation, and the two task
losses. Each operation runs eagerly and tapes a backward closure; calling
``backward`` on a scalar loss walks the graph in reverse topological order
and accumulates gradients into every tensor that requires them.

The engine is precision-parameterized: build parameters in float64 for
gradient checking, float32 for training. Operations preserve the dtype of
their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(x, dtype=None):
    a = np.asarray(x)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return a


class Tensor:
    """A numpy array plus a gradient slot and a taped backward closure.

    Gradients accumulate across backward passes until explicitly zeroed,
    so shared parameters collect one contribution per use site.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self) -> int:
        return id(self)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _ensure_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(_as_array(x, dtype))


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        g = np.asarray(g, dtype=t.data.dtype)
        t.grad = np.broadcast_to(g, t.data.shape).copy() if g.shape != t.data.shape else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes a forward broadcast expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# core operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a = _ensure_tensor(a)
    b = _ensure_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")
    out = _make(a.data @ b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    out._backward = backward
    return out


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{opname} operands not broadcastable: {a.data.shape} vs {b.data.shape}") from None


def add(a, b) -> Tensor:
    a = _ensure_tensor(a)
    b = _ensure_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    out = _make(a.data + b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a = _ensure_tensor(a)
    b = _ensure_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    out = _make(a.data * b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    x = _ensure_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaNs visible so broken numerics surface as such
    out = _make(np.maximum(x.data, 0.0), (x,), None)

    def backward():
        _accumulate(x, out.grad * mask)

    out._backward = backward
    return out


def _check_axis(x: Tensor, axis: int, opname: str) -> int:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"{opname}: axis {axis} out of range for shape {x.data.shape}")
    return axis % x.data.ndim


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``. Ties route the gradient to the lowest index."""
    x = _ensure_tensor(x)
    axis = _check_axis(x, axis, "reduce_max")
    idx = np.argmax(x.data, axis=axis)
    out = _make(np.max(x.data, axis=axis), (x,), None)

    def backward():
        g = np.zeros_like(x.data)
        np.put_along_axis(g, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis=axis)
        _accumulate(x, g)

    out._backward = backward
    return out


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    x = _ensure_tensor(x)
    if axis is None:
        out = _make(x.data.sum(), (x,), None)

        def backward():
            _accumulate(x, np.broadcast_to(out.grad, x.data.shape))

    else:
        axis = _check_axis(x, axis, "reduce_sum")
        out = _make(x.data.sum(axis=axis), (x,), None)

        def backward():
            _accumulate(x, np.broadcast_to(np.expand_dims(out.grad, axis), x.data.shape))

    out._backward = backward
    return out


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _ensure_tensor(x)
    if axis is None:
        n = x.data.size
        out = _make(x.data.mean(), (x,), None)

        def backward():
            _accumulate(x, np.broadcast_to(out.grad / n, x.data.shape))

    else:
        axis = _check_axis(x, axis, "reduce_mean")
        n = x.data.shape[axis]
        out = _make(x.data.mean(axis=axis), (x,), None)

        def backward():
            _accumulate(x, np.broadcast_to(np.expand_dims(out.grad / n, axis), x.data.shape))

    out._backward = backward
    return out


def reshape(x: Tensor, shape) -> Tensor:
    x = _ensure_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.data.shape} to {tuple(shape)}") from None
    out = _make(data, (x,), None)

    def backward():
        _accumulate(x, out.grad.reshape(x.data.shape))

    out._backward = backward
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_ensure_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of empty sequence")
    axis = _check_axis(tensors[0], axis, "concat")
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    out._backward = backward
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a (N, C) tensor by an integer index array.

    The output has shape ``indices.shape + (C,)``. Backward scatter-adds,
    so rows referenced several times accumulate every contribution.
    """
    x = _ensure_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a rank-2 table, got {x.data.shape}")
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError(f"gather_rows index out of range for table with {x.data.shape[0]} rows")
    out = _make(x.data[idx], (x,), None)

    def backward():
        g = np.zeros_like(x.data)
        np.add.at(g, idx.reshape(-1), out.grad.reshape(-1, x.data.shape[1]))
        _accumulate(x, g)

    out._backward = backward
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scales kept activations by 1/(1-p) at train time."""
    x = _ensure_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = keep / (1.0 - p)
    out = _make(x.data * scale, (x,), None)

    def backward():
        _accumulate(x, out.grad * scale)

    out._backward = backward
    return out


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a (N, C) tensor to unit Euclidean norm."""
    x = _ensure_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects rank 2, got {x.data.shape}")
    # smoothed denominator: a zero row maps to zero with a bounded
    # gradient instead of the 1/eps spike a hard clamp produces
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    out = _make(x.data / norms, (x,), None)

    def backward():
        g = out.grad
        # d(x/n)/dx = I/n - x x^T / n^3
        dot = (g * x.data).sum(axis=1, keepdims=True)
        _accumulate(x, g / norms - x.data * (dot / norms**3))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# parameters and batch normalization


@dataclass
class Parameter:
    """Named leaf tensor with initialization metadata (kind, fan_in)."""

    name: str
    tensor: Tensor
    kind: str = "weight"  # weight | bias | bn_scale | bn_shift
    fan_in: int = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    ``momentum`` is the weight of the current batch statistics in the
    running-average update and is changed only by the scheduler.
    """

    scale: Parameter
    shift: Parameter
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    momentum: float = 0.9
    eps: float = BN_EPS


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over the row axis of a (R, C) tensor.

    Training mode normalizes with batch statistics (biased variance) and
    folds them into the running estimates; inference mode uses the running
    estimates. A single-row training batch is rejected.
    """
    x = _ensure_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"batchnorm expects rank 2, got {x.data.shape}")
    c = x.data.shape[1]
    if state.scale.data.shape != (c,):
        raise ShapeError(f"batchnorm channel mismatch: input {x.data.shape}, scale {state.scale.data.shape}")
    gamma, beta = state.scale.tensor, state.shift.tensor
    eps = state.eps

    if training:
        if x.data.shape[0] < 2:
            raise ShapeError("batchnorm in training mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), None)
        rows = x.data.shape[0]

        def backward():
            g = out.grad
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=0))
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).sum(axis=0))
            if x.requires_grad:
                dxhat = g * gamma.data
                _accumulate(
                    x,
                    (inv / rows) * (rows * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)),
                )

        out._backward = backward
        return out

    inv = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean) * inv
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), None)

    def backward():
        g = out.grad
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=0))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=0))
        if x.requires_grad:
            _accumulate(x, g * (gamma.data * inv))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy between row softmaxes and integer class targets."""
    logits = _ensure_tensor(logits)
    t = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects rank-2 logits, got {logits.data.shape}")
    if t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"targets shape {t.shape} does not match logits {logits.data.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise ShapeError("targets must be integers")
    k = logits.data.shape[1]
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ShapeError(f"target class out of range for {k} classes")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    lse = np.log(sez).squeeze(1) + zmax.squeeze(1)
    rows = np.arange(z.shape[0])
    losses = lse - z[rows, t]
    out = _make(np.asarray(losses.mean(), dtype=z.dtype), (logits,), None)

    def backward():
        probs = ez / sez
        probs[rows, t] -= 1.0
        _accumulate(logits, probs * (out.grad / z.shape[0]))

    out._backward = backward
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy row softmax (no gradient); used for prediction/voting."""
    z = np.asarray(logits)
    ez = np.exp(z - z.max(axis=-1, keepdims=True))
    return ez / ez.sum(axis=-1, keepdims=True)


def cosine_loss(pred: Tensor, target, eps: float = 1e-12) -> Tensor:
    """Mean of 1 - cos(angle) between predicted rows and unit target rows."""
    pred = _ensure_tensor(pred)
    t = _as_array(target, pred.data.dtype)
    if pred.data.ndim != 2 or pred.data.shape != t.shape:
        raise ShapeError(f"cosine_loss shapes differ: {pred.data.shape} vs {t.shape}")
    tn = np.sqrt((t * t).sum(axis=1))
    if np.abs(tn - 1.0).max() > 1e-5:
        raise ValueError("cosine_loss targets must be unit-norm")
    n = np.sqrt((pred.data * pred.data).sum(axis=1, keepdims=True) + eps)
    dot = (pred.data * t).sum(axis=1, keepdims=True)
    cos = dot / n
    out = _make(np.asarray((1.0 - cos).mean(), dtype=pred.data.dtype), (pred,), None)
    rows = pred.data.shape[0]

    def backward():
        dcos = t / n - pred.data * (dot / n**3)
        _accumulate(pred, dcos * (-out.grad / rows))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(node) into every reachable tensor.

    The loss must be scalar. Gradients add onto whatever is already in
    ``.grad``, so repeated calls without zeroing double the result.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, iter(loss._parents))]
    seen.add(id(loss))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    # interior grads are transient per pass; only leaves accumulate across calls
    for node in order:
        if node._parents:
            node.grad = None
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


def zero_grads(params) -> None:
    """Clear gradients on an iterable of Parameters (or Tensors)."""
    for p in params:
        t = p.tensor if isinstance(p, Parameter) else p
        t.grad = None


class ParamStore:
    """Ordered registry of parameters and batch-norm states.

    Insertion order is the canonical iteration order used by the optimizer
    and the checkpoint writer, which keeps runs bit-reproducible.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self.bn_states: dict[str, BatchNormState] = {}

    def add_param(self, name: str, shape, kind: str = "weight", fan_in: int = 0) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        p = Parameter(name=name, tensor=t, kind=kind, fan_in=fan_in)
        self.params[name] = p
        return p

    def add_bn(self, name: str, channels: int) -> BatchNormState:
        if name in self.bn_states:
            raise ValueError(f"duplicate batch-norm name {name!r}")
        scale = self.add_param(f"{name}.scale", (channels,), kind="bn_scale")
        shift = self.add_param(f"{name}.shift", (channels,), kind="bn_shift")
        st = BatchNormState(
            scale=scale,
            shift=shift,
            running_mean=np.zeros(channels, dtype=self.dtype),
            running_var=np.ones(channels, dtype=self.dtype),
        )
        self.bn_states[name] = st
        return st

    def zero_grads(self) -> None:
        zero_grads(self.params.values())

    def __iter__(self):
        return iter(self.params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def total_size(self) -> int:
        return sum(p.data.size for p in self)
