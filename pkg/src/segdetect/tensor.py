"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors are immutable. Every operation returns a new tensor that remembers its
parents and a closure mapping the output gradient to parent gradients;
``backward`` walks the recorded graph in reverse topological order.

Image tensors use the channels-last layout ``(H, W, C)``; batched operations
use ``(N, H, W, C)``.
"""
import numpy as np

from . import _kernels
from .errors import NumericError, ShapeError

LOG_CLAMP = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"

    @classmethod
    def _result(cls, arr, parents, backward_fn, op):
        arr = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.parents = tuple(parents)
        out.requires_grad = any(p.requires_grad for p in out.parents)
        out.backward_fn = backward_fn if out.requires_grad else None
        out.op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), backward, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(out, (a, b), backward, "mul")


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def tensor_sum(a):
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(a.data.sum(), (a,), backward, "sum")


def tensor_mean(a):
    n = a.data.size

    def backward(g):
        return (np.full(a.shape, float(g) / n),)

    return Tensor._result(a.data.mean(), (a,), backward, "mean")


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x, kernels, bias, stride=1, padding=0):
    """Cross-correlation of ``(H, W, Cin)`` or ``(N, H, W, Cin)`` input with
    ``(k, k, Cin, Cout)`` kernels. Output extent is ``(H + 2p - k) // stride + 1``."""
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be (H,W,C) or (N,H,W,C), got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ShapeError(f"conv2d kernels must be (k,k,Cin,Cout), got {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    xd = x.data[None] if squeeze else x.data
    k, _, cin, cout = kernels.shape
    if xd.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match kernels {kernels.shape}")
    if k > xd.shape[1] + 2 * padding or k > xd.shape[2] + 2 * padding:
        raise ShapeError(f"conv2d kernel {kernels.shape} larger than padded input {x.shape}")

    p = padding
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else np.ascontiguousarray(xd)
    w = np.ascontiguousarray(kernels.data)
    kern = _kernels.active
    out = kern.conv_forward(xp, w, bias.data, stride)

    def backward(g):
        g4 = np.ascontiguousarray(g[None] if squeeze else g)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = kern.conv_backward_input(g4, w, stride, xp.shape[1], xp.shape[2])
            gx = gxp[:, p:p + xd.shape[1], p:p + xd.shape[2], :]
            gx = gx[0] if squeeze else gx
        if kernels.requires_grad:
            gw = kern.conv_backward_weight(xp, g4, stride, k)
        if bias.requires_grad:
            gb = g4.sum(axis=(0, 1, 2))
        return gx, gw, gb

    return Tensor._result(out[0] if squeeze else out, (x, kernels, bias), backward, "conv2d")


def global_avg_pool(x):
    """``(N, H, W, C)`` -> ``(N, C)`` spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N,H,W,C), got {x.shape}")
    n, h, w, c = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return Tensor._result(x.data.mean(axis=(1, 2)), (x,), backward, "global_avg_pool")


def linear(x, weight, bias):
    """``(N, D) @ (D, K) + (K,)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor._result(x.data @ weight.data + bias.data, (x, weight, bias), backward, "linear")


# ---------------------------------------------------------------------------
# softmax and losses
# ---------------------------------------------------------------------------

def _softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def pixel_softmax(logits):
    """Softmax over the last (class) axis, with max subtraction."""
    if logits.shape[-1] < 2:
        raise ShapeError(f"pixel_softmax needs at least 2 classes, got {logits.shape}")
    probs = _softmax(logits.data)

    def backward(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return Tensor._result(probs, (logits,), backward, "pixel_softmax")


def _check_labels(labels, spatial, num_classes):
    labels = np.asarray(labels)
    if labels.shape != spatial:
        raise ShapeError(f"labels shape {labels.shape} does not match prediction {spatial}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes - 1}]")
    return labels.astype(np.intp)


def cross_entropy_loss(probs, labels):
    """Mean over pixels of -log p(label); p is clamped below at 1e-12."""
    lab = _check_labels(labels, probs.shape[:-1], probs.shape[-1])
    flat = probs.data.reshape(-1, probs.shape[-1])
    idx = lab.reshape(-1)
    rows = np.arange(flat.shape[0])
    picked = flat[rows, idx]
    clamped = np.maximum(picked, LOG_CLAMP)
    n = flat.shape[0]

    def backward(g):
        grad = np.zeros_like(flat)
        grad[rows, idx] = np.where(picked > LOG_CLAMP, -float(g) / (n * clamped), 0.0)
        return (grad.reshape(probs.shape),)

    return Tensor._result(-np.log(clamped).sum() / n, (probs,), backward, "cross_entropy")


def softmax_cross_entropy(logits, labels, mask=None):
    """Fused softmax + cross entropy from logits.

    Averages over the pixels selected by ``mask`` (all pixels by default).
    Uses log-sum-exp, so no clamp is needed and saturated pixels keep their
    gradient. Value equals ``cross_entropy_loss(pixel_softmax(logits))``
    wherever the clamp is inactive.
    """
    c = logits.shape[-1]
    lab = _check_labels(labels, logits.shape[:-1], c)
    z = logits.data.reshape(-1, c)
    idx = lab.reshape(-1)
    rows = np.arange(z.shape[0])
    if mask is None:
        weights = np.ones(z.shape[0])
    else:
        weights = np.asarray(mask, dtype=np.float64).reshape(-1)
        if weights.shape[0] != z.shape[0]:
            raise ShapeError(f"mask shape {np.shape(mask)} does not match logits {logits.shape}")
    total = weights.sum()
    if total == 0:
        return Tensor._result(0.0, (logits,), lambda g: (np.zeros(logits.shape),), "softmax_xent")
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[rows, idx] - lse
    value = -(weights * logp).sum() / total

    def backward(g):
        probs = _softmax(z)
        probs[rows, idx] -= 1.0
        probs *= (weights * (float(g) / total))[:, None]
        return (probs.reshape(logits.shape),)

    return Tensor._result(value, (logits,), backward, "softmax_xent")


def bce_with_logits(logits, targets):
    """Mean binary cross entropy of logits against 0/1 targets."""
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    z = logits.data
    # log(1 + exp(-|z|)) form is stable for both signs
    value = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size

    def backward(g):
        return ((sigmoid(z) - t) * (float(g) / n),)

    return Tensor._result(value, (logits,), backward, "bce_with_logits")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def build_tape(loss):
    """Grad-requiring tensors reachable from ``loss`` in topological order."""
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


class Gradients:
    """Mapping from tensor to its gradient array, keyed by identity."""

    def __init__(self):
        self._grads = {}
        self._keep = {}

    def _accumulate(self, tensor, grad):
        key = id(tensor)
        if key in self._grads:
            self._grads[key] = self._grads[key] + grad
        else:
            self._grads[key] = np.array(grad, dtype=np.float64)
            self._keep[key] = tensor

    def __getitem__(self, tensor):
        try:
            return self._grads[id(tensor)]
        except KeyError:
            raise KeyError(f"no gradient recorded for {tensor!r}") from None

    def get(self, tensor, default=None):
        return self._grads.get(id(tensor), default)

    def __contains__(self, tensor):
        return id(tensor) in self._grads

    def __len__(self):
        return len(self._grads)


def backward(loss):
    """Reverse pass from a scalar ``loss``; returns a :class:`Gradients` map
    covering every grad-requiring tensor in its graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = Gradients()
    if not loss.requires_grad:
        return grads
    tape = build_tape(loss)
    grads._accumulate(loss, np.ones(loss.shape))
    for node in reversed(tape):
        g = grads.get(node)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent.requires_grad and pg is not None:
                grads._accumulate(parent, pg)
    return grads
