"""Reverse-mode automatic differentiation on numpy arrays.

The engine is deliberately small: it provides exactly the operations an
encoder/decoder heatmap network needs (2d cross-correlation, 2x2 max pooling,
nearest-neighbour upsampling, relu, same-shape add, batch norm, mean squared
loss) plus a finite-difference gradient checker. There is no broadcasting
beyond the per-channel patterns these ops use, no views, no fusion.

Conventions:
  * conv2d performs cross-correlation (no kernel flip).
  * maxpool2 breaks ties by first index in row-major window order.
  * Gradients accumulate across backward() calls until zero_grad() is called.
  * float32 is the training dtype; gradient checks run the same code in
    float64 (pass float64 tensors).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class BackwardError(RuntimeError):
    """Raised when backward() is invoked on an invalid target."""


class GradCheckError(RuntimeError):
    """Raised when grad_check hits a non-finite intermediate."""


class Tensor:
    """N-d array with an optional gradient slot and backward closure.

    ``data`` is always a contiguous row-major numpy array of float32 or
    float64. ``grad`` stays ``None`` until a backward pass deposits into it.
    Tensors produced by ops are considered immutable; mutating ``data`` of a
    tensor that participates in a live graph is undefined behaviour.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=""):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:  # note: 0-d arrays are contiguous
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, label=""):
        if not np.all(np.isfinite(self.data)):
            where = label or self.name or "tensor"
            raise FloatingPointError(f"non-finite values in {where}")

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _result(data, parents, backward_fn, name=""):
    """Wrap an op output, attaching the graph only when a parent needs grads."""
    needs = any(p.requires_grad for p in parents) and not _no_grad_active()
    out = Tensor(data, requires_grad=needs, name=name)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


_NO_GRAD_DEPTH = 0


def _no_grad_active():
    return _NO_GRAD_DEPTH > 0


@contextlib.contextmanager
def no_grad():
    """Run forward passes without building the backward graph."""
    global _NO_GRAD_DEPTH
    _NO_GRAD_DEPTH += 1
    try:
        yield
    finally:
        _NO_GRAD_DEPTH -= 1


# --- activation tracing (used by grad_check to spot kink crossings) ---------

_TRACE_SINKS = []


class ActivationTrace:
    """Collects the discrete decisions (relu masks, pool argmaxes) of a pass."""

    def __init__(self):
        self.records = []

    def _add(self, kind, array):
        self.records.append((kind, array))

    def same_decisions(self, other):
        if len(self.records) != len(other.records):
            return False
        for (ka, aa), (kb, ab) in zip(self.records, other.records):
            if ka != kb or aa.shape != ab.shape or not np.array_equal(aa, ab):
                return False
        return True


@contextlib.contextmanager
def activation_trace():
    trace = ActivationTrace()
    _TRACE_SINKS.append(trace)
    try:
        yield trace
    finally:
        _TRACE_SINKS.remove(trace)


def _record_decision(kind, array):
    if _TRACE_SINKS:
        for sink in _TRACE_SINKS:
            sink._add(kind, array)


# --- ops ---------------------------------------------------------------------


def _check_same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.dtype}")
    return dt


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlate ``x`` [N,C,H,W] with ``w`` [F,C,kh,kw], add bias [F].

    Output extent must divide exactly: (H + 2*padding - kh) % stride == 0.
    """
    _check_same_dtype(x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {b.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d invalid stride={stride} padding={padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"conv2d output extent not exact: input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [N,C,Ho,Wo,kh,kw]; contract C,kh,kw against the kernel.
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # [N,Ho,Wo,F]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += b.data[None, :, None, None]

    def grad_fn(g):
        gx = gw = gb = None
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [F,C,kh,kw]
        if x.requires_grad:
            contrib = np.tensordot(g, w.data, axes=([1], [0]))  # [N,Ho,Wo,C,kh,kw]
            contrib = contrib.transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        contrib[:, :, :, :, i, j]
                    )
            if padding:
                gx = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + wd])
            else:
                gx = gxp
        return gx, gw, gb

    return _result(out, (x, w, b), grad_fn, name="conv2d")


def maxpool2(x):
    """2x2 max pooling with stride 2. Returns (pooled, argmax indices).

    The index array has shape [N,C,H/2,W/2] with values in 0..3 enumerating
    the window row-major; ties resolve to the first index. Backward routes the
    incoming gradient only to the argmax position.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even spatial extents, got {h}x{w}")
    windows = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    _record_decision("maxpool2", idx)

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        scattered = np.zeros_like(windows)
        np.put_along_axis(scattered, idx[..., None], g[..., None], axis=-1)
        gx = (
            scattered.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return _result(out, (x,), grad_fn, name="maxpool2"), idx


def upsample_nearest2(x):
    """Replicate each pixel into a 2x2 block. Backward sums the 4 gradients."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        gx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return (np.ascontiguousarray(gx),)

    return _result(out, (x,), grad_fn, name="upsample_nearest2")


def relu(x):
    mask = x.data > 0
    _record_decision("relu", mask)
    out = np.maximum(x.data, x.dtype.type(0))

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        return (g * mask,)

    return _result(out, (x,), grad_fn, name="relu")


def add(a, b):
    """Elementwise add of two identically-shaped tensors."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def grad_fn(g):
        ga = g if a.requires_grad else None
        gb = g if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn, name="add")


def batchnorm2d(x, gamma, beta, running_mean, running_var, eps=1e-5, momentum=0.1,
                training=True):
    """Per-channel batch norm over the N,H,W axes of [N,C,H,W].

    In training mode the batch statistics (biased variance) normalise the
    input and the running arrays are updated in place:
    ``running += momentum * (batch_stat - running)``. In eval mode the running
    statistics normalise and nothing is updated. ``running_mean``/``running_var``
    are plain float arrays owned by the caller, not graph tensors.
    """
    _check_same_dtype(x, gamma, beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d gamma/beta must have shape ({c},), got {gamma.shape} / {beta.shape}"
        )
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean += (momentum * (mu - running_mean)).astype(running_mean.dtype)
        running_var += (momentum * (var - running_var)).astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def grad_fn(g):
        gx = ggamma = gbeta = None
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                # Batch statistics depend on x, so the mean/var terms appear.
                m1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = inv[None, :, None, None] * (gxhat - m1 - xhat * m2)
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), grad_fn, name="batchnorm2d")


def mse_loss(pred, target):
    """Mean over all elements of the squared difference. Returns a scalar."""
    _check_same_dtype(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    scale_ = pred.dtype.type(2.0 / diff.size)

    def grad_fn(g):
        gp = gt = None
        if pred.requires_grad:
            gp = g * (scale_ * diff)
        if target.requires_grad:
            gt = g * (-scale_ * diff)
        return gp, gt

    return _result(out, (pred, target), grad_fn, name="mse_loss")


def tsum(x):
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.full_like(x.data, 1.0) * g,)

    return _result(out, (x,), grad_fn, name="sum")


def scale(x, factor):
    """Multiply by a python scalar constant."""
    out = x.data * x.dtype.type(factor)

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        return (g * x.dtype.type(factor),)

    return _result(out, (x,), grad_fn, name="scale")


# --- backward ----------------------------------------------------------------


def _toposort(root):
    """Iterative post-order over the parent DAG; each node appears once."""
    order = []
    visited = set()
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
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    The per-call gradients are computed in a scratch map and added into each
    tensor's ``grad`` at the end, so calling backward twice without clearing
    doubles the stored gradients exactly.
    """
    if loss.data.ndim != 0:
        raise BackwardError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss does not require grad; nothing to differentiate")
    order = _toposort(loss)
    pass_grads = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = pass_grads.get(id(node))
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = pass_grads.get(id(parent))
                pass_grads[id(parent)] = pg if acc is None else acc + pg
    for node in order:
        g = pass_grads.get(id(node))
        if g is None or not node.requires_grad:
            continue
        if node.grad is None:
            node.grad = np.array(g, copy=True)
        else:
            node.grad = node.grad + g


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# --- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckResult:
    """Outcome of a finite-difference comparison.

    ``num_skipped`` counts elements whose +/- epsilon evaluations took
    different relu/maxpool decisions; central differences are invalid across
    those kinks, so they are excluded (the documented nondifferentiable-point
    exclusion). ``worst`` locates the largest surviving relative error.
    """

    max_rel_error: float
    num_checked: int
    num_skipped: int
    tolerance: float
    worst: tuple = field(default=())

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def _rel_error(a, n):
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(fn, inputs, epsilon=1e-3, tolerance=1e-4):
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    ``fn`` must return a scalar tensor; gradients are checked for every input
    tensor with ``requires_grad=True``, elementwise, using
    (f(x+eps) - f(x-eps)) / (2 eps). Run with float64 inputs for meaningful
    tolerances. Raises GradCheckError if any evaluation goes non-finite,
    naming the offending input element.
    """
    zero_grads(inputs)
    with activation_trace() as base_trace:
        out = fn(*inputs)
    if out.data.ndim != 0:
        raise BackwardError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data):
        raise GradCheckError("non-finite loss at the unperturbed point")
    backward(out)
    analytic = []
    for t in inputs:
        if t.requires_grad:
            analytic.append(np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        else:
            analytic.append(None)
    base_trace.records.clear()

    max_err = 0.0
    worst = ()
    checked = 0
    skipped = 0
    for t_index, t in enumerate(inputs):
        if analytic[t_index] is None:
            continue
        flat = t.data.reshape(-1)
        ana = analytic[t_index].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            with activation_trace() as tr_plus:
                f_plus = float(fn(*inputs).data)
            flat[i] = orig - epsilon
            with activation_trace() as tr_minus:
                f_minus = float(fn(*inputs).data)
            flat[i] = orig
            loc = (t_index, np.unravel_index(i, t.data.shape))
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError(f"non-finite evaluation near input {loc}")
            if not tr_plus.same_decisions(tr_minus):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = _rel_error(float(ana[i]), numeric)
            checked += 1
            if err > max_err:
                max_err = err
                worst = loc
    return GradCheckResult(
        max_rel_error=max_err,
        num_checked=checked,
        num_skipped=skipped,
        tolerance=tolerance,
        worst=worst,
    )
