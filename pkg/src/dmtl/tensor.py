"""Dense tensors with reverse-mode automatic differentiation.

A ``Graph`` is a tape: every operation appends one node recording its kind,
the node ids of its inputs, the output tensor, and a closure that maps the
output gradient to input gradients.  ``Graph.backward`` walks the tape in
reverse and accumulates gradients into a store keyed by node id, so a tensor
feeding several consumers receives the sum of their contributions.

Values are row-major contiguous numpy arrays, float32 by default; float64 is
used by the verification suites.  Broadcasting is limited to scalar-vs-tensor;
structured shapes (bias rows, convolution kernels, per-channel statistics)
are handled by dedicated operations so every edge in the graph is auditable.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

DTYPES = (np.float32, np.float64)


def _as_dtype(dtype) -> np.dtype:
    d = np.dtype(dtype)
    if d not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {d}; use float32 or float64")
    return d


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d scalars to rank 1
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


class Tensor:
    """A value in (or detached from) a computation graph.

    Detached tensors (``graph is None``) are plain immutable values; attached
    tensors know their node id and expose ``grad`` after a backward pass.
    """

    __slots__ = ("data", "requires_grad", "graph", "node_id")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 graph: Optional["Graph"] = None, node_id: Optional[int] = None):
        self.data = data
        self.requires_grad = requires_grad
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def grad(self) -> Optional[np.ndarray]:
        """Gradient computed by the most recent backward pass, if any."""
        if self.graph is None or self.node_id is None:
            return None
        return self.graph.gradients.get(self.node_id)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # Operator sugar; mixed scalar operands take the scalar-broadcast path.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One operation record on the tape."""

    __slots__ = ("kind", "input_ids", "tensor", "backward_fn")

    def __init__(self, kind: str, input_ids: tuple,
                 tensor: Tensor, backward_fn: Optional[Callable]):
        self.kind = kind
        self.input_ids = input_ids
        self.tensor = tensor
        self.backward_fn = backward_fn


class Graph:
    """Tape of operation nodes plus the gradient store filled by backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, np.ndarray] = {}

    def leaf(self, data, requires_grad: bool = False, dtype=None) -> Tensor:
        """Wrap an array as a leaf node.  Shares the buffer when possible."""
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        else:
            _as_dtype(arr.dtype)
        arr = _contiguous(arr)
        t = Tensor(arr, requires_grad=requires_grad, graph=self,
                   node_id=len(self.nodes))
        self.nodes.append(Node("leaf", (), t, None))
        return t

    def constant(self, data, dtype=None) -> Tensor:
        return self.leaf(data, requires_grad=False, dtype=dtype)

    def _record(self, kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
                backward_fn: Optional[Callable]) -> Tensor:
        requires = any(t.requires_grad for t in inputs)
        t = Tensor(_contiguous(np.asarray(out_data)), requires_grad=requires,
                   graph=self, node_id=len(self.nodes))
        self.nodes.append(Node(kind, tuple(i.node_id for i in inputs), t,
                               backward_fn if requires else None))
        return t

    def count_kind(self, kind: str) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse-accumulate d(loss)/d(node) for every contributing node.

        Returns the gradient store (node id -> array).  Nodes flagged
        requires_grad that do not lie on a path to the loss receive zeros.
        """
        if loss.graph is not self:
            raise ContractError("loss tensor does not belong to this graph")
        if loss.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}")
        self.gradients = {loss.node_id: np.ones((), dtype=loss.data.dtype)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            out_grad = self.gradients.get(node.tensor.node_id)
            if out_grad is None or node.backward_fn is None:
                continue
            input_grads = node.backward_fn(out_grad)
            for input_id, grad in zip(node.input_ids, input_grads):
                if grad is None:
                    continue
                if not self.nodes[input_id].tensor.requires_grad:
                    continue
                existing = self.gradients.get(input_id)
                if existing is None:
                    self.gradients[input_id] = np.array(grad, copy=True)
                else:
                    existing += grad
        for node in self.nodes:
            if node.tensor.requires_grad and node.tensor.node_id not in self.gradients:
                self.gradients[node.tensor.node_id] = np.zeros_like(node.tensor.data)
        return self.gradients


def _graph_of(*tensors: Tensor) -> Graph:
    graphs = {id(t.graph): t.graph for t in tensors if t.graph is not None}
    if len(graphs) != 1:
        raise ContractError("operands must belong to exactly one shared graph")
    return next(iter(graphs.values()))


def _scalar(value, dtype) -> np.ndarray:
    return np.asarray(value, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    g = _graph_of(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(grad):
        return (grad @ b_data.T if need_a else None,
                a_data.T @ grad if need_b else None)

    return g._record("matmul", (a, b), out, backward)


def _binary(kind: str, a: Tensor, b, fwd, bwd_a, bwd_b) -> Tensor:
    """Shared plumbing for add/sub/mul with scalar-vs-tensor broadcast."""
    if isinstance(b, Tensor):
        g = _graph_of(a, b)
        if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
            raise DimensionError(f"{kind} shapes differ: {a.shape} vs {b.shape}")
        out = fwd(a.data, b.data)
        a_shape, b_shape = a.data.shape, b.data.shape

        def backward(grad):
            ga = bwd_a(grad, a.data, b.data)
            gb = bwd_b(grad, a.data, b.data)
            if a_shape != grad.shape:  # scalar operand: fold back
                ga = np.sum(ga, dtype=grad.dtype).reshape(a_shape)
            if b_shape != grad.shape:
                gb = np.sum(gb, dtype=grad.dtype).reshape(b_shape)
            return (ga, gb)

        return g._record(kind, (a, b), out, backward)
    # python scalar operand
    g = _graph_of(a)
    c = _scalar(b, a.data.dtype)
    out = fwd(a.data, c)

    def backward_scalar(grad):
        return (bwd_a(grad, a.data, c),)

    return g._record(kind, (a,), out, backward_scalar)


def add(a: Tensor, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def relu(a: Tensor) -> Tensor:
    g = _graph_of(a)
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))
    return g._record("relu", (a,), out, lambda grad: (grad * mask,))


def exp(a: Tensor) -> Tensor:
    g = _graph_of(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflow produced non-finite values")
    return g._record("exp", (a,), out, lambda grad: (grad * out,))


def log(a: Tensor) -> Tensor:
    g = _graph_of(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    out = np.log(a.data)
    a_data = a.data
    return g._record("log", (a,), out, lambda grad: (grad / a_data,))


def square(a: Tensor) -> Tensor:
    g = _graph_of(a)
    out = a.data * a.data
    a_data = a.data
    return g._record("square", (a,), out, lambda grad: (grad * 2 * a_data,))


def _check_axis(x: Tensor, axis: Optional[int]) -> Optional[int]:
    if axis is None:
        return None
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.data.ndim


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    g = _graph_of(x)
    axis = _check_axis(x, axis)
    out = np.sum(x.data, axis=axis)
    in_shape = x.data.shape

    def backward(grad):
        if axis is None:
            return (np.broadcast_to(grad, in_shape).astype(grad.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(grad, axis), in_shape).copy(),)

    return g._record("sum", (x,), out, backward)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    g = _graph_of(x)
    axis = _check_axis(x, axis)
    out = np.mean(x.data, axis=axis)
    in_shape = x.data.shape
    n = x.data.size if axis is None else in_shape[axis]

    def backward(grad):
        scaled = grad / n
        if axis is None:
            return (np.broadcast_to(scaled, in_shape).astype(grad.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(scaled, axis), in_shape).copy(),)

    return g._record("mean", (x,), out, backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    g = _graph_of(x)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    out = x.data.reshape(shape)
    in_shape = x.data.shape
    return g._record("reshape", (x,), out,
                     lambda grad: (grad.reshape(in_shape),))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice of a rank-2 tensor."""
    g = _graph_of(x)
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice [{start}:{stop}] invalid for shape {x.shape}")
    out = x.data[:, start:stop]
    in_shape = x.data.shape

    def backward(grad):
        full = np.zeros(in_shape, dtype=grad.dtype)
        full[:, start:stop] = grad
        return (full,)

    return g._record("slice_cols", (x,), out, backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-f bias row to every row of an [n, f] tensor."""
    g = _graph_of(x, b)
    if x.data.ndim != 2 or b.data.shape != (x.shape[1],):
        raise DimensionError(f"add_bias shapes incompatible: {x.shape} + {b.shape}")
    out = x.data + b.data
    return g._record("add_bias", (x, b), out,
                     lambda grad: (grad, grad.sum(axis=0)))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of an [n, c] tensor, max-shifted for stability."""
    g = _graph_of(x)
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax expects rank 2, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(grad):
        p = np.exp(out)
        return (grad - p * grad.sum(axis=1, keepdims=True),)

    return g._record("log_softmax", (x,), out, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int, pad: int) -> Tensor:
    """2-D convolution of [n, ci, h, w] with [co, ci, kh, kw] kernels + bias [co]."""
    g = _graph_of(x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input/kernels, got {x.shape}, {w.shape}")
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w:
        raise DimensionError(f"conv2d channel mismatch: input {ci} vs kernel {ci_w}")
    if b.data.shape != (co,):
        raise DimensionError(f"conv2d bias shape {b.shape} != ({co},)")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d output collapses for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # cols: [n, ci*kh*kw, oh*ow]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, ci * kh * kw, oh * ow)
    w_mat = w.data.reshape(co, ci * kh * kw)
    out = (w_mat @ cols).reshape(n, co, oh, ow) + b.data.reshape(1, co, 1, 1)
    padded_shape = xp.shape

    need_x = x.requires_grad

    def backward(grad):
        grad_mat = grad.reshape(n, co, oh * ow)
        dw = np.matmul(grad_mat, cols.transpose(0, 2, 1)).sum(axis=0) \
            .reshape(w.data.shape)
        db = grad.sum(axis=(0, 2, 3))
        if not need_x:
            return (None, dw, db)
        dcols = np.matmul(w_mat.T, grad_mat)
        dxp = np.zeros(padded_shape, dtype=grad.dtype)
        dwin = dcols.reshape(n, ci, kh, kw, oh, ow)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dwin[:, :, i, j, :, :]
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return (dx, dw, db)

    return g._record("conv2d", (x, w, b), out, backward)


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Max pooling over [n, c, h, w]; ties resolve to the lowest flat index."""
    g = _graph_of(x)
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects rank 4, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"pool kernel {kernel} exceeds input {x.shape}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel),
                                                       axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    flat = windows.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)  # first max = lowest flat index in the window
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(grad):
        dx = np.zeros((n, c, h, w), dtype=grad.dtype)
        ki, kj = np.unravel_index(arg, (kernel, kernel))
        ai = np.arange(oh).reshape(1, 1, oh, 1) * stride + ki
        aj = np.arange(ow).reshape(1, 1, 1, ow) * stride + kj
        ni = np.broadcast_to(np.arange(n).reshape(n, 1, 1, 1), arg.shape)
        cc = np.broadcast_to(np.arange(c).reshape(1, c, 1, 1), arg.shape)
        np.add.at(dx, (ni.reshape(-1), cc.reshape(-1),
                       ai.reshape(-1), aj.reshape(-1)), grad.reshape(-1))
        return (dx,)

    return g._record("maxpool2d", (x,), out, backward)


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              eps: float, momentum: float, training: bool,
              update_running: bool = True) -> Tensor:
    """Per-channel batch normalization.

    Accepts [n, c] or [n, c, h, w]; statistics run over all non-channel axes.
    Training mode normalizes by batch statistics (biased variance) and, when
    ``update_running`` holds, folds the batch statistics into the running
    estimates as ``running = momentum * running + (1 - momentum) * batch``
    (unbiased variance for the running estimate).  Eval mode is an affine map
    using the running statistics and never mutates them.
    """
    from .errors import DegenerateBatchError

    g = _graph_of(x, scale, shift)
    if x.data.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects rank 2 or 4, got {x.shape}")
    c = x.shape[1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise DimensionError(f"batchnorm scale/shift must be ({c},)")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    param_shape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)

    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                "batchnorm train mode requires batch size >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased, used for normalization
        n_stat = x.data.size // c
        if update_running:
            unbiased = var * (n_stat / (n_stat - 1))
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * unbiased
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.data - mean.reshape(param_shape)) * inv_std.reshape(param_shape)
        out = scale.data.reshape(param_shape) * x_hat + shift.data.reshape(param_shape)
        scale_data = scale.data

        def backward(grad):
            dshift = grad.sum(axis=axes)
            dscale = (grad * x_hat).sum(axis=axes)
            dx_hat = grad * scale_data.reshape(param_shape)
            m = n_stat
            sum_dxh = dx_hat.sum(axis=axes).reshape(param_shape)
            sum_dxh_xh = (dx_hat * x_hat).sum(axis=axes).reshape(param_shape)
            dx = (inv_std.reshape(param_shape) / m) * (
                m * dx_hat - sum_dxh - x_hat * sum_dxh_xh)
            return (dx, dscale, dshift)

        return g._record("batchnorm_train", (x, scale, shift), out, backward)

    inv_std = 1.0 / np.sqrt(running_var + eps)
    gain = scale.data * inv_std
    centered = x.data - running_mean.reshape(param_shape)
    out = gain.reshape(param_shape) * centered + shift.data.reshape(param_shape)

    def backward_eval(grad):
        dx = grad * gain.reshape(param_shape)
        dscale = (grad * centered * inv_std.reshape(param_shape)).sum(axis=axes)
        dshift = grad.sum(axis=axes)
        return (dx, dscale, dshift)

    return g._record("batchnorm_eval", (x, scale, shift), out, backward_eval)
