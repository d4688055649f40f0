"""Finite-difference verification of every differentiable operation.

Each registered case builds small float64 inputs plus a scalar loss function;
``check_op`` compares reverse-mode gradients against central finite
differences, element by element.  Inputs are sampled away from kinks (relu
zero crossings, pooling ties) so the two-sided difference stays on one branch.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import GradientCheckError

# builder(rng) -> (inputs, loss_fn); loss_fn(graph, leaves) -> scalar Tensor
CaseBuilder = Callable[[np.random.Generator], tuple]

REGISTRY: dict[str, CaseBuilder] = {}


def register(name: str):
    def deco(fn: CaseBuilder) -> CaseBuilder:
        REGISTRY[name] = fn
        return fn
    return deco


@dataclass
class OpCheckResult:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float
    elapsed: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude."""
    num = 0.0
    den = 0.0
    for a, n in zip(analytic, numeric):
        num = max(num, float(np.max(np.abs(a - n))) if a.size else 0.0)
        den = max(den, float(np.max(np.abs(a))) if a.size else 0.0,
                  float(np.max(np.abs(n))) if n.size else 0.0)
    if den < 1e-8:
        return num
    return num / den


def _loss_value(loss_fn, arrays) -> float:
    g = T.Graph()
    leaves = [g.leaf(a, requires_grad=True) for a in arrays]
    return loss_fn(g, leaves).item()


def check_case(inputs: list[np.ndarray], loss_fn, step: float) -> float:
    """Relative error between autodiff and central differences for one case."""
    g = T.Graph()
    leaves = [g.leaf(a.copy(), requires_grad=True) for a in inputs]
    g.backward(loss_fn(g, leaves))
    analytic = [leaf.grad.copy() for leaf in leaves]

    numeric = []
    for arr in inputs:
        fd = np.zeros_like(arr)
        flat, fd_flat = arr.reshape(-1), fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = _loss_value(loss_fn, inputs)
            flat[j] = orig - step
            f_minus = _loss_value(loss_fn, inputs)
            flat[j] = orig
            fd_flat[j] = (f_plus - f_minus) / (2.0 * step)
        numeric.append(fd)
    return relative_error(analytic, numeric)


def check_op(name: str, trials: int = 100, seed: int = 0,
             step: float = 1e-5, tolerance: float = 1e-4) -> OpCheckResult:
    builder = REGISTRY[name]
    start = time.monotonic()
    worst = 0.0
    name_key = zlib.crc32(name.encode())
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, name_key, t]))
        inputs, loss_fn = builder(rng)
        worst = max(worst, check_case(inputs, loss_fn, step))
    return OpCheckResult(name, trials, worst, tolerance, time.monotonic() - start)


def check_all(trials: int = 100, seed: int = 0, step: float = 1e-5,
              tolerance: float = 1e-4, raise_on_failure: bool = False) -> list[OpCheckResult]:
    results = [check_op(n, trials, seed, step, tolerance) for n in sorted(REGISTRY)]
    failed = [r for r in results if not r.passed]
    if failed and raise_on_failure:
        worst = max(failed, key=lambda r: r.max_rel_error)
        raise GradientCheckError(
            f"{len(failed)} op(s) exceeded tolerance; worst {worst.name} "
            f"rel error {worst.max_rel_error:.3e} >= {tolerance:g}")
    return results


# ---------------------------------------------------------------------------
# case builders


def _projection(rng, shape):
    return rng.normal(size=shape)


def _project(g, out, r):
    return T.reduce_sum(T.mul(out, g.constant(r)))


def _away_from_zero(x, margin=0.1):
    bump = np.where(x >= 0, margin, -margin)
    return np.where(np.abs(x) < margin, x + bump, x)


@register("matmul")
def _case_matmul(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 2))
    r = _projection(rng, (2, 2))
    return [a, b], lambda g, lv: _project(g, T.matmul(lv[0], lv[1]), r)


def _elementwise_pair(rng, op):
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    r = _projection(rng, (3, 4))
    return [x, y], lambda g, lv: _project(g, op(lv[0], lv[1]), r)


@register("add")
def _case_add(rng):
    return _elementwise_pair(rng, T.add)


@register("sub")
def _case_sub(rng):
    return _elementwise_pair(rng, T.sub)


@register("mul")
def _case_mul(rng):
    return _elementwise_pair(rng, T.mul)


def _elementwise_scalar(rng, op):
    x = rng.normal(size=(3, 4))
    c = float(rng.normal())
    r = _projection(rng, (3, 4))
    return [x], lambda g, lv: _project(g, op(lv[0], c), r)


@register("add_scalar")
def _case_add_scalar(rng):
    return _elementwise_scalar(rng, T.add)


@register("sub_scalar")
def _case_sub_scalar(rng):
    return _elementwise_scalar(rng, T.sub)


@register("mul_scalar")
def _case_mul_scalar(rng):
    return _elementwise_scalar(rng, T.mul)


@register("relu")
def _case_relu(rng):
    x = _away_from_zero(rng.normal(size=(3, 4)))
    r = _projection(rng, (3, 4))
    return [x], lambda g, lv: _project(g, T.relu(lv[0]), r)


@register("exp")
def _case_exp(rng):
    x = rng.normal(size=(3, 3))
    r = _projection(rng, (3, 3))
    return [x], lambda g, lv: _project(g, T.exp(lv[0]), r)


@register("log")
def _case_log(rng):
    x = rng.uniform(0.5, 2.0, size=(3, 3))
    r = _projection(rng, (3, 3))
    return [x], lambda g, lv: _project(g, T.log(lv[0]), r)


@register("square")
def _case_square(rng):
    x = rng.normal(size=(3, 4))
    r = _projection(rng, (3, 4))
    return [x], lambda g, lv: _project(g, T.square(lv[0]), r)


@register("sum")
def _case_sum(rng):
    x = rng.normal(size=(3, 4))
    return [x], lambda g, lv: T.reduce_sum(lv[0])


@register("sum_axis")
def _case_sum_axis(rng):
    x = rng.normal(size=(3, 4))
    r = _projection(rng, (4,))
    return [x], lambda g, lv: _project(g, T.reduce_sum(lv[0], axis=0), r)


@register("mean")
def _case_mean(rng):
    x = rng.normal(size=(3, 4))
    return [x], lambda g, lv: T.reduce_mean(lv[0])


@register("mean_axis")
def _case_mean_axis(rng):
    x = rng.normal(size=(3, 4))
    r = _projection(rng, (3,))
    return [x], lambda g, lv: _project(g, T.reduce_mean(lv[0], axis=1), r)


@register("reshape")
def _case_reshape(rng):
    x = rng.normal(size=(2, 6))
    r = _projection(rng, (3, 4))
    return [x], lambda g, lv: _project(g, T.reshape(lv[0], (3, 4)), r)


@register("slice_cols")
def _case_slice_cols(rng):
    x = rng.normal(size=(3, 6))
    r = _projection(rng, (3, 2))
    return [x], lambda g, lv: _project(g, T.slice_cols(lv[0], 2, 4), r)


@register("add_bias")
def _case_add_bias(rng):
    x = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    r = _projection(rng, (3, 4))
    return [x, b], lambda g, lv: _project(g, T.add_bias(lv[0], lv[1]), r)


@register("log_softmax")
def _case_log_softmax(rng):
    x = rng.normal(size=(3, 5))
    r = _projection(rng, (3, 5))
    return [x], lambda g, lv: _project(g, T.log_softmax(lv[0]), r)


@register("fully_connected")
def _case_fully_connected(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=(2,))
    r = _projection(rng, (3, 2))
    return [x, w, b], lambda g, lv: _project(
        g, T.add_bias(T.matmul(lv[0], lv[1]), lv[2]), r)


@register("conv2d")
def _case_conv2d(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=(2,))
    r = _projection(rng, (1, 2, 4, 4))
    return [x, w, b], lambda g, lv: _project(
        g, T.conv2d(lv[0], lv[1], lv[2], stride=1, pad=1), r)


@register("conv2d_stride2")
def _case_conv2d_stride2(rng):
    x = rng.normal(size=(2, 1, 5, 5))
    w = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=(2,))
    r = _projection(rng, (2, 2, 2, 2))
    return [x, w, b], lambda g, lv: _project(
        g, T.conv2d(lv[0], lv[1], lv[2], stride=2, pad=0), r)


def _pool_safe_input(rng, shape, kernel, stride):
    """Sample until every pooling window has a clear unique maximum."""
    n, c, h, w = shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    while True:
        x = rng.normal(size=shape)
        win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
        win = win[:, :, ::stride, ::stride, :, :].reshape(n, c, oh, ow, -1)
        top2 = np.sort(win, axis=-1)[..., -2:]
        if np.min(top2[..., 1] - top2[..., 0]) > 1e-3:
            return x


@register("maxpool2d")
def _case_maxpool2d(rng):
    x = _pool_safe_input(rng, (1, 2, 4, 4), kernel=2, stride=2)
    r = _projection(rng, (1, 2, 2, 2))
    return [x], lambda g, lv: _project(g, T.maxpool2d(lv[0], 2, 2), r)


@register("maxpool2d_overlap")
def _case_maxpool2d_overlap(rng):
    x = _pool_safe_input(rng, (1, 1, 5, 5), kernel=3, stride=2)
    r = _projection(rng, (1, 1, 2, 2))
    return [x], lambda g, lv: _project(g, T.maxpool2d(lv[0], 3, 2), r)


def _bn_case(rng, shape, training):
    c = shape[1]
    x = rng.normal(size=shape)
    scale = rng.uniform(0.5, 1.5, size=(c,))
    shift = rng.normal(size=(c,))
    rm = rng.normal(size=(c,))
    rv = rng.uniform(0.5, 2.0, size=(c,))

    def loss_fn(g, lv):
        out = T.batchnorm(lv[0], lv[1], lv[2], rm.copy(), rv.copy(),
                          eps=1e-5, momentum=0.9, training=training)
        return T.reduce_sum(T.mul(out, g.constant(loss_fn.r)))

    loss_fn.r = _projection(rng, shape)
    return [x, scale, shift], loss_fn


@register("batchnorm_train")
def _case_bn_train(rng):
    return _bn_case(rng, (4, 3), training=True)


@register("batchnorm_train_conv")
def _case_bn_train_conv(rng):
    return _bn_case(rng, (3, 2, 2, 2), training=True)


@register("batchnorm_eval")
def _case_bn_eval(rng):
    return _bn_case(rng, (4, 3), training=False)
