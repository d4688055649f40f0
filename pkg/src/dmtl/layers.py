"""Layer definitions, parameter initialization, and architecture presets.

A network is a list of layer specs applied in order.  Shapes are checked
statically against a declared per-sample input shape before any parameter is
allocated, so a mis-sized stack fails at build time with the offending layer
named.  Convolutional stacks use channels-first sample shapes (c, h, w);
fully connected layers accept either a flat (f,) shape or flatten a
convolutional shape in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from . import tensor as T
from .errors import ArchitectureError, ContractError


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1 \
                or self.pad < 0:
            raise ContractError(f"invalid conv spec {self}")


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ContractError(f"invalid pool spec {self}")


@dataclass(frozen=True)
class BatchNorm:
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        if self.epsilon <= 0 or not 0 < self.momentum < 1:
            raise ContractError(f"invalid batchnorm spec {self}")


@dataclass(frozen=True)
class FullyConnected:
    out_features: int

    def __post_init__(self):
        if self.out_features < 1:
            raise ContractError(f"invalid fully connected spec {self}")


@dataclass(frozen=True)
class ReLU:
    pass


LayerSpec = Union[Conv, MaxPool, BatchNorm, FullyConnected, ReLU]

_KIND_NAMES = {Conv: "conv", MaxPool: "pool", BatchNorm: "bn",
               FullyConnected: "fc", ReLU: "relu"}


def spec_to_dict(spec: LayerSpec) -> dict:
    d = {"kind": _KIND_NAMES[type(spec)]}
    d.update(spec.__dict__)
    return d


def spec_from_dict(d: dict) -> LayerSpec:
    kinds = {"conv": Conv, "pool": MaxPool, "bn": BatchNorm,
             "fc": FullyConnected, "relu": ReLU}
    args = {k: v for k, v in d.items() if k != "kind"}
    return kinds[d["kind"]](**args)


def output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Per-sample output shape of one layer, or ArchitectureError."""
    if isinstance(spec, Conv):
        if len(in_shape) != 3:
            raise ArchitectureError(f"conv needs (c, h, w) input, got {in_shape}")
        c, h, w = in_shape
        oh = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ArchitectureError(f"conv kernel {spec.kernel} collapses input {in_shape}")
        return (spec.out_channels, oh, ow)
    if isinstance(spec, MaxPool):
        if len(in_shape) != 3:
            raise ArchitectureError(f"pool needs (c, h, w) input, got {in_shape}")
        c, h, w = in_shape
        if spec.kernel > h or spec.kernel > w:
            raise ArchitectureError(f"pool kernel {spec.kernel} exceeds input {in_shape}")
        return (c, (h - spec.kernel) // spec.stride + 1,
                (w - spec.kernel) // spec.stride + 1)
    if isinstance(spec, BatchNorm):
        if len(in_shape) not in (1, 3):
            raise ArchitectureError(f"batchnorm input {in_shape} unsupported")
        return in_shape
    if isinstance(spec, FullyConnected):
        return (spec.out_features,)
    if isinstance(spec, ReLU):
        return in_shape
    raise ArchitectureError(f"unknown layer spec {spec!r}")


def check_stack(specs: Iterable[LayerSpec], input_shape: tuple) -> tuple:
    """Run the static shape check; returns the final per-sample shape."""
    shape = tuple(input_shape)
    for i, spec in enumerate(specs):
        try:
            shape = output_shape(spec, shape)
        except ArchitectureError as e:
            raise ArchitectureError(
                f"layer {i} ({_KIND_NAMES[type(spec)]}): {e}") from None
    return shape


@dataclass
class Param:
    """One named parameter array.  ``decay`` marks membership in the
    weight-complexity penalty (weight matrices and BN scales; not biases,
    shifts, or running statistics)."""
    name: str
    data: np.ndarray
    trainable: bool = True
    decay: bool = True


class ParameterSet:
    """Ordered, uniquely named parameter map for one layer stack."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, param: Param) -> None:
        if param.name in self._params:
            raise ContractError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def astype(self, dtype) -> "ParameterSet":
        out = ParameterSet()
        for p in self:
            out.add(Param(p.name, p.data.astype(dtype), p.trainable, p.decay))
        return out

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for p in self:
            out.add(Param(p.name, p.data.copy(), p.trainable, p.decay))
        return out

    def count_values(self, trainable_only: bool = True) -> int:
        return sum(p.data.size for p in self
                   if p.trainable or not trainable_only)


def layer_names(specs: Iterable[LayerSpec]) -> list[str]:
    names = []
    counts: dict[str, int] = {}
    for spec in specs:
        base = _KIND_NAMES[type(spec)]
        counts[base] = counts.get(base, 0) + 1
        names.append(f"{base}{counts[base]}")
    return names


def init_random(specs: list[LayerSpec], input_shape: tuple, seed,
                dtype=np.float32) -> ParameterSet:
    """Allocate parameters for a stack: fan-in scaled uniform weights,
    zero biases, identity batch-norm.  Bitwise deterministic per seed
    (an int or a numpy SeedSequence)."""
    check_stack(specs, input_shape)
    rng = np.random.default_rng(seed)
    pset = ParameterSet()
    shape = tuple(input_shape)
    for name, spec in zip(layer_names(specs), specs):
        if isinstance(spec, Conv):
            c_in = shape[0]
            fan_in = c_in * spec.kernel * spec.kernel
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound,
                            size=(spec.out_channels, c_in, spec.kernel, spec.kernel))
            pset.add(Param(f"{name}.weight", w.astype(dtype)))
            pset.add(Param(f"{name}.bias",
                           np.zeros(spec.out_channels, dtype=dtype), decay=False))
        elif isinstance(spec, FullyConnected):
            fan_in = int(np.prod(shape))
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, spec.out_features))
            pset.add(Param(f"{name}.weight", w.astype(dtype)))
            pset.add(Param(f"{name}.bias",
                           np.zeros(spec.out_features, dtype=dtype), decay=False))
        elif isinstance(spec, BatchNorm):
            c = shape[0]
            pset.add(Param(f"{name}.scale", np.ones(c, dtype=dtype)))
            pset.add(Param(f"{name}.shift", np.zeros(c, dtype=dtype), decay=False))
            pset.add(Param(f"{name}.running_mean", np.zeros(c, dtype=dtype),
                           trainable=False, decay=False))
            pset.add(Param(f"{name}.running_var", np.ones(c, dtype=dtype),
                           trainable=False, decay=False))
        shape = output_shape(spec, shape)
    return pset


def forward_layer(spec: LayerSpec, name: str, bound: dict[str, T.Tensor],
                  pset: ParameterSet, x: T.Tensor, mode: str) -> T.Tensor:
    """Apply one layer inside the live graph.

    ``bound`` maps parameter names to graph leaves (see ``bind``); batch-norm
    running statistics are read from (and in train mode written to) the
    ParameterSet arrays directly, outside the graph.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if isinstance(spec, Conv):
        return T.conv2d(x, bound[f"{name}.weight"], bound[f"{name}.bias"],
                        stride=spec.stride, pad=spec.pad)
    if isinstance(spec, MaxPool):
        return T.maxpool2d(x, spec.kernel, spec.stride)
    if isinstance(spec, BatchNorm):
        return T.batchnorm(x, bound[f"{name}.scale"], bound[f"{name}.shift"],
                           pset[f"{name}.running_mean"].data,
                           pset[f"{name}.running_var"].data,
                           eps=spec.epsilon, momentum=spec.momentum,
                           training=(mode == "train"))
    if isinstance(spec, FullyConnected):
        if x.data.ndim > 2:
            x = T.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        return T.add_bias(T.matmul(x, bound[f"{name}.weight"]),
                          bound[f"{name}.bias"])
    if isinstance(spec, ReLU):
        return T.relu(x)
    raise ArchitectureError(f"unknown layer spec {spec!r}")


def bind(graph: T.Graph, pset: ParameterSet) -> dict[str, T.Tensor]:
    """Attach trainable parameters to a graph as differentiable leaves.

    Returns a map from parameter name to leaf tensor.  Non-trainable running
    statistics are not bound; they stay numpy arrays owned by the set.
    """
    out = {}
    for p in pset:
        if p.trainable:
            out[p.name] = graph.leaf(p.data, requires_grad=True)
    return out


def forward_stack(specs: list[LayerSpec], pset: ParameterSet,
                  bound: dict[str, T.Tensor], x: T.Tensor, mode: str) -> T.Tensor:
    for name, spec in zip(layer_names(specs), specs):
        x = forward_layer(spec, name, bound, pset, x, mode)
    return x


# ---------------------------------------------------------------------------
# presets

TRUNK_INPUT_SHAPES = {
    "modified_alexnet": (3, 256, 256),
    "tiny": (1, 16, 16),
}


def preset_trunk(name: str) -> list[LayerSpec]:
    """Known trunk architectures keyed by name.

    ``modified_alexnet``: five conv layers each followed by batch norm, ReLU
    and max pooling, then two fully connected layers; takes (3, 256, 256)
    input and produces a 256-long feature vector.  ``tiny`` is a two-block
    desk-scale trunk for (1, 16, 16) input with a 32-long feature vector.
    """
    if name == "modified_alexnet":
        specs: list[LayerSpec] = []
        channels = [96, 256, 384, 384, 256]
        for i, ch in enumerate(channels):
            if i == 0:
                specs.append(Conv(ch, kernel=7, stride=2, pad=3))
            else:
                specs.append(Conv(ch, kernel=3, stride=1, pad=1))
            specs.append(BatchNorm())
            specs.append(ReLU())
            specs.append(MaxPool(kernel=2, stride=2))
        specs.append(FullyConnected(512))
        specs.append(ReLU())
        specs.append(FullyConnected(256))
        specs.append(ReLU())
        return specs
    if name == "tiny":
        return [
            Conv(8, kernel=3, stride=1, pad=1), BatchNorm(), ReLU(),
            MaxPool(kernel=2, stride=2),
            Conv(16, kernel=3, stride=1, pad=1), BatchNorm(), ReLU(),
            MaxPool(kernel=2, stride=2),
            FullyConnected(32), ReLU(),
        ]
    raise LookupError(f"unknown trunk preset {name!r}")


def preset_head(n_fc: int, widths: list[int]) -> list[LayerSpec]:
    """FC/ReLU stack ending in a linear layer with no terminal activation."""
    if n_fc < 1 or not widths:
        raise ContractError("head needs at least one fully connected layer")
    if len(widths) != n_fc:
        raise ContractError(f"widths {widths} do not match n_fc={n_fc}")
    specs: list[LayerSpec] = []
    for i, w in enumerate(widths):
        specs.append(FullyConnected(w))
        if i < n_fc - 1:
            specs.append(ReLU())
    return specs
