"""Shared-trunk multi-task model with heterogeneous category heads.

One trunk maps an input batch to a feature vector; each attribute category
owns a small head consuming the same features.  Nominal categories emit one
score block per member attribute (softmax cross-entropy loss); ordinal
categories emit one real value per member attribute (summed squared error).
The joint objective is the lambda-weighted sum of category losses plus
squared-L2 weight penalties with separate trunk/head coefficients.

A single-task baseline is the same machinery with one independent
single-attribute model per attribute and no shared parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .catalog import NOMINAL, AttributeCatalog, AttributeDef, CategorySpec
from .errors import ArchitectureError, ContractError, DimensionError, LabelError


@dataclass
class DmtlModel:
    catalog: AttributeCatalog
    input_shape: tuple
    trunk_specs: list[L.LayerSpec]
    trunk_params: L.ParameterSet
    head_specs: dict[str, list[L.LayerSpec]]
    head_params: dict[str, L.ParameterSet]
    feature_shape: tuple

    @property
    def dtype(self):
        for p in self.trunk_params:
            return p.data.dtype
        for pset in self.head_params.values():
            for p in pset:
                return p.data.dtype
        raise ContractError("model has no parameters")

    def qualified_params(self) -> Iterable[tuple[str, L.Param]]:
        """Yield (qualified name, Param): trunk.* then head.<category>.*"""
        for p in self.trunk_params:
            yield f"trunk.{p.name}", p
        for cid in self.head_specs:
            for p in self.head_params[cid]:
                yield f"head.{cid}.{p.name}", p

    def count_trainable(self) -> int:
        return sum(p.data.size for _, p in self.qualified_params() if p.trainable)

    def copy(self) -> "DmtlModel":
        return DmtlModel(self.catalog, self.input_shape, list(self.trunk_specs),
                         self.trunk_params.copy(),
                         {c: list(s) for c, s in self.head_specs.items()},
                         {c: p.copy() for c, p in self.head_params.items()},
                         self.feature_shape)

    def astype(self, dtype) -> "DmtlModel":
        return DmtlModel(self.catalog, self.input_shape, list(self.trunk_specs),
                         self.trunk_params.astype(dtype),
                         {c: list(s) for c, s in self.head_specs.items()},
                         {c: p.astype(dtype) for c, p in self.head_params.items()},
                         self.feature_shape)


def default_head(catalog: AttributeCatalog, cat_id: str, hidden: int) -> list[L.LayerSpec]:
    """Two fully connected layers: hidden width then the category's output width."""
    return L.preset_head(2, [hidden, catalog.head_width(cat_id)])


def build_dmtl(catalog: AttributeCatalog, trunk_specs: list[L.LayerSpec],
               input_shape: tuple, seed: int = 0, head_hidden: int = 64,
               head_specs: Optional[dict[str, list[L.LayerSpec]]] = None,
               dtype=np.float32) -> DmtlModel:
    """Assemble trunk plus one head per category, deterministically per seed.

    Heads default to two fully connected layers ending at the category's
    output width; a category's ``head_spec`` (or the ``head_specs`` argument)
    overrides the default.  The terminal head layer must match the width the
    catalog demands for that category.
    """
    feature_shape = L.check_stack(trunk_specs, input_shape)
    trunk_params = L.init_random(trunk_specs, input_shape, np.random.SeedSequence([seed, 0]),
                                 dtype=dtype)
    heads: dict[str, list[L.LayerSpec]] = {}
    head_params: dict[str, L.ParameterSet] = {}
    for i, cat in enumerate(catalog.categories):
        specs = None
        if head_specs and cat.id in head_specs:
            specs = head_specs[cat.id]
        elif cat.head_spec is not None:
            specs = list(cat.head_spec)
        if specs is None:
            specs = default_head(catalog, cat.id, head_hidden)
        out_shape = L.check_stack(specs, feature_shape)
        want = catalog.head_width(cat.id)
        if out_shape != (want,):
            raise ArchitectureError(
                f"head {cat.id!r} produces {out_shape}, catalog requires ({want},)")
        heads[cat.id] = list(specs)
        head_params[cat.id] = L.init_random(specs, feature_shape,
                                            np.random.SeedSequence([seed, 1 + i]),
                                            dtype=dtype)
    return DmtlModel(catalog, tuple(input_shape), list(trunk_specs), trunk_params,
                     heads, head_params, feature_shape)


@dataclass
class Prediction:
    """Per-attribute raw outputs of one forward pass, still in the graph.

    Nominal attributes map to [n, C] score tensors (pre-softmax); ordinal
    attributes map to [n, 1] value tensors.
    """
    graph: T.Graph
    outputs: dict[str, T.Tensor]
    trunk_features: T.Tensor
    param_leaves: dict[str, T.Tensor]

    def values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.outputs.items()}


def forward(model: DmtlModel, batch: np.ndarray, mode: str = "eval",
            graph: Optional[T.Graph] = None) -> Prediction:
    """Run the trunk once and every category head on the shared features."""
    batch = np.asarray(batch)
    if batch.shape[1:] != model.input_shape:
        raise DimensionError(
            f"batch shape {batch.shape[1:]} does not match input {model.input_shape}")
    g = graph if graph is not None else T.Graph()
    x = g.constant(batch.astype(model.dtype, copy=False))
    leaves: dict[str, T.Tensor] = {}
    trunk_bound = L.bind(g, model.trunk_params)
    leaves.update({f"trunk.{k}": v for k, v in trunk_bound.items()})
    features = L.forward_stack(model.trunk_specs, model.trunk_params,
                               trunk_bound, x, mode)
    outputs: dict[str, T.Tensor] = {}
    for cid, specs in model.head_specs.items():
        bound = L.bind(g, model.head_params[cid])
        leaves.update({f"head.{cid}.{k}": v for k, v in bound.items()})
        out = L.forward_stack(specs, model.head_params[cid], bound, features, mode)
        members = model.catalog.members(cid)
        offset = 0
        for attr in members:
            width = attr.classes if attr.kind == NOMINAL else 1
            outputs[attr.name] = T.slice_cols(out, offset, offset + width)
            offset += width
    return Prediction(g, outputs, features, leaves)


def softmax(scores: np.ndarray) -> np.ndarray:
    """Stable (max-shifted) softmax over the last axis."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ContractError("softmax requires finite scores")
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_nominal_truth(attr: AttributeDef, truth: np.ndarray) -> np.ndarray:
    truth = np.asarray(truth)
    if truth.ndim != 1:
        raise ContractError(f"nominal truth for {attr.name!r} must be rank 1")
    idx = truth.astype(np.int64)
    if np.any(idx != truth):
        raise LabelError(f"attribute {attr.name!r}: non-integer class label")
    bad = np.where((idx < 0) | (idx >= attr.classes))[0]
    if bad.size:
        raise LabelError(
            f"sample {bad[0]} attribute {attr.name!r}: class {idx[bad[0]]} "
            f"outside [0, {attr.classes})")
    return idx


def cross_entropy(scores: T.Tensor, truth_idx: np.ndarray) -> T.Tensor:
    """Summed softmax cross-entropy of an [n, C] score block."""
    g = scores.graph
    n, c = scores.shape
    onehot = np.zeros((n, c), dtype=scores.dtype)
    onehot[np.arange(n), truth_idx] = 1
    picked = T.reduce_sum(T.mul(T.log_softmax(scores), g.constant(onehot)))
    return T.mul(picked, -1.0)


def squared_error(preds: T.Tensor, truth: np.ndarray) -> T.Tensor:
    """Summed squared residuals of an [n, 1] prediction column."""
    g = preds.graph
    t = np.asarray(truth, dtype=preds.dtype).reshape(preds.shape)
    return T.reduce_sum(T.square(T.sub(preds, g.constant(t))))


def loss_nominal(scores: list[T.Tensor], truths: list[np.ndarray],
                 attrs: Optional[list[AttributeDef]] = None) -> T.Tensor:
    """Cross-entropy summed over member attributes and batch."""
    if len(scores) != len(truths):
        raise ContractError("scores/truths length mismatch")
    total = None
    for i, (s, t) in enumerate(zip(scores, truths)):
        if attrs is not None:
            t = _check_nominal_truth(attrs[i], t)
        else:
            t = np.asarray(t).astype(np.int64)
            if np.any(t < 0) or np.any(t >= s.shape[1]):
                bad = int(np.where((t < 0) | (t >= s.shape[1]))[0][0])
                raise LabelError(f"sample {bad} attribute #{i}: class out of range")
        term = cross_entropy(s, t)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ContractError("loss_nominal needs at least one attribute")
    return total


def loss_ordinal(preds: list[T.Tensor], truths: list[np.ndarray]) -> T.Tensor:
    """Squared error summed over member attributes and batch."""
    if len(preds) != len(truths):
        raise ContractError("preds/truths length mismatch")
    total = None
    for p, t in zip(preds, truths):
        t = np.asarray(t)
        if t.size != p.data.size:
            raise ContractError(
                f"ordinal truth length {t.size} != prediction length {p.data.size}")
        term = squared_error(p, t)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ContractError("loss_ordinal needs at least one attribute")
    return total


def category_loss(model: DmtlModel, prediction: Prediction, cat: CategorySpec,
                  labels: dict[str, np.ndarray]) -> T.Tensor:
    members = model.catalog.members(cat.id)
    outs = [prediction.outputs[a.name] for a in members]
    truths = [labels[a.name] for a in members]
    if cat.kind == NOMINAL:
        return loss_nominal(outs, truths, attrs=members)
    return loss_ordinal(outs, truths)


def _check_labels(catalog: AttributeCatalog, labels: dict[str, np.ndarray],
                  n: int) -> None:
    missing = [a.name for a in catalog.attributes if a.name not in labels]
    if missing:
        raise LabelError(f"labels missing attributes: {missing}")
    for a in catalog.attributes:
        arr = np.asarray(labels[a.name])
        if arr.shape[0] != n:
            raise LabelError(
                f"attribute {a.name!r}: {arr.shape[0]} labels for batch of {n}")


def weight_penalty(graph: T.Graph, leaves: dict[str, T.Tensor],
                   pset: L.ParameterSet, prefix: str) -> Optional[T.Tensor]:
    """Squared L2 over decaying parameters of one set, as a graph node."""
    total = None
    for p in pset:
        if not (p.trainable and p.decay):
            continue
        term = T.reduce_sum(T.square(leaves[prefix + p.name]))
        total = term if total is None else T.add(total, term)
    return total


@dataclass
class Objective:
    """A scalar loss node plus the pieces needed to update parameters."""
    graph: T.Graph
    value: T.Tensor
    prediction: Prediction
    category_losses: dict[str, T.Tensor]

    def backward(self) -> dict[str, np.ndarray]:
        """Run reverse accumulation; returns qualified-name -> gradient."""
        self.graph.backward(self.value)
        return {name: leaf.grad for name, leaf in
                self.prediction.param_leaves.items()}


def objective_dmtl(model: DmtlModel, batch: np.ndarray,
                   labels: dict[str, np.ndarray],
                   lambdas: Optional[dict[str, float]] = None,
                   gamma1: float = 0.0, gamma2: float = 0.0,
                   mode: str = "train",
                   graph: Optional[T.Graph] = None) -> Objective:
    """Joint objective: weighted category losses plus weight penalties."""
    batch = np.asarray(batch)
    _check_labels(model.catalog, labels, batch.shape[0])
    pred = forward(model, batch, mode=mode, graph=graph)
    g = pred.graph
    total = None
    per_category: dict[str, T.Tensor] = {}
    for cat in model.catalog.categories:
        loss = category_loss(model, pred, cat, labels)
        per_category[cat.id] = loss
        lam = cat.lam if lambdas is None else lambdas.get(cat.id, cat.lam)
        if lam < 0:
            raise ContractError(f"lambda for category {cat.id!r} must be >= 0")
        term = loss if lam == 1.0 else T.mul(loss, float(lam))
        total = term if total is None else T.add(total, term)
    if gamma1 < 0 or gamma2 < 0:
        raise ContractError("weight-decay coefficients must be >= 0")
    if gamma1 > 0:
        phi = weight_penalty(g, pred.param_leaves, model.trunk_params, "trunk.")
        if phi is not None:
            total = T.add(total, T.mul(phi, float(gamma1)))
    if gamma2 > 0:
        for cid, pset in model.head_params.items():
            phi = weight_penalty(g, pred.param_leaves, pset, f"head.{cid}.")
            if phi is not None:
                total = T.add(total, T.mul(phi, float(gamma2)))
    return Objective(g, total, pred, per_category)


def stl_bundle(catalog: AttributeCatalog, trunk_specs: list[L.LayerSpec],
               input_shape: tuple, seed: int = 0, head_hidden: int = 64,
               dtype=np.float32) -> list[tuple[str, DmtlModel]]:
    """One independent single-attribute model per catalog attribute.

    Every model gets its own trunk and head; nothing is shared.  Model i is
    seeded from (seed, i) so bundles are deterministic but models distinct.
    """
    bundle = []
    for i, attr in enumerate(catalog.attributes):
        cat = catalog.category(attr.category_id)
        sub = AttributeCatalog([attr], [cat])
        model = build_dmtl(sub, trunk_specs, input_shape,
                           seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
                           head_hidden=head_hidden, dtype=dtype)
        bundle.append((attr.name, model))
    return bundle


def objective_stl(bundle: list[tuple[str, DmtlModel]], batch: np.ndarray,
                  labels: dict[str, np.ndarray], gamma: float = 0.0,
                  mode: str = "train") -> list[Objective]:
    """Independent per-attribute objectives, each with one decay coefficient."""
    objectives = []
    for name, model in bundle:
        objectives.append(objective_dmtl(
            model, batch, {name: labels[name]},
            gamma1=gamma, gamma2=gamma, mode=mode))
    return objectives


def head_gradient_closed_form(kind: str, features: np.ndarray,
                              weights: np.ndarray, truth: np.ndarray,
                              head_specs: Optional[list[L.LayerSpec]] = None) -> np.ndarray:
    """Closed-form weight gradient of a single linear head, descent convention.

    nominal: d/dW of summed cross-entropy(softmax(X W), one-hot Y) = X^T (P - Y)
    ordinal: d/dW of summed squared error = 2 X^T (X W - y)

    Valid only for heads that are exactly one linear layer.
    """
    if head_specs is not None:
        if len(head_specs) != 1 or not isinstance(head_specs[0], L.FullyConnected):
            raise ContractError("closed form requires a single linear head")
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractError(f"features {x.shape} and weights {w.shape} incompatible")
    scores = x @ w
    if kind == "nominal":
        y = np.asarray(truth, dtype=np.float64)
        if y.shape != scores.shape:
            raise ContractError(f"one-hot truth must have shape {scores.shape}")
        rows = np.abs(y.sum(axis=1) - 1.0) > 1e-12
        if np.any(rows) or np.any((y != 0) & (y != 1)):
            raise ContractError("nominal truth must be one-hot")
        return x.T @ (softmax(scores) - y)
    if kind == "ordinal":
        y = np.asarray(truth, dtype=np.float64).reshape(scores.shape)
        return 2.0 * (x.T @ (scores - y))
    raise ContractError(f"kind must be 'nominal' or 'ordinal', got {kind!r}")


def decode(prediction, catalog: AttributeCatalog) -> dict[str, np.ndarray]:
    """Final answers: argmax class per nominal attribute (ties to the lowest
    index), raw ordinal values clamped to the attribute's declared range."""
    values = prediction.values() if isinstance(prediction, Prediction) else prediction
    missing = [a.name for a in catalog.attributes if a.name not in values]
    if missing:
        raise ContractError(f"prediction missing attributes: {missing}")
    out: dict[str, np.ndarray] = {}
    for attr in catalog.attributes:
        v = np.asarray(values[attr.name])
        if attr.kind == NOMINAL:
            if v.ndim != 2 or v.shape[1] != attr.classes:
                raise ContractError(
                    f"attribute {attr.name!r}: scores shape {v.shape} "
                    f"!= (n, {attr.classes})")
            out[attr.name] = v.argmax(axis=1)
        else:
            out[attr.name] = np.clip(v.reshape(v.shape[0]), attr.lo, attr.hi)
    return out
