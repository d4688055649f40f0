"""Evaluation metrics and harnesses.

Scalar metrics accumulate with exact summation (math.fsum), so results are
independent of sample order and an exact independent recomputation from
dumped predictions reproduces them bit for bit.  ``evaluate`` runs an
eval-mode forward over a dataset, decodes predictions, and assembles
per-attribute metrics: accuracy for nominal attributes; mean absolute error
and a cumulative-score table for ordinal ones; optionally the
annotator-weighted error ``1 - exp(-(y - mu)^2 / (2 sigma^2))`` for an
apparent-age style attribute.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from .catalog import NOMINAL, ORDINAL, AttributeCatalog
from .data import Dataset, split_subject_exclusive
from .errors import ContractError, LabelError
from .model import DmtlModel, build_dmtl, decode, forward
from .train import TrainConfig, train_loop


def mae(preds: Sequence[float], truths: Sequence[float]) -> float:
    """Mean absolute error.  Uses exact summation, so the result is
    independent of sample order."""
    if len(preds) == 0 or len(preds) != len(truths):
        raise ContractError("mae needs equal non-empty inputs")
    return math.fsum(abs(float(p) - float(t))
                     for p, t in zip(preds, truths)) / len(preds)


def cs_at(preds: Sequence[float], truths: Sequence[float], k: float) -> float:
    """Cumulative score: fraction of samples with absolute error <= k."""
    if len(preds) == 0 or len(preds) != len(truths):
        raise ContractError("cs_at needs equal non-empty inputs")
    if k < 0:
        raise ContractError("cs_at threshold must be >= 0")
    return sum(1 for p, t in zip(preds, truths)
               if abs(float(p) - float(t)) <= k) / len(preds)


def epsilon_error(pred: float, mu: float, sigma: float) -> float:
    """Annotator-weighted error, 0 at the mean and saturating to 1."""
    if sigma <= 0:
        raise ContractError("sigma must be > 0")
    d = float(pred) - float(mu)
    return 1.0 - math.exp(-(d * d) / (2.0 * sigma * sigma))


def accuracy(preds: Sequence[int], truths: Sequence[int]) -> float:
    """Fraction of exact matches."""
    if len(preds) == 0 or len(preds) != len(truths):
        raise ContractError("accuracy needs equal non-empty inputs")
    return sum(1 for p, t in zip(preds, truths) if p == t) / len(preds)


# ---------------------------------------------------------------------------
# evaluation harness


@dataclass
class EvalOptions:
    batch_size: int = 64
    cs_ks: tuple = (1, 3, 5, 10)
    round_ordinal: bool = False
    subset: Optional[tuple[str, ...]] = None   # attrs of the aggregate mean
    epsilon_attr: Optional[str] = None         # ordinal attr to epsilon-score
    sigma_attr: Optional[str] = None           # per-sample sigma label source
    global_sigma: Optional[float] = None       # fallback sigma
    threads: int = 1


@dataclass
class EvalRecord:
    """Decoded prediction and ground truth for one sample."""
    sample_id: str
    predictions: dict[str, float]
    truths: dict[str, float]
    sigma: Optional[float] = None


@dataclass
class MetricRow:
    attribute: str
    kind: str       # 'N', 'O', or 'aggregate'
    metric: str
    value: float


@dataclass
class MetricsReport:
    rows: list[MetricRow]

    def value(self, attribute: str, metric: str) -> float:
        for r in self.rows:
            if r.attribute == attribute and r.metric == metric:
                return r.value
        raise KeyError(f"no row for ({attribute!r}, {metric!r})")

    def to_csv(self) -> str:
        lines = ["attribute,kind,metric,value"]
        for r in self.rows:
            lines.append(f"{r.attribute},{r.kind},{r.metric},{r.value!r}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        name_w = max([len("attribute")] + [len(r.attribute) for r in self.rows])
        met_w = max([len("metric")] + [len(r.metric) for r in self.rows])
        lines = [f"{'attribute':<{name_w}}  kind  {'metric':<{met_w}}  value",
                 "-" * (name_w + met_w + 19)]
        for r in self.rows:
            lines.append(f"{r.attribute:<{name_w}}  {r.kind:<4}  "
                         f"{r.metric:<{met_w}}  {r.value:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_records(model: DmtlModel, dataset: Dataset,
                     options: Optional[EvalOptions] = None) -> list[EvalRecord]:
    """Eval-mode forward plus decode over every sample, in dataset order."""
    options = options or EvalOptions()
    if dataset.catalog.digest() != model.catalog.digest():
        raise LabelError("dataset catalog does not match model catalog")
    n = len(dataset)
    batches = [list(range(i, min(i + options.batch_size, n)))
               for i in range(0, n, options.batch_size)]

    def run(idx):
        pred = forward(model, dataset.inputs(idx), mode="eval")
        return decode(pred, model.catalog)

    if options.threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            decoded = list(pool.map(run, batches))
    else:
        decoded = [run(idx) for idx in batches]

    sigma_col = None
    if options.epsilon_attr is not None and options.sigma_attr is not None:
        sigma_col = dataset.label_arrays()[options.sigma_attr]

    records: list[EvalRecord] = []
    names = model.catalog.names()
    labels = dataset.label_arrays()
    for idx, dec in zip(batches, decoded):
        for row, i in enumerate(idx):
            preds = {}
            for a in model.catalog.attributes:
                v = dec[a.name][row]
                if a.kind == ORDINAL and options.round_ordinal:
                    v = float(np.rint(v))
                preds[a.name] = float(v)
            truths = {name: float(labels[name][i]) for name in names}
            sigma = float(sigma_col[i]) if sigma_col is not None else None
            records.append(EvalRecord(dataset.samples[i][1].sample_id,
                                      preds, truths, sigma))
    return records


def report_from_records(records: list[EvalRecord], catalog: AttributeCatalog,
                        options: Optional[EvalOptions] = None) -> MetricsReport:
    """Assemble the metric table from decoded predictions."""
    options = options or EvalOptions()
    if not records:
        raise ContractError("cannot report on zero records")
    rows: list[MetricRow] = []
    accs: dict[str, float] = {}
    for attr in catalog.attributes:
        preds = [r.predictions[attr.name] for r in records]
        truths = [r.truths[attr.name] for r in records]
        if attr.kind == NOMINAL:
            acc = accuracy([int(p) for p in preds], [int(t) for t in truths])
            accs[attr.name] = acc
            rows.append(MetricRow(attr.name, NOMINAL, "accuracy", acc))
        else:
            rows.append(MetricRow(attr.name, ORDINAL, "mae", mae(preds, truths)))
            for k in options.cs_ks:
                rows.append(MetricRow(attr.name, ORDINAL, f"cs@{k:g}",
                                      cs_at(preds, truths, k)))
    subset = options.subset
    if subset is None:
        subset = tuple(a.name for a in catalog.attributes if a.kind == NOMINAL)
    if subset:
        bad = [s for s in subset if s not in accs]
        if bad:
            raise ContractError(
                f"aggregate subset must name nominal attributes; bad: {bad}")
        mean_acc = sum(accs[s] for s in subset) / len(subset)
        rows.append(MetricRow("ALL", "aggregate", "mean_accuracy", mean_acc))
    if options.epsilon_attr is not None:
        attr = catalog.attribute(options.epsilon_attr)
        if attr.kind != ORDINAL:
            raise ContractError("epsilon_attr must be ordinal")
        values = []
        for r in records:
            sigma = r.sigma if r.sigma is not None else options.global_sigma
            if sigma is None:
                raise ContractError(
                    "epsilon error needs a per-sample sigma or a global_sigma")
            values.append(epsilon_error(r.predictions[attr.name],
                                        r.truths[attr.name], sigma))
        rows.append(MetricRow(attr.name, ORDINAL, "epsilon_error",
                              math.fsum(values) / len(values)))
    return MetricsReport(rows)


def evaluate(model: DmtlModel, dataset: Dataset,
             options: Optional[EvalOptions] = None) -> MetricsReport:
    options = options or EvalOptions()
    return report_from_records(evaluate_records(model, dataset, options),
                               model.catalog, options)


def cross_database_eval(model: DmtlModel, dataset_a: Dataset, dataset_b: Dataset,
                        options: Optional[EvalOptions] = None
                        ) -> tuple[MetricsReport, MetricsReport]:
    """Evaluate one trained model on its own data and on a second database."""
    if dataset_a.catalog.digest() != dataset_b.catalog.digest():
        raise ContractError("cross-database evaluation needs one shared catalog")
    return (evaluate(model, dataset_a, options),
            evaluate(model, dataset_b, options))


# ---------------------------------------------------------------------------
# multi-task vs single-task comparison


def count_stack_params(specs: list[L.LayerSpec], input_shape: tuple) -> int:
    """Trainable parameter count of a stack, without allocating it."""
    shape = tuple(input_shape)
    total = 0
    for spec in specs:
        if isinstance(spec, L.Conv):
            total += spec.out_channels * shape[0] * spec.kernel ** 2 + spec.out_channels
        elif isinstance(spec, L.FullyConnected):
            total += int(np.prod(shape)) * spec.out_features + spec.out_features
        elif isinstance(spec, L.BatchNorm):
            total += 2 * shape[0]
        shape = L.output_shape(spec, shape)
    return total


def count_model_params(catalog: AttributeCatalog, trunk_specs, input_shape,
                       head_hidden: int) -> int:
    feature_shape = L.check_stack(trunk_specs, input_shape)
    total = count_stack_params(trunk_specs, input_shape)
    for cat in catalog.categories:
        head = L.preset_head(2, [head_hidden, catalog.head_width(cat.id)])
        total += count_stack_params(head, feature_shape)
    return total


def _scaled_trunk(trunk_specs: list[L.LayerSpec], alpha: float) -> list[L.LayerSpec]:
    out: list[L.LayerSpec] = []
    for spec in trunk_specs:
        if isinstance(spec, L.Conv):
            out.append(L.Conv(max(1, round(spec.out_channels * alpha)),
                              spec.kernel, spec.stride, spec.pad))
        elif isinstance(spec, L.FullyConnected):
            out.append(L.FullyConnected(max(1, round(spec.out_features * alpha))))
        else:
            out.append(spec)
    return out


def match_stl_budget(catalog: AttributeCatalog, trunk_specs, input_shape,
                     head_hidden: int, tolerance: float = 0.10
                     ) -> tuple[list[L.LayerSpec], int, float]:
    """Scale per-attribute model widths so the bundle's total trainable
    parameter count matches the joint model's within the tolerance.

    Returns (scaled trunk specs, scaled head hidden width, achieved ratio).
    """
    target = count_model_params(catalog, trunk_specs, input_shape, head_hidden)

    def bundle_total(alpha: float) -> int:
        specs = _scaled_trunk(trunk_specs, alpha)
        hidden = max(1, round(head_hidden * alpha))
        total = 0
        for attr in catalog.attributes:
            cat = catalog.category(attr.category_id)
            sub = AttributeCatalog([attr], [cat])
            total += count_model_params(sub, specs, input_shape, hidden)
        return total

    best = None
    for alpha in np.concatenate(([1.0], np.linspace(0.02, 1.2, 240))):
        total = bundle_total(float(alpha))
        ratio = total / target
        if best is None or abs(ratio - 1.0) < abs(best[2] - 1.0):
            best = (float(alpha), total, ratio)
    alpha, total, ratio = best
    if abs(ratio - 1.0) > tolerance:
        raise ContractError(
            f"cannot match parameter budget within {tolerance:.0%}; "
            f"closest ratio {ratio:.3f}")
    return _scaled_trunk(trunk_specs, alpha), max(1, round(head_hidden * alpha)), ratio


@dataclass
class ComparisonRow:
    attribute: str
    dmtl: list[float]   # one entry per seed
    stl: list[float]

    def mean_dmtl(self) -> float:
        return sum(self.dmtl) / len(self.dmtl)

    def mean_stl(self) -> float:
        return sum(self.stl) / len(self.stl)


@dataclass
class ComparisonTable:
    """Held-out accuracy of the joint model vs per-attribute baselines."""
    seeds: list[int]
    rows: list[ComparisonRow]       # one per attribute, then one 'MEAN' row
    budget_ratio: float

    @property
    def aggregate(self) -> ComparisonRow:
        return self.rows[-1]

    def wins(self, strict: bool = False) -> int:
        """Seeds where the joint model's mean beats (or ties) the baseline."""
        agg = self.aggregate
        if strict:
            return sum(1 for d, s in zip(agg.dmtl, agg.stl) if d > s)
        return sum(1 for d, s in zip(agg.dmtl, agg.stl) if d >= s)

    def to_csv(self) -> str:
        header = ["attribute"]
        header += [f"dmtl_seed{s}" for s in self.seeds]
        header += [f"stl_seed{s}" for s in self.seeds]
        header += ["dmtl_mean", "stl_mean"]
        lines = [",".join(header)]
        for r in self.rows:
            cells = [r.attribute]
            cells += [repr(v) for v in r.dmtl]
            cells += [repr(v) for v in r.stl]
            cells += [repr(r.mean_dmtl()), repr(r.mean_stl())]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        w = max([9] + [len(r.attribute) for r in self.rows])
        lines = [f"{'attribute':<{w}}  dmtl_mean  stl_mean", "-" * (w + 22)]
        for r in self.rows:
            lines.append(f"{r.attribute:<{w}}  {r.mean_dmtl():9.4f}  "
                         f"{r.mean_stl():8.4f}")
        lines.append(f"(parameter budget ratio stl/dmtl: {self.budget_ratio:.3f})")
        return "\n".join(lines) + "\n"


def _attribute_score(attr, preds, truths, ordinal_cs_k: float) -> float:
    if attr.kind == NOMINAL:
        return accuracy([int(p) for p in preds], [int(t) for t in truths])
    return cs_at(preds, truths, ordinal_cs_k)


def mtl_vs_stl_report(catalog: AttributeCatalog, dataset: Dataset,
                      trunk_specs: list[L.LayerSpec], input_shape: tuple,
                      config: TrainConfig, seeds: Sequence[int],
                      head_hidden: int = 16, ordinal_cs_k: float = 5.0,
                      eval_options: Optional[EvalOptions] = None
                      ) -> ComparisonTable:
    """Train the joint model and a budget-matched per-attribute bundle on a
    shared split per seed; tabulate held-out per-attribute scores.

    Nominal attributes score by accuracy; ordinal ones by cumulative score at
    ``ordinal_cs_k``.  The final row is the across-attribute mean per seed.
    """
    if not seeds:
        raise ContractError("need at least one seed")
    if dataset.catalog.digest() != catalog.digest():
        raise LabelError("dataset catalog does not match the given catalog")
    stl_trunk, stl_hidden, ratio = match_stl_budget(
        catalog, trunk_specs, input_shape, head_hidden)
    eval_options = eval_options or EvalOptions()

    per_attr_dmtl: dict[str, list[float]] = {a.name: [] for a in catalog.attributes}
    per_attr_stl: dict[str, list[float]] = {a.name: [] for a in catalog.attributes}
    for seed in seeds:
        folds = split_subject_exclusive(dataset, 5, seed)
        holdout = folds[0]
        train_idx = sorted(i for f in folds[1:] for i in f)
        train_ds = dataset.subset(train_idx)
        hold_ds = dataset.subset(holdout)
        run_cfg = dataclasses.replace(config, seed=seed)

        dmtl = build_dmtl(catalog, trunk_specs, input_shape, seed=seed,
                          head_hidden=head_hidden, dtype=config.dtype)
        train_loop(dmtl, train_ds, run_cfg)
        recs = evaluate_records(dmtl, hold_ds, eval_options)
        for attr in catalog.attributes:
            preds = [r.predictions[attr.name] for r in recs]
            truths = [r.truths[attr.name] for r in recs]
            per_attr_dmtl[attr.name].append(
                _attribute_score(attr, preds, truths, ordinal_cs_k))

        for j, attr in enumerate(catalog.attributes):
            cat = catalog.category(attr.category_id)
            sub_cat = AttributeCatalog([attr], [cat])
            sub_train = train_ds.project([attr.name])
            sub_hold = hold_ds.project([attr.name])
            stl_seed = int(np.random.SeedSequence([seed, 1000 + j]).generate_state(1)[0]) \
                if len(catalog) > 1 else seed
            stl = build_dmtl(sub_cat, stl_trunk, input_shape, seed=stl_seed,
                             head_hidden=stl_hidden, dtype=config.dtype)
            train_loop(stl, sub_train, run_cfg)
            recs = evaluate_records(stl, sub_hold, eval_options)
            preds = [r.predictions[attr.name] for r in recs]
            truths = [r.truths[attr.name] for r in recs]
            per_attr_stl[attr.name].append(
                _attribute_score(attr, preds, truths, ordinal_cs_k))

    rows = [ComparisonRow(a.name, per_attr_dmtl[a.name], per_attr_stl[a.name])
            for a in catalog.attributes]
    n_seeds = len(list(seeds))
    mean_dmtl = [sum(r.dmtl[s] for r in rows) / len(rows) for s in range(n_seeds)]
    mean_stl = [sum(r.stl[s] for r in rows) / len(rows) for s in range(n_seeds)]
    rows.append(ComparisonRow("MEAN", mean_dmtl, mean_stl))
    return ComparisonTable(list(seeds), rows, ratio)
