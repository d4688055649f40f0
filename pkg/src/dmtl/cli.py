"""Command-line interface.

Subcommands: train, eval, predict, cooccur, synth, split, gradcheck.
Configuration files are flat ``key=value`` text with ``#`` comments; unknown
keys are hard errors, and command-line flags override file values.  Exit
codes: 0 success, 2 usage, 3 format/parse/module errors, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as GC
from . import layers as L
from . import plots
from .catalog import NOMINAL, ORDINAL
from .data import (SynthAttribute, SyntheticSpec, cooccurrence,
                   cooccurrence_csv, load_dataset, split_subject_exclusive,
                   synth_generate, write_dataset)
from .errors import (ContractError, DmtlError, FormatError,
                     GradientCheckError, NumericalError)
from .metrics import EvalOptions, evaluate, evaluate_records
from .model import build_dmtl
from .train import TrainConfig, TrainState, load_checkpoint, save_checkpoint, train_loop

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4


def parse_kv_file(path, allowed_prefixes: tuple[str, ...],
                  allowed_keys: set[str]) -> dict[str, str]:
    """Flat key=value config with # comments; unknown keys are hard errors."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                             start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq:
            raise FormatError(f"{path}:{ln}: expected key=value")
        if key not in allowed_keys and not key.startswith(allowed_prefixes):
            raise FormatError(f"{path}:{ln}: unknown key {key!r}")
        if key in out:
            raise FormatError(f"{path}:{ln}: duplicate key {key!r}")
        out[key] = value
    return out


_TRAIN_KEYS = {"trunk", "head_hidden", "eta", "decay_factor", "step_interval",
               "gamma1", "gamma2", "batch_size", "max_iterations", "seed",
               "precision"}


def _parse_train_config(path) -> tuple[TrainConfig, str, int]:
    kv = parse_kv_file(path, ("lambda.",), _TRAIN_KEYS)
    lambdas = {k[len("lambda."):]: float(v) for k, v in kv.items()
               if k.startswith("lambda.")}
    def fget(key, cast, default):
        return cast(kv[key]) if key in kv else default
    try:
        config = TrainConfig(
            eta=fget("eta", float, 0.0001),
            decay_factor=fget("decay_factor", float, 0.1),
            step_interval=fget("step_interval", int, 1000),
            gamma1=fget("gamma1", float, 0.0),
            gamma2=fget("gamma2", float, 0.0),
            lambdas=lambdas,
            batch_size=fget("batch_size", int, 16),
            max_iterations=fget("max_iterations", int, 100),
            seed=fget("seed", int, 0),
            precision=kv.get("precision", "f32"),
        )
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    trunk = kv.get("trunk", "tiny")
    head_hidden = fget("head_hidden", int, 16)
    return config, trunk, head_hidden


def _trunk_specs(name: str, input_shape: tuple) -> list:
    """Preset trunks by name, or ``fc:w1,w2,...`` for a dense stack."""
    if name.startswith("fc:"):
        widths = [int(w) for w in name[3:].split(",") if w]
        if not widths:
            raise FormatError(f"bad trunk spec {name!r}")
        specs: list = []
        for w in widths:
            specs.append(L.FullyConnected(w))
            specs.append(L.ReLU())
        return specs
    specs = L.preset_trunk(name)
    want = L.TRUNK_INPUT_SHAPES[name]
    if tuple(input_shape) != want:
        raise ContractError(
            f"trunk {name!r} expects input {want}, dataset has {input_shape}")
    return specs


def cmd_train(args) -> int:
    config, trunk_name, head_hidden = _parse_train_config(args.config)
    if args.seed is not None:
        import dataclasses
        config = dataclasses.replace(config, seed=args.seed)
    dataset = load_dataset(args.manifest, catalog_path=args.catalog)
    specs = _trunk_specs(trunk_name, dataset.input_shape)
    model = build_dmtl(dataset.catalog, specs, dataset.input_shape,
                       seed=config.seed, head_hidden=head_hidden,
                       dtype=config.dtype)
    model, history = train_loop(model, dataset, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, TrainState(config.max_iterations, config),
                    out / "model.ckpt")
    with open(out / "loss.csv", "w", encoding="utf-8") as f:
        f.write("iteration,objective\n")
        for i, v in enumerate(history):
            f.write(f"{i},{v!r}\n")
    if history:
        plots.save_loss_curve(history, out / "loss.png")
    print(f"trained {config.max_iterations} iterations; "
          f"final objective {history[-1]:.6g}" if history else "no iterations run")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def _eval_options(args) -> EvalOptions:
    return EvalOptions(threads=max(1, args.threads))


def cmd_eval(args) -> int:
    dataset = load_dataset(args.manifest, catalog_path=args.catalog)
    model, _ = load_checkpoint(args.checkpoint, expected_catalog=dataset.catalog)
    report = evaluate(model, dataset, _eval_options(args))
    sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
        plots.save_metrics_bars(report, Path(args.out).with_suffix(".png"))
    return EXIT_OK


def cmd_predict(args) -> int:
    dataset = load_dataset(args.manifest, catalog_path=args.catalog)
    model, _ = load_checkpoint(args.checkpoint, expected_catalog=dataset.catalog)
    records = evaluate_records(model, dataset, _eval_options(args))
    lines = ["sample_id,attribute,value"]
    for r in records:
        for attr in model.catalog.attributes:
            v = r.predictions[attr.name]
            text = str(int(v)) if attr.kind == NOMINAL else repr(v)
            lines.append(f"{r.sample_id},{attr.name},{text}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_cooccur(args) -> int:
    dataset = load_dataset(args.manifest, catalog_path=args.catalog)
    if args.attrs:
        names = [a.strip() for a in args.attrs.split(",") if a.strip()]
    else:
        names = [a.name for a in dataset.catalog.attributes
                 if a.kind == NOMINAL and a.classes == 2]
    matrix = cooccurrence(dataset, names)
    text = cooccurrence_csv(matrix, names)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        plots.save_cooccurrence_heatmap(matrix, names,
                                        Path(args.out).with_suffix(".png"))
    sys.stdout.write(text)
    return EXIT_OK


_SYNTH_KEYS = {"n_samples", "latent_dim", "input_dim", "noise", "seed",
               "samples_per_subject", "latent_shift", "input_shape"}


def _parse_synth_spec(path, seed_override=None) -> SyntheticSpec:
    kv = parse_kv_file(path, ("attr.",), _SYNTH_KEYS)
    attrs: dict[int, dict[str, str]] = {}
    for key, value in kv.items():
        if not key.startswith("attr."):
            continue
        _, idx_s, field = key.split(".", 2)
        attrs.setdefault(int(idx_s), {})[field] = value
    defs = []
    for idx in sorted(attrs):
        a = attrs[idx]
        try:
            kind = a["kind"]
            weights = tuple(float(w) for w in a["weights"].split(","))
            if kind == NOMINAL:
                defs.append(SynthAttribute(a["name"], kind, weights,
                                           a["category"],
                                           classes=int(a.get("classes", 2))))
            elif kind == ORDINAL:
                defs.append(SynthAttribute(a["name"], kind, weights,
                                           a["category"],
                                           lo=float(a.get("lo", 0.0)),
                                           hi=float(a.get("hi", 1.0))))
            else:
                raise FormatError(f"{path}: attr.{idx}.kind must be N or O")
        except KeyError as e:
            raise FormatError(f"{path}: attr.{idx} missing field {e}") from None
    input_shape = None
    if "input_shape" in kv:
        input_shape = tuple(int(d) for d in kv["input_shape"].split(",") if d)
    try:
        return SyntheticSpec(
            n_samples=int(kv["n_samples"]),
            latent_dim=int(kv["latent_dim"]),
            attributes=tuple(defs),
            input_dim=int(kv.get("input_dim", 16)),
            noise=float(kv.get("noise", 0.0)),
            seed=seed_override if seed_override is not None
            else int(kv.get("seed", 0)),
            samples_per_subject=int(kv.get("samples_per_subject", 1)),
            latent_shift=float(kv.get("latent_shift", 0.0)),
            input_shape=input_shape,
        )
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from None


def cmd_synth(args) -> int:
    spec = _parse_synth_spec(args.spec, seed_override=args.seed)
    dataset = synth_generate(spec)
    kind = "image" if spec.input_shape is not None and len(spec.input_shape) == 3 \
        else "vector"
    if kind == "image":
        # DIMG stores 8-bit [0, 1] samples; generated inputs live around
        # [-1, 1], so rescale and quantize before export
        for i, (x, r) in enumerate(dataset.samples):
            q = np.clip((x + 1.0) * 0.5, 0.0, 1.0)
            q = np.round(q * 255.0) / np.float32(255.0)
            dataset.samples[i] = (q.astype(np.float32), r)
    manifest = write_dataset(dataset, args.out, input_kind=kind)
    print(f"wrote {len(dataset)} samples; manifest: {manifest}")
    return EXIT_OK


def cmd_split(args) -> int:
    dataset = load_dataset(args.manifest, catalog_path=args.catalog)
    folds = split_subject_exclusive(dataset, args.k, args.seed or 0)
    lines = ["sample_id,subject_id,fold"]
    for fold_id, fold in enumerate(folds):
        for i in fold:
            r = dataset.samples[i][1]
            lines.append(f"{r.sample_id},{r.subject_id},{fold_id}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = GC.check_all(trials=args.trials, seed=args.seed or 0,
                           step=args.step, tolerance=args.tolerance)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<22} max rel error {r.max_rel_error:.3e} "
              f"({r.trials} trials, {r.elapsed:.2f}s)")
        failed += 0 if r.passed else 1
    if failed:
        print(f"{failed} operation(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmtl",
        description="Joint estimation of heterogeneous attributes with a "
                    "shared-trunk multi-task network.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True, checkpoint=False, out_required=False):
        if manifest:
            p.add_argument("--manifest", required=True,
                           help="dataset manifest file")
            p.add_argument("--catalog", help="catalog file overriding the manifest's")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint")
        p.add_argument("--out", required=out_required, help="output path")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for evaluation (1 = deterministic)")
        p.add_argument("--format", choices=("table", "csv"), default="table",
                       help="stdout format for reports")

    p = sub.add_parser("train", help="train a model from a manifest")
    common(p, out_required=True)
    p.add_argument("--config", required=True, help="training config file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="decode per-sample predictions")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("cooccur", help="binary-attribute co-occurrence matrix")
    common(p)
    p.add_argument("--attrs", help="comma-separated attribute names "
                                   "(default: all binary nominal)")
    p.set_defaults(fn=cmd_cooccur)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, manifest=False, out_required=True)
    p.add_argument("--spec", required=True, help="synthesis spec file")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("split", help="subject-exclusive fold assignment")
    common(p)
    p.add_argument("--k", type=int, required=True, help="fold count")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p, manifest=False)
    p.add_argument("--trials", type=int, default=100, help="cases per op")
    p.add_argument("--step", type=float, default=1e-5, help="difference step")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="relative error bound")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (GradientCheckError, NumericalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DmtlError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
