"""Dataset ingestion, label parsing, splits, co-occurrence, and synthesis.

Label file (UTF-8 text):

    labels v1
    <sample_id>,<subject_id>,<name>=<value>:<N|O>,...

Attribute fields may appear in any order; the name plus category tag
disambiguate, and the tag must match the catalog kind.  Nominal values are
decimal integers in [0, classes); ordinal values are decimal reals inside the
declared range.  Whitespace around commas is ignored.

Manifest (key=value lines): ``catalog=``, ``labels=``, ``inputs=``,
``input_kind=image|vector``, ``width=``, ``height=``, ``channels=``.
Paths resolve relative to the manifest.  ``image`` inputs are one ``.dimg``
file per sample inside the ``inputs`` directory; ``vector`` inputs are one
text file of ``sample_id,v1,v2,...`` lines.

Image format: magic ``DIMG``, one version byte, little-endian u32 height,
width, channels, then row-major (h, w, c) 8-bit samples, scaled to [0, 1]
on load.
"""

from __future__ import annotations

import math
import statistics
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .catalog import (NOMINAL, ORDINAL, AttributeCatalog, AttributeDef,
                      CategorySpec, load_catalog, parse_catalog, save_catalog)
from .errors import ContractError, FormatError, LabelError

DIMG_MAGIC = b"DIMG"
DIMG_VERSION = 1


@dataclass
class LabelRecord:
    sample_id: str
    subject_id: str
    labels: list[tuple[float, str]]  # (value, tag) in catalog attribute order

    def value(self, catalog: AttributeCatalog, name: str) -> float:
        return self.labels[catalog.names().index(name)][0]


@dataclass
class Dataset:
    samples: list[tuple[np.ndarray, LabelRecord]]
    catalog: AttributeCatalog
    provenance: str = ""

    def __post_init__(self):
        if self.samples:
            shape = self.samples[0][0].shape
            for x, r in self.samples:
                if x.shape != shape:
                    raise ContractError(
                        f"sample {r.sample_id!r} shape {x.shape} != {shape}")
                if len(r.labels) != len(self.catalog):
                    raise ContractError(
                        f"sample {r.sample_id!r} carries {len(r.labels)} "
                        f"labels for a {len(self.catalog)}-attribute catalog")
                for attr, (value, tag) in zip(self.catalog.attributes, r.labels):
                    _validate_label(attr, value, tag, r.sample_id, None)
            ids = [r.sample_id for _, r in self.samples]
            if len(set(ids)) != len(ids):
                raise ContractError("duplicate sample ids")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def input_shape(self) -> tuple:
        return self.samples[0][0].shape if self.samples else ()

    def inputs(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i][0] for i in idx])

    def records(self, indices: Optional[Sequence[int]] = None) -> list[LabelRecord]:
        idx = range(len(self.samples)) if indices is None else indices
        return [self.samples[i][1] for i in idx]

    def label_arrays(self, indices: Optional[Sequence[int]] = None) -> dict[str, np.ndarray]:
        """Per-attribute label columns: int64 for nominal, float64 for ordinal."""
        records = self.records(indices)
        out: dict[str, np.ndarray] = {}
        for j, attr in enumerate(self.catalog.attributes):
            col = [r.labels[j][0] for r in records]
            out[attr.name] = (np.array(col, dtype=np.int64) if attr.kind == NOMINAL
                              else np.array(col, dtype=np.float64))
        return out

    def subset(self, indices: Sequence[int], note: str = "") -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.catalog,
                       note or self.provenance)

    def project(self, names: Sequence[str]) -> "Dataset":
        """Restrict to a subset of attributes (and the categories they use)."""
        keep = [i for i, a in enumerate(self.catalog.attributes)
                if a.name in set(names)]
        if len(keep) != len(names):
            missing = set(names) - {a.name for a in self.catalog.attributes}
            raise ContractError(f"unknown attributes: {sorted(missing)}")
        attrs = [self.catalog.attributes[i] for i in keep]
        used = {a.category_id for a in attrs}
        cats = [c for c in self.catalog.categories if c.id in used]
        sub_catalog = AttributeCatalog(attrs, cats)
        samples = [(x, LabelRecord(r.sample_id, r.subject_id,
                                   [r.labels[i] for i in keep]))
                   for x, r in self.samples]
        return Dataset(samples, sub_catalog, self.provenance)


def _validate_label(attr: AttributeDef, value: float, tag: str,
                    sample_id: str, line_no: Optional[int]) -> float:
    where = f"line {line_no}: " if line_no is not None else ""
    if tag != attr.kind:
        raise FormatError(
            f"{where}attribute {attr.name!r} tagged {tag} but catalog says {attr.kind}")
    if attr.kind == NOMINAL:
        if value != int(value) or not 0 <= int(value) < attr.classes:
            raise LabelError(
                f"sample {sample_id!r} attribute {attr.name!r}: "
                f"class {value:g} outside [0, {attr.classes})")
        return float(int(value))
    if not attr.lo <= value <= attr.hi:
        raise LabelError(
            f"sample {sample_id!r} attribute {attr.name!r}: "
            f"value {value:g} outside [{attr.lo:g}, {attr.hi:g}]")
    return float(value)


def parse_labels(stream, catalog: AttributeCatalog) -> list[LabelRecord]:
    """Parse the two-field label format; attribute order per line is free."""
    if isinstance(stream, str):
        lines = stream.splitlines()
    else:
        lines = [ln.rstrip("\n") for ln in stream]
    if not lines or lines[0].strip() != "labels v1":
        raise FormatError("label file must start with 'labels v1'")
    records = []
    order = catalog.names()
    for ln, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 3:
            raise FormatError(
                f"line {ln}: expected sample id, subject id and "
                "attribute fields")
        sample_id, subject_id = parts[0], parts[1]
        if not sample_id or not subject_id:
            raise FormatError(f"line {ln}: empty sample or subject id")
        seen: dict[str, tuple[float, str]] = {}
        for fieldtext in parts[2:]:
            name, eq, rest = fieldtext.partition("=")
            value_s, colon, tag = rest.rpartition(":")
            if not eq or not colon or tag not in (NOMINAL, ORDINAL):
                raise FormatError(f"line {ln}: field {fieldtext!r} is not name=value:tag")
            name = name.strip()
            if name in seen:
                raise FormatError(f"line {ln}: duplicate attribute {name!r}")
            if name not in catalog._by_name:
                raise FormatError(f"line {ln}: unknown attribute {name!r}")
            try:
                value = float(value_s)
            except ValueError:
                raise FormatError(f"line {ln}: bad numeric value {value_s!r}") from None
            seen[name] = (_validate_label(catalog.attribute(name), value,
                                          tag.strip(), sample_id, ln), tag.strip())
        missing = [n for n in order if n not in seen]
        if missing:
            raise FormatError(f"line {ln}: missing attributes {missing}")
        records.append(LabelRecord(sample_id, subject_id,
                                   [seen[n] for n in order]))
    return records


def serialize_labels(records: Iterable[LabelRecord],
                     catalog: AttributeCatalog) -> str:
    """Canonical text form (catalog attribute order); parses back identically."""
    lines = ["labels v1"]
    for r in records:
        fields = []
        for attr, (value, tag) in zip(catalog.attributes, r.labels):
            text = str(int(value)) if attr.kind == NOMINAL else repr(float(value))
            fields.append(f"{attr.name}={text}:{tag}")
        lines.append(",".join([r.sample_id, r.subject_id] + fields))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# binary image format


def write_dimg(path, image: np.ndarray) -> None:
    """Write an (h, w, c) or (c, h, w) uint8 array, stored as (h, w, c)."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ContractError("DIMG stores 8-bit samples; pass a uint8 array")
    if arr.ndim != 3:
        raise ContractError(f"DIMG needs a rank-3 array, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(DIMG_MAGIC)
        f.write(struct.pack("<B", DIMG_VERSION))
        f.write(struct.pack("<III", h, w, c))
        f.write(arr.tobytes(order="C"))


def read_dimg(path) -> np.ndarray:
    """Read a DIMG file into a (c, h, w) float32 array scaled to [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 17 or blob[:4] != DIMG_MAGIC:
        raise FormatError(f"{path}: not a DIMG file")
    version = blob[4]
    if version != DIMG_VERSION:
        raise FormatError(f"{path}: unsupported DIMG version {version}")
    h, w, c = struct.unpack("<III", blob[5:17])
    expected = 17 + h * w * c
    if len(blob) != expected:
        raise FormatError(f"{path}: size {len(blob)} != expected {expected}")
    raw = np.frombuffer(blob, dtype=np.uint8, offset=17).reshape(h, w, c)
    return (raw.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)


def resize_nearest(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize of a (c, h, w) array; test convenience only."""
    c, h, w = image.shape
    ri = (np.arange(height) * h) // height
    ci = (np.arange(width) * w) // width
    return image[:, ri][:, :, ci]


# ---------------------------------------------------------------------------
# manifests

_MANIFEST_KEYS = {"catalog", "labels", "inputs", "input_kind",
                  "width", "height", "channels"}


def parse_manifest(path) -> dict[str, str]:
    path = Path(path)
    out: dict[str, str] = {}
    for ln, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq:
            raise FormatError(f"{path}:{ln}: expected key=value")
        if key not in _MANIFEST_KEYS:
            raise FormatError(f"{path}:{ln}: unknown manifest key {key!r}")
        if key in out:
            raise FormatError(f"{path}:{ln}: duplicate key {key!r}")
        out[key] = value
    for req in ("catalog", "labels", "inputs", "input_kind"):
        if req not in out:
            raise FormatError(f"{path}: manifest missing {req!r}")
    return out


def _parse_vector_file(path, width: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                             start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        sample_id, values = parts[0], parts[1:]
        if len(values) != width:
            raise FormatError(
                f"{path}:{ln}: sample {sample_id!r} has {len(values)} values, "
                f"manifest says width={width}")
        try:
            vec = np.array([float(v) for v in values], dtype=np.float32)
        except ValueError:
            raise FormatError(f"{path}:{ln}: bad numeric value") from None
        if sample_id in out:
            raise FormatError(f"{path}:{ln}: duplicate sample {sample_id!r}")
        out[sample_id] = vec
    return out


def load_dataset(manifest_path, catalog_path=None) -> Dataset:
    """Load a manifest-described dataset with validated shapes and labels."""
    manifest_path = Path(manifest_path)
    m = parse_manifest(manifest_path)
    base = manifest_path.parent
    catalog = load_catalog(catalog_path if catalog_path is not None
                           else base / m["catalog"])
    with open(base / m["labels"], "r", encoding="utf-8") as f:
        records = parse_labels(f, catalog)
    ids = [r.sample_id for r in records]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise FormatError(f"duplicate sample id {dup!r} in label file")

    kind = m["input_kind"]
    inputs_path = base / m["inputs"]
    samples: list[tuple[np.ndarray, LabelRecord]] = []
    if kind == "image":
        for req in ("width", "height", "channels"):
            if req not in m:
                raise FormatError(f"image manifest missing {req!r}")
        if not inputs_path.is_dir():
            raise FormatError(
                f"input_kind=image requires inputs to be a directory, "
                f"got {inputs_path}")
        want = (int(m["channels"]), int(m["height"]), int(m["width"]))
        for r in records:
            f = inputs_path / f"{r.sample_id}.dimg"
            if not f.exists():
                raise FormatError(f"missing input file for sample {r.sample_id!r}")
            img = read_dimg(f)
            if img.shape != want:
                raise FormatError(
                    f"sample {r.sample_id!r}: image shape {img.shape} "
                    f"!= manifest {want}")
            samples.append((img, r))
    elif kind == "vector":
        if "width" not in m:
            raise FormatError("vector manifest missing 'width'")
        if inputs_path.is_dir():
            raise FormatError(
                "input_kind=vector requires inputs to be a single file; "
                f"{inputs_path} is a directory")
        vectors = _parse_vector_file(inputs_path, int(m["width"]))
        for r in records:
            if r.sample_id not in vectors:
                raise FormatError(f"missing input vector for sample {r.sample_id!r}")
            samples.append((vectors[r.sample_id], r))
    else:
        raise FormatError(f"input_kind must be image or vector, got {kind!r}")
    return Dataset(samples, catalog, provenance=str(manifest_path))


def write_dataset(dataset: Dataset, out_dir, input_kind: str = "vector") -> Path:
    """Emit catalog, labels, inputs, and a manifest; returns the manifest path.

    Vector datasets keep full float precision.  Image datasets must already
    hold values that are exact multiples of 1/255 (as loaded from DIMG).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_catalog(dataset.catalog, out / "catalog.txt")
    with open(out / "labels.txt", "w", encoding="utf-8") as f:
        f.write(serialize_labels(dataset.records(), dataset.catalog))
    lines = ["catalog=catalog.txt", "labels=labels.txt",
             f"input_kind={input_kind}"]
    if input_kind == "vector":
        shape = dataset.input_shape
        if len(shape) != 1:
            raise ContractError(f"vector datasets need rank-1 inputs, got {shape}")
        with open(out / "inputs.txt", "w", encoding="utf-8") as f:
            for x, r in dataset.samples:
                f.write(",".join([r.sample_id] + [repr(float(v)) for v in x]) + "\n")
        lines += ["inputs=inputs.txt", f"width={shape[0]}"]
    elif input_kind == "image":
        c, h, w = dataset.input_shape
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        for x, r in dataset.samples:
            q = np.round(x * 255.0)
            if not np.allclose(q / 255.0, x, atol=1e-6):
                raise ContractError(
                    f"sample {r.sample_id!r} is not 8-bit exact; "
                    "image export would lose precision")
            write_dimg(img_dir / f"{r.sample_id}.dimg",
                       q.astype(np.uint8).transpose(1, 2, 0))
        lines += ["inputs=images", f"width={w}", f"height={h}", f"channels={c}"]
    else:
        raise ContractError(f"input_kind must be image or vector, got {input_kind!r}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# splits


def split_subject_exclusive(dataset: Dataset, k: int, seed: int) -> list[list[int]]:
    """k folds of sample indices; each subject lands wholly in one fold and
    fold subject counts are balanced within one."""
    if k < 2:
        raise ContractError(f"need k >= 2 folds, got {k}")
    by_subject: dict[str, list[int]] = {}
    for i, (_, r) in enumerate(dataset.samples):
        by_subject.setdefault(r.subject_id, []).append(i)
    subjects = sorted(by_subject)
    if len(subjects) < k:
        raise ContractError(
            f"need at least {k} distinct subjects, got {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    folds: list[list[int]] = [[] for _ in range(k)]
    for pos, si in enumerate(order):
        folds[pos % k].extend(by_subject[subjects[si]])
    return [sorted(f) for f in folds]


# ---------------------------------------------------------------------------
# co-occurrence


def cooccurrence(dataset: Dataset, attr_names: Sequence[str]) -> np.ndarray:
    """Signed pairwise association of binary attributes (phi coefficient).

    Entry (a, b) is the Pearson correlation of the two 0/1 indicator columns,
    computed exactly from the integer contingency table.  The diagonal is 1;
    pairs involving a constant column are 0 by convention.
    """
    labels = dataset.label_arrays()
    cols = []
    for name in attr_names:
        attr = dataset.catalog.attribute(name)
        if attr.kind != NOMINAL or attr.classes != 2:
            raise ContractError(
                f"co-occurrence needs binary nominal attributes; "
                f"{name!r} is not")
        cols.append(labels[name].astype(np.int64))
    m = len(cols)
    out = np.ones((m, m), dtype=np.float64)
    for i in range(m):
        for j in range(i + 1, m):
            out[i, j] = out[j, i] = phi_coefficient(cols[i], cols[j])
    return out


def phi_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    """Phi from the 2x2 contingency table; 0 when a margin is degenerate."""
    n11 = int(np.sum((a == 1) & (b == 1)))
    n10 = int(np.sum((a == 1) & (b == 0)))
    n01 = int(np.sum((a == 0) & (b == 1)))
    n00 = int(np.sum((a == 0) & (b == 0)))
    r1, r0 = n11 + n10, n01 + n00
    c1, c0 = n11 + n01, n10 + n00
    denom_sq = r1 * r0 * c1 * c0
    if denom_sq == 0:
        return 0.0
    return (n11 * n00 - n10 * n01) / math.sqrt(denom_sq)


def cooccurrence_csv(matrix: np.ndarray, names: Sequence[str]) -> str:
    """CSV with attribute names as header row and column."""
    lines = ["," + ",".join(names)]
    for name, row in zip(names, matrix):
        lines.append(name + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthAttribute:
    name: str
    kind: str                       # NOMINAL or ORDINAL
    weights: tuple[float, ...]      # dependence on each latent factor
    category_id: str
    classes: int = 2                # nominal only
    lo: float = 0.0                 # ordinal only
    hi: float = 1.0
    # optional multiplicative dependence: (i, j, w) adds w * z_i * z_j to the
    # projection, making the attribute a nonlinear function of the latents
    pairs: tuple[tuple[int, int, float], ...] = ()


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a correlated-attribute dataset.

    Inputs are a noisy tanh mixture of i.i.d. standard normal latent
    factors; each attribute is a deterministic function of its weighted
    latent projection (quantile thresholds for nominal, a clipped affine
    map for ordinal), so label correlations follow from shared weights.
    """
    n_samples: int
    latent_dim: int
    attributes: tuple[SynthAttribute, ...]
    input_dim: int = 16
    noise: float = 0.0
    seed: int = 0
    samples_per_subject: int = 1
    latent_shift: float = 0.0       # distribution shift knob
    input_shape: Optional[tuple] = None  # reshape target, e.g. (1, 16, 16)

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ContractError("latent_dim must be >= 1")
        if self.noise < 0:
            raise ContractError("noise level must be >= 0")
        if self.samples_per_subject < 1:
            raise ContractError("samples_per_subject must be >= 1")
        for a in self.attributes:
            if len(a.weights) != self.latent_dim:
                raise ContractError(
                    f"attribute {a.name!r} has {len(a.weights)} weights, "
                    f"latent_dim is {self.latent_dim}")
            if not any(w != 0 for w in a.weights) and not a.pairs:
                raise ContractError(f"attribute {a.name!r} has all-zero weights")
            for i, j, _ in a.pairs:
                if not (0 <= i < self.latent_dim and 0 <= j < self.latent_dim
                        and i != j):
                    raise ContractError(
                        f"attribute {a.name!r} pair ({i}, {j}) invalid for "
                        f"latent_dim {self.latent_dim}")
            if a.pairs and a.kind == NOMINAL and a.classes != 2:
                raise ContractError(
                    f"attribute {a.name!r}: interaction terms support only "
                    "binary nominal attributes (threshold at zero)")
        if self.input_shape is not None and \
                int(np.prod(self.input_shape)) != self.input_dim:
            raise ContractError(
                f"input_shape {self.input_shape} incompatible with "
                f"input_dim {self.input_dim}")


def synth_catalog(spec: SyntheticSpec) -> AttributeCatalog:
    attrs = []
    cats: dict[str, CategorySpec] = {}
    for a in spec.attributes:
        if a.kind == NOMINAL:
            attrs.append(AttributeDef(a.name, NOMINAL, a.category_id,
                                      classes=a.classes))
        else:
            attrs.append(AttributeDef(a.name, ORDINAL, a.category_id,
                                      lo=a.lo, hi=a.hi))
        if a.category_id not in cats:
            cats[a.category_id] = CategorySpec(a.category_id, a.kind)
    return AttributeCatalog(attrs, list(cats.values()))


def synth_generate(spec: SyntheticSpec) -> Dataset:
    """Draw a dataset per the recipe; bitwise deterministic given the seed."""
    catalog = synth_catalog(spec)
    rng = np.random.default_rng(spec.seed)
    z = rng.normal(size=(spec.n_samples, spec.latent_dim)) + spec.latent_shift
    mix = rng.normal(size=(spec.input_dim, spec.latent_dim)) / math.sqrt(spec.latent_dim)
    x = np.tanh(z @ mix.T)
    if spec.noise > 0:
        x = x + spec.noise * rng.normal(size=x.shape)
    x = x.astype(np.float32)

    columns: dict[str, np.ndarray] = {}
    for a in spec.attributes:
        w = np.array(a.weights, dtype=np.float64)
        t = z @ w
        for i, j, pw in a.pairs:
            t = t + pw * z[:, i] * z[:, j]
        # linear and product terms are uncorrelated: var adds
        sigma_t = math.sqrt(float(w @ w) + sum(pw * pw for _, _, pw in a.pairs))
        if a.kind == NOMINAL:
            if a.pairs:
                # product projections are symmetric about zero; a zero
                # threshold splits the two classes evenly
                columns[a.name] = (t > 0).astype(np.int64)
            else:
                # equal-probability bins of the N(0, sigma^2) projection
                nd = statistics.NormalDist(0.0, sigma_t)
                cuts = [nd.inv_cdf(kk / a.classes) for kk in range(1, a.classes)]
                columns[a.name] = np.digitize(t, cuts).astype(np.int64)
        else:
            mid = 0.5 * (a.lo + a.hi)
            scale = (a.hi - a.lo) / (6.0 * sigma_t)
            columns[a.name] = np.clip(mid + scale * t, a.lo, a.hi)

    samples = []
    width = len(str(max(spec.n_samples - 1, 1)))
    for i in range(spec.n_samples):
        vec = x[i]
        if spec.input_shape is not None:
            vec = vec.reshape(spec.input_shape)
        labels = []
        for a, attr in zip(spec.attributes, catalog.attributes):
            labels.append((float(columns[a.name][i]), attr.kind))
        rec = LabelRecord(f"sample{i:0{width}d}",
                          f"subject{i // spec.samples_per_subject:0{width}d}",
                          labels)
        samples.append((vec, rec))
    return Dataset(samples, catalog, provenance=f"synthetic seed={spec.seed}")
