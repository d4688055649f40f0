"""Training loop: plain SGD with weight decay and a step learning-rate drop.

The objective graph carries the data losses only; weight decay enters the
update as an additive gradient term (equivalent to differentiating a
half-squared-L2 penalty with the coefficient absorbed), with separate trunk
and head coefficients.  Biases, batch-norm shifts, and running statistics
are never decayed; running statistics are never touched by the optimizer.

Batch order is a pure function of (seed, iteration): epoch e uses the
permutation seeded by (seed, e), consumed in full batches with any remainder
dropped.  That makes same-seed runs bitwise reproducible and lets a resumed
run continue the exact stream.

Checkpoint file: magic ``DMTL``, u32 version, 32-byte catalog digest, a JSON
config snapshot (training config plus the full architecture), u64 iteration,
parameter blocks (u16 name length, name bytes, u8 rank, u32 dims, raw
little-endian float32 values), a JSON sampler-state block, and a CRC-32
trailer over everything before it.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as L
from .catalog import AttributeCatalog, parse_catalog
from .data import Dataset
from .errors import (ChecksumError, ContractError, DigestError, FormatError,
                     LabelError, NumericalError, VersionError)
from .model import DmtlModel, objective_dmtl

CHECKPOINT_MAGIC = b"DMTL"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    eta: float = 0.0001
    decay_factor: float = 0.1
    step_interval: int = 1000
    gamma1: float = 0.0
    gamma2: float = 0.0
    lambdas: dict[str, float] = field(default_factory=dict)
    batch_size: int = 16
    max_iterations: int = 100
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.eta <= 0:
            raise ContractError("learning rate must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ContractError("decay_factor must be in (0, 1]")
        if self.step_interval < 1:
            raise ContractError("step_interval must be >= 1")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ContractError("weight-decay coefficients must be >= 0")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 (batch-norm train mode)")
        if self.max_iterations < 0:
            raise ContractError("max_iterations must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ContractError("precision must be 'f32' or 'f64'")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


def full_scale_config(**overrides) -> TrainConfig:
    """Large-run profile: base rate 1e-4 dropped to 10% every 100k iterations.

    Desk-scale runs usually override step_interval down (the TrainConfig
    default is 1000).
    """
    base = dict(eta=0.0001, decay_factor=0.1, step_interval=100000)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Stepped schedule: eta * decay_factor ** floor(iteration / interval)."""
    if iteration < 0:
        raise ContractError("iteration must be >= 0")
    return config.eta * config.decay_factor ** (iteration // config.step_interval)


def batch_indices(n_samples: int, batch_size: int, seed: int,
                  iteration: int) -> np.ndarray:
    """The batch consumed at one iteration; pure in (seed, iteration)."""
    per_epoch = n_samples // batch_size
    if per_epoch == 0:
        raise ContractError(
            f"dataset of {n_samples} cannot fill a batch of {batch_size}")
    epoch, slot = divmod(iteration, per_epoch)
    perm = np.random.default_rng(
        np.random.SeedSequence([seed, epoch])).permutation(n_samples)
    return perm[slot * batch_size:(slot + 1) * batch_size]


def sgd_step(model: DmtlModel, gradients: dict[str, np.ndarray], lr: float,
             gamma1: float, gamma2: float) -> DmtlModel:
    """In-place update w <- w - lr * (grad + decay * w) on trainable params.

    decay is gamma1 for trunk parameters, gamma2 for head parameters, and is
    skipped for parameters outside the weight penalty (biases, BN shifts).
    """
    for qname, p in model.qualified_params():
        if not p.trainable:
            continue
        grad = gradients.get(qname)
        if grad is None:
            raise ContractError(f"missing gradient for trainable {qname!r}")
        decay = gamma1 if qname.startswith("trunk.") else gamma2
        if p.decay and decay > 0:
            p.data -= lr * (grad + decay * p.data)
        else:
            p.data -= lr * grad
    return model


def train_loop(model: DmtlModel, dataset: Dataset, config: TrainConfig,
               start_iteration: int = 0) -> tuple[DmtlModel, list[float]]:
    """Run SGD for config.max_iterations steps; returns (model, loss history).

    The model is updated in place.  The recorded value per iteration is the
    lambda-weighted sum of category losses on that iteration's batch.
    """
    if dataset.catalog.digest() != model.catalog.digest():
        raise LabelError("dataset catalog does not match model catalog")
    if np.dtype(model.dtype) != np.dtype(config.dtype):
        raise ContractError(
            f"model precision {model.dtype} != config precision {config.precision}; "
            "build the model with the matching dtype")
    history: list[float] = []
    lambdas = config.lambdas or None
    for it in range(start_iteration, start_iteration + config.max_iterations):
        idx = batch_indices(len(dataset), config.batch_size, config.seed, it)
        batch = dataset.inputs(idx)
        labels = dataset.label_arrays(idx)
        obj = objective_dmtl(model, batch, labels, lambdas=lambdas,
                             gamma1=0.0, gamma2=0.0, mode="train")
        value = obj.value.item()
        if not np.isfinite(value):
            raise NumericalError(f"objective diverged at iteration {it}: {value}")
        grads = obj.backward()
        sgd_step(model, grads, lr_at(config, it), config.gamma1, config.gamma2)
        history.append(value)
    return model, history


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainState:
    iteration: int
    config: TrainConfig


def _config_snapshot(model: DmtlModel, config: TrainConfig) -> dict:
    return {
        "train_config": dataclasses.asdict(config),
        "catalog": model.catalog.serialize(),
        "input_shape": list(model.input_shape),
        "trunk_specs": [L.spec_to_dict(s) for s in model.trunk_specs],
        "head_specs": {cid: [L.spec_to_dict(s) for s in specs]
                       for cid, specs in model.head_specs.items()},
    }


def save_checkpoint(model: DmtlModel, state: TrainState, path) -> None:
    """Write the bit-exact checkpoint format (float32 models only)."""
    if np.dtype(model.dtype) != np.dtype(np.float32):
        raise ContractError(
            "checkpoint format stores 32-bit values; only float32 models "
            "can be checkpointed")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += model.catalog.digest()
    cfg = json.dumps(_config_snapshot(model, state.config),
                     sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg)) + cfg
    blob += struct.pack("<Q", state.iteration)
    params = list(model.qualified_params())
    blob += struct.pack("<I", len(params))
    for qname, p in params:
        name = qname.encode()
        blob += struct.pack("<H", len(name)) + name
        blob += struct.pack("<B", p.data.ndim)
        for d in p.data.shape:
            blob += struct.pack("<I", d)
        blob += p.data.astype("<f4", copy=False).tobytes(order="C")
    rng = json.dumps({"seed": state.config.seed,
                      "iteration": state.iteration}, sort_keys=True).encode()
    blob += struct.pack("<I", len(rng)) + rng
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ChecksumError("checkpoint file truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _param_flags(name: str) -> tuple[bool, bool]:
    """(trainable, decay) inferred from the parameter naming convention."""
    if name.endswith((".running_mean", ".running_var")):
        return False, False
    if name.endswith((".bias", ".shift")):
        return True, False
    return True, True


def load_checkpoint(path, expected_catalog: Optional[AttributeCatalog] = None
                    ) -> tuple[DmtlModel, TrainState]:
    """Load and verify a checkpoint; returns the model and training state."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 + 4 + 32 + 4 + 4:
        raise ChecksumError("checkpoint file truncated")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise ChecksumError("checkpoint checksum mismatch")
    r = _Reader(blob[:-4])
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    cfg = json.loads(r.take(r.u32()).decode())
    iteration = r.u64()

    catalog = parse_catalog(cfg["catalog"])
    if catalog.digest() != digest:
        raise DigestError("checkpoint digest does not match embedded catalog")
    if expected_catalog is not None and expected_catalog.digest() != digest:
        raise DigestError("checkpoint catalog digest does not match the "
                          "provided catalog")

    trunk_specs = [L.spec_from_dict(d) for d in cfg["trunk_specs"]]
    # category order, not JSON key order, is canonical for heads
    head_specs = {c.id: [L.spec_from_dict(d) for d in cfg["head_specs"][c.id]]
                  for c in catalog.categories}
    input_shape = tuple(cfg["input_shape"])

    n_params = r.u32()
    loaded: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        qname = r.take(r.u16()).decode()
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        loaded[qname] = np.ascontiguousarray(data, dtype=np.float32)
    json.loads(r.take(r.u32()).decode())  # sampler state; derivable but verified parseable

    trunk = L.ParameterSet()
    heads: dict[str, L.ParameterSet] = {cid: L.ParameterSet() for cid in head_specs}
    for qname, data in loaded.items():
        if qname.startswith("trunk."):
            name = qname[len("trunk."):]
            trainable, decay = _param_flags(name)
            trunk.add(L.Param(name, data.copy(), trainable, decay))
        elif qname.startswith("head."):
            cid, _, name = qname[len("head."):].partition(".")
            if cid not in heads:
                raise FormatError(f"checkpoint parameter {qname!r} names an "
                                  f"unknown head {cid!r}")
            trainable, decay = _param_flags(name)
            heads[cid].add(L.Param(name, data.copy(), trainable, decay))
        else:
            raise FormatError(f"checkpoint parameter {qname!r} has an "
                              "unknown prefix")
    feature_shape = L.check_stack(trunk_specs, input_shape)
    model = DmtlModel(catalog, input_shape, trunk_specs, trunk, head_specs,
                      heads, feature_shape)
    config = TrainConfig(**cfg["train_config"])
    return model, TrainState(iteration=iteration, config=config)
