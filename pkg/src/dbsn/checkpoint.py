"""Binary checkpoints of trainer state.

Layout (all integers little-endian)::

    8 bytes   magic  b"DBSNCKPT"
    1 byte    format version (currently 1)
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header: method, network spec, train config, step,
              rng record, optimizer scalars, history, and an array manifest
              [{"name", "shape", "dtype"}] in storage order
    ...       raw array payloads in manifest order, little-endian float64

Parameters are named ``w/<name>``, ``rho/<name>``, ``theta``,
``fixed_log_alpha``, ``mom/<name>``, ``adam/m`` and ``adam/v``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .concrete import EdgeSample
from .model import Model
from .network import CellSpec, NetworkSpec
from .tensor import Tensor
from .train import AdamSlots, TrainConfig, Trainer

MAGIC = b"DBSNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray]


def spec_to_dict(spec: NetworkSpec) -> dict:
    d = asdict(spec)
    d["cell"]["op_kinds"] = list(spec.cell.op_kinds)
    return d


def spec_from_dict(d: dict) -> NetworkSpec:
    d = dict(d)
    d["cell"] = CellSpec(**d["cell"])
    return NetworkSpec(**d)


def trainer_arrays(trainer: Trainer) -> dict[str, np.ndarray]:
    m = trainer.model
    arrays = {f"w/{k}": v.values for k, v in m.weights.items()}
    if m.rho is not None:
        arrays.update({f"rho/{k}": v.values for k, v in m.rho.items()})
    if m.theta is not None:
        arrays["theta"] = m.theta.values
    if m.fixed_structure is not None:
        arrays["fixed_log_alpha"] = m.fixed_structure.log_alpha.values
    arrays.update({f"mom/{k}": v for k, v in trainer.state.momentum.items()})
    if trainer.state.adam is not None:
        arrays["adam/m"] = trainer.state.adam.m
        arrays["adam/v"] = trainer.state.adam.v
    return arrays


def trainer_header(trainer: Trainer, run_config: dict | None = None) -> dict:
    st = trainer.state
    return {
        "format_version": VERSION,
        "method": trainer.method,
        "network": spec_to_dict(trainer.spec),
        "train": trainer.config.to_dict(),
        "run_config": run_config,
        "step": st.step,
        "freeze_beta": trainer.freeze_beta,
        "rng": {"scheme": "seed-sequence substreams", "root_seed": trainer.config.seed, "step": st.step},
        "adam_count": None if st.adam is None else st.adam.count,
        "epoch_sums": st.epoch_sums,
        "history": st.history,
        "tau": trainer.model.tau,
        "beta": trainer.model.beta,
    }


def save_checkpoint(trainer: Trainer, path, run_config: dict | None = None) -> None:
    header = trainer_header(trainer, run_config)
    arrays = trainer_arrays(trainer)
    header["arrays"] = [{"name": k, "shape": list(v.shape), "dtype": "<f8"} for k, v in arrays.items()]
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<BI", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    offset = 8 + struct.calcsize("<BI")
    header = json.loads(data[offset : offset + hlen].decode("utf-8"))
    offset += hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    return Checkpoint(header, arrays)


def restore_trainer(ckpt: Checkpoint, x_train, y_train, x_test=None, y_test=None) -> Trainer:
    """Rebuild a trainer that continues exactly where the checkpoint stopped."""
    h, a = ckpt.header, ckpt.arrays
    spec = spec_from_dict(h["network"])
    config = TrainConfig(**h["train"])
    fixed = EdgeSample(Tensor(a["fixed_log_alpha"])) if "fixed_log_alpha" in a else None
    trainer = Trainer(h["method"], spec, config, x_train, y_train, x_test, y_test, fixed_structure=fixed, freeze_beta=h.get("freeze_beta"))
    _load_model_arrays(trainer.model, a)
    st = trainer.state
    st.step = h["step"]
    st.momentum = {k[4:]: v.copy() for k, v in a.items() if k.startswith("mom/")}
    if st.adam is not None:
        st.adam = AdamSlots(a["adam/m"].copy(), a["adam/v"].copy(), h["adam_count"])
    st.epoch_sums = dict(h["epoch_sums"])
    st.history = [dict(r) for r in h["history"]]
    trainer.sync_temperature()
    return trainer


def _load_model_arrays(model: Model, a: dict[str, np.ndarray]) -> None:
    for k, v in model.weights.items():
        v.values[...] = a[f"w/{k}"]
    if model.rho is not None:
        for k, v in model.rho.items():
            v.values[...] = a[f"rho/{k}"]
    if model.theta is not None:
        model.theta.values[...] = a["theta"]


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    h = ckpt.header
    spec = spec_from_dict(h["network"])
    config = TrainConfig(**h["train"])
    from .train import build_model

    fixed = EdgeSample(Tensor(ckpt.arrays["fixed_log_alpha"])) if "fixed_log_alpha" in ckpt.arrays else None
    model = build_model(h["method"], spec, config, fixed)
    _load_model_arrays(model, ckpt.arrays)
    model.tau = h["tau"]
    model.beta = h["beta"]
    return model


def export_json(ckpt: Checkpoint, path) -> None:
    """Human-readable dump of a checkpoint (header plus nested-list arrays)."""
    doc = dict(ckpt.header)
    doc["arrays"] = {k: v.tolist() for k, v in ckpt.arrays.items()}
    Path(path).write_text(json.dumps(doc, indent=1))
