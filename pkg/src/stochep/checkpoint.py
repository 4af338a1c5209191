"""Versioned binary container for trained networks.

Layout: 4-byte magic, u32 format version, u32 header length, JSON header
(topology descriptor, training seed, epoch counter, optimizer step and
moment presence), then the weight tensors and any optimizer moments as
raw little-endian float64 blobs in connection order.  Everything after
the header is fixed-size given the header, so a truncated file is always
detectable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .network import Params, Topology, topology_from_dict, topology_to_dict
from .trainer import OptimizerState

MAGIC = b"SEPC"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a checkpoint we can read."""


class VersionMismatchError(CheckpointError):
    """The file's format version differs from this build's."""

    def __init__(self, found: int):
        super().__init__(f"checkpoint version {found}, this build "
                         f"reads version {VERSION}")
        self.found = found


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a run."""

    topology: Topology
    params: Params
    seed: int
    epoch: int
    opt_state: OptimizerState | None = None
    extra: dict = field(default_factory=dict)


def _write_blob(f, arr: np.ndarray):
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blob(f, shape) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64))
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise CheckpointError("weight data cut short")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_checkpoint(path, ckpt: Checkpoint):
    shapes = [list(w.shape) for w in ckpt.params.weights]
    header = {
        "topology": topology_to_dict(ckpt.topology),
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "shapes": shapes,
        "opt": None,
        "extra": ckpt.extra,
    }
    if ckpt.opt_state is not None:
        header["opt"] = {"step": ckpt.opt_state.step,
                         "moments": ckpt.opt_state.m is not None}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for w in ckpt.params.weights:
            _write_blob(f, w)
        if ckpt.opt_state is not None and ckpt.opt_state.m is not None:
            for m in ckpt.opt_state.m:
                _write_blob(f, m)
            for v in ckpt.opt_state.v:
                _write_blob(f, v)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        fixed = f.read(8)
        if len(fixed) != 8:
            raise CheckpointError(f"{path}: header cut short")
        version, header_len = struct.unpack("<II", fixed)
        if version != VERSION:
            raise VersionMismatchError(version)
        raw = f.read(header_len)
        if len(raw) != header_len:
            raise CheckpointError(f"{path}: header cut short")
        header = json.loads(raw)
        topology = topology_from_dict(header["topology"])
        shapes = [tuple(s) for s in header["shapes"]]
        expected = [c.weight_shape() for c in topology.connections]
        if shapes != expected:
            raise CheckpointError("stored shapes disagree with the topology")
        params = Params([_read_blob(f, s) for s in shapes])
        opt_state = None
        if header["opt"] is not None:
            m = v = None
            if header["opt"]["moments"]:
                m = [_read_blob(f, s) for s in shapes]
                v = [_read_blob(f, s) for s in shapes]
            opt_state = OptimizerState(step=header["opt"]["step"], m=m, v=v)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return Checkpoint(topology, params, header["seed"], header["epoch"],
                      opt_state, header.get("extra", {}))
