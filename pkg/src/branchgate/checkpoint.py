"""Self-describing binary checkpoints.

Layout: the 6-byte magic ``GCKPT1``, an 8-byte little-endian header length,
a UTF-8 JSON header (sorted keys), then a payload of little-endian float32
values. The header records the architecture, which blocks are present, the
connectivity tag, the training position and seed, optimizer settings, an
optional dataset descriptor and schedule, a tensor directory
``name -> {dtype, shape, offset}`` and the payload's SHA-256.
"""
import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .arch import ArchSpec, build_network
from .errors import CheckpointError
from .trainer import OptimizerState, TrainingState, TrainSchedule

MAGIC = b"GCKPT1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_DTYPE = "<f4"


@dataclass
class Checkpoint:
    net: object
    state: TrainingState = None
    optimizer: OptimizerState = None
    schedule: TrainSchedule = None
    dataset: dict = None
    header: dict = None


def _tensors(net, optimizer):
    for name, p in net.named_parameters():
        yield "param/" + name, p.data
    for name, b in net.named_buffers():
        yield "buffer/" + name, b
    for (i, j), gs in net.gate_states():
        yield f"gate/m{i}.b{j}.real", gs.real_gates
        yield f"gate/m{i}.b{j}.binary", gs.binary_gates
    if optimizer is not None:
        for name in sorted(optimizer.buffers):
            yield "momentum/" + name, optimizer.buffers[name]


def encode_checkpoint(net, state=None, optimizer=None, schedule=None, dataset=None):
    """Checkpoint bytes; identical inputs give identical bytes."""
    if net.dtype != np.float32:
        raise CheckpointError(f"checkpoints store float32 tensors; network dtype is {net.dtype}")
    directory = {}
    chunks = []
    offset = 0
    for name, arr in _tensors(net, optimizer):
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        directory[name] = {"dtype": "float32", "shape": list(np.shape(arr)), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": net.spec.to_dict(),
        "network": {
            "connectivity": net.connectivity,
            "modules": [
                {"blocks": sorted(mod.blocks), "projection": mod.projection is not None} for mod in net.modules
            ],
        },
        "position": state.to_dict() if state is not None else None,
        "rng": {"seed": state.seed, "counter": state.global_step} if state is not None else None,
        "optimizer": (
            {"momentum": optimizer.momentum, "weight_decay": optimizer.weight_decay} if optimizer is not None else None
        ),
        "schedule": json.loads(schedule.to_json()) if schedule is not None else None,
        "dataset": dataset,
        "tensors": directory,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + payload


def save_checkpoint(path, net, state=None, optimizer=None, schedule=None, dataset=None):
    data = encode_checkpoint(net, state, optimizer, schedule, dataset)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def read_header(raw):
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    start = len(MAGIC) + _LEN.size
    if len(raw) < start:
        raise CheckpointError("truncated checkpoint header")
    (n,) = _LEN.unpack_from(raw, len(MAGIC))
    try:
        header = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {header.get('format_version')!r} (expected {FORMAT_VERSION})"
        )
    return header, raw[start + n:]


def decode_checkpoint(raw):
    header, payload = read_header(raw)
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("checksum mismatch: payload is corrupt")

    spec = ArchSpec.from_dict(header["arch"])
    net = build_network(spec)
    for mod, info in zip(net.modules, header["network"]["modules"]):
        keep = set(info["blocks"])
        for j in list(mod.blocks):
            if j not in keep:
                del mod.blocks[j]
                del mod.gates[j]
        if not info["projection"]:
            mod.projection = None

    def fetch(name, shape):
        entry = header["tensors"].get(name)
        if entry is None:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint")
        if tuple(entry["shape"]) != tuple(shape):
            raise CheckpointError(f"tensor {name!r} has shape {entry['shape']}, expected {list(shape)}")
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(payload, dtype=_DTYPE, count=count, offset=entry["offset"]).reshape(shape)

    for name, p in net.named_parameters():
        p.data[...] = fetch("param/" + name, p.shape)
    for name, b in net.named_buffers():
        b[...] = fetch("buffer/" + name, b.shape)
    for (i, j), gs in net.gate_states():
        gs.real_gates = fetch(f"gate/m{i}.b{j}.real", gs.real_gates.shape).astype(np.float32)
        gs.binary_gates = fetch(f"gate/m{i}.b{j}.binary", gs.binary_gates.shape).astype(np.int8)
    net.set_connectivity(header["network"]["connectivity"])

    optimizer = None
    if header["optimizer"] is not None:
        optimizer = OptimizerState(header["optimizer"]["momentum"], header["optimizer"]["weight_decay"])
        for name, entry in header["tensors"].items():
            if name.startswith("momentum/"):
                optimizer.buffers[name[len("momentum/"):]] = fetch(name, tuple(entry["shape"])).copy()
    state = TrainingState.from_dict(header["position"]) if header["position"] is not None else None
    schedule = TrainSchedule.from_json(json.dumps(header["schedule"])) if header["schedule"] is not None else None
    return Checkpoint(net, state, optimizer, schedule, header["dataset"], header)


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode_checkpoint(raw)
