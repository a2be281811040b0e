"""Versioned binary checkpoints for training state.

Layout (all integers little-endian)::

    magic      8 bytes  b"MGLABCKP"
    version    u32
    header_len u32
    header     UTF-8 JSON: architecture, step, seed, controller, RNG states,
               and the tensor table [[group, name, shape], ...]
    tensors    float32 LE, concatenated in tensor-table order
    checksum   u64, first 8 bytes of BLAKE2b over everything above
"""
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ChecksumMismatchError, VersionMismatchError
from .network import Arch, Params, param_shapes
from .trainer import AdamState, AutoW, TrainState

MAGIC = b"MGLABCKP"
VERSION = 1
GROUPS = ("online", "ema", "adam_m", "adam_v")


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _group_tensors(state: TrainState) -> dict:
    return {
        "online": state.params.tensors,
        "ema": state.ema.tensors,
        "adam_m": state.adam.m,
        "adam_v": state.adam.v,
    }


def encode_state(state: TrainState, extra: dict | None = None) -> bytes:
    table = []
    blobs = []
    for group, tensors in _group_tensors(state).items():
        for name, arr in tensors.items():
            if arr.dtype != np.float32:
                raise CheckpointError(f"{group}/{name} is {arr.dtype}; checkpoints store float32 only")
            table.append([group, name, list(arr.shape)])
            blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {
        "arch": state.params.arch.to_dict(),
        "step": state.step,
        "seed": state.seed,
        "adam_count": state.adam.count,
        "last_loss": state.last_loss,
        "controller": None if state.controller is None else state.controller.to_dict(),
        "rng": {name: g.bit_generator.state for name, g in state.rngs.items()},
        "tensors": table,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    return body + _checksum(body)


def decode_state(data: bytes) -> tuple[TrainState, dict]:
    if len(data) < len(MAGIC) + 16 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = data[:-8], data[-8:]
    if _checksum(body) != digest:
        raise ChecksumMismatchError("checkpoint checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    off = len(MAGIC) + 8
    header = json.loads(body[off: off + hlen].decode())
    off += hlen
    arch = Arch(**header["arch"])
    shapes = param_shapes(arch)
    groups = {g: {} for g in GROUPS}
    for group, name, shape in header["tensors"]:
        if tuple(shape) != shapes.get(name):
            raise CheckpointError(f"{group}/{name}: shape {shape} does not match architecture")
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape)
        groups[group][name] = arr
        off += 4 * count
    if off != len(body):
        raise CheckpointError("trailing bytes after tensor data")

    rngs = {}
    for name, st in header["rng"].items():
        g = np.random.Generator(np.random.PCG64())
        g.bit_generator.state = st
        rngs[name] = g
    ctrl = header["controller"]
    state = TrainState(
        params=Params(arch, groups["online"]),
        ema=Params(arch, groups["ema"]),
        adam=AdamState(groups["adam_m"], groups["adam_v"], header["adam_count"]),
        step=header["step"],
        seed=header["seed"],
        controller=None if ctrl is None else AutoW(**ctrl),
        rngs=rngs,
        last_loss=header["last_loss"],
    )
    return state, header["extra"]


def save_checkpoint(state: TrainState, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_state(state, extra))


def load_checkpoint(path) -> TrainState:
    return decode_state(Path(path).read_bytes())[0]


def load_checkpoint_with_extra(path) -> tuple[TrainState, dict]:
    return decode_state(Path(path).read_bytes())
