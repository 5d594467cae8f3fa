"""Bit-exact binary checkpoints.

Layout: magic ``FHEDN1\\n``, little-endian u32 version (1), u32 tensor
count; per tensor a u16 name length, the UTF-8 name, a u8 rank, rank u32
dims, then row-major little-endian float32 data; finally a u32 CRC-32
(IEEE) over every preceding byte.

Alongside the parameters and batch-norm running statistics, a ``__meta__``
tensor carries a JSON blob (architecture config text, iteration counter,
training seed) encoded one byte per float, which is exact in float32 and
keeps the container tensors-only.  Values are stored in float32; loading
lifts them back to float64, so a save/load round trip is idempotent after
the first save.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .config import spec_from_config, parse_config_text, spec_to_config_text
from .errors import (
    CheckpointCrcError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .network import Model, build_network

MAGIC = b"FHEDN1\n"
VERSION = 1
META_NAME = "__meta__"


def _named_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    for name, param in model.params.items():
        out.append((name, param.value.data))
    for base, state in model.bn_states.items():
        out.append((f"{base}.running_mean", state.running_mean))
        out.append((f"{base}.running_var", state.running_var))
    meta = {
        "config": spec_to_config_text(model.spec),
        "iteration": model.iteration,
        "rng_seed": model.rng_seed,
    }
    blob = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    out.append((META_NAME, blob.astype(np.float64)))
    return out


def save_checkpoint(model: Model, path) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    tensors = _named_tensors(model)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            chunks.append(struct.pack("<I", d))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"file ends at byte {len(self.blob)}, needed {self.pos + n}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def read_tensors(path) -> dict[str, np.ndarray]:
    """Parse and CRC-verify a checkpoint into name -> float64 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC):
        raise CheckpointTruncatedError("file too short for the magic bytes")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if len(blob) < len(MAGIC) + 8 + 4:
        raise CheckpointTruncatedError("file too short for a header")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    payload = blob[:-4]
    reader = _Reader(payload)
    reader.take(len(MAGIC))
    version = reader.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported version {version}")
    # walk the structure first so truncation is reported as truncation,
    # then verify the CRC so payload corruption is reported as such
    count = reader.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u16()).decode("utf-8", errors="replace")
        ndim = reader.u8()
        dims = tuple(reader.u32() for _ in range(ndim))
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(reader.take(size * 4), dtype="<f4").astype(np.float64)
        tensors[name] = data.reshape(dims)
    if reader.pos != len(payload):
        raise CheckpointFormatError(
            f"{len(payload) - reader.pos} unexpected trailing bytes"
        )
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if actual != stored_crc:
        raise CheckpointCrcError(
            f"crc mismatch: stored {stored_crc:#010x}, computed {actual:#010x}"
        )
    return tensors


def load_checkpoint(path) -> Model:
    """Rebuild the model a checkpoint describes and load its tensors."""
    tensors = read_tensors(path)
    if META_NAME not in tensors:
        raise CheckpointFormatError("checkpoint is missing its meta record")
    meta_bytes = bytes(np.round(tensors.pop(META_NAME)).astype(np.uint8))
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable meta record: {exc}") from None
    spec = spec_from_config(parse_config_text(meta["config"]))
    model = build_network(spec, seed=0)
    model.iteration = int(meta.get("iteration", 0))
    model.rng_seed = meta.get("rng_seed")

    expected = {name for name, _ in _expected_names(model)}
    missing = expected - set(tensors)
    surplus = set(tensors) - expected
    if missing or surplus:
        raise CheckpointFormatError(
            f"tensor names do not match the architecture "
            f"(missing: {sorted(missing)}, surplus: {sorted(surplus)})"
        )
    for name, arr in tensors.items():
        target = _target_array(model, name)
        if target.shape != arr.shape:
            raise CheckpointFormatError(
                f"tensor {name!r} has shape {arr.shape}, expected {target.shape}"
            )
        target[...] = arr
    return model


def _expected_names(model: Model):
    for name, param in model.params.items():
        yield name, param
    for base in model.bn_states:
        yield f"{base}.running_mean", None
        yield f"{base}.running_var", None


def _target_array(model: Model, name: str) -> np.ndarray:
    if name in model.params:
        return model.params[name].value.data
    if name.endswith(".running_mean"):
        return model.bn_states[name[: -len(".running_mean")]].running_mean
    if name.endswith(".running_var"):
        return model.bn_states[name[: -len(".running_var")]].running_var
    raise CheckpointFormatError(f"unrecognized tensor {name!r}")
