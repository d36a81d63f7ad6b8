"""Binary checkpoint format.

Layout (little-endian)::

    b"TRNC" | u32 version | u32 entry_count
    entry: u32 name_len | name (UTF-8) | u8 rank | rank * u64 extents | float32 payload

Model parameters and batch-norm buffers are stored under their dotted names.
Metadata lives under reserved names: ``__config__`` and ``__rng__`` hold UTF-8
text packed into the float32 words bit-for-bit, ``__epoch__``/``__step__`` hold
a u32 the same way, and ``__optim__/<param>`` holds SGD momentum buffers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config, serialize_config

MAGIC = b"TRNC"
VERSION = 1
OPTIM_PREFIX = "__optim__/"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    state: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng_state: dict | None = None


def _text_words(text: str) -> np.ndarray:
    raw = text.encode("utf-8")
    raw += b"\x00" * (-len(raw) % 4)
    return np.frombuffer(raw, dtype="<u4").view("<f4")


def _words_text(arr: np.ndarray) -> str:
    return arr.astype("<f4", copy=False).view("<u4").tobytes().rstrip(b"\x00").decode("utf-8")


def _u32_word(value: int) -> np.ndarray:
    return np.array([value], dtype="<u4").view("<f4")


def save_checkpoint(
    path,
    model,
    config: RunConfig,
    optimizer=None,
    epoch: int = 0,
    step: int = 0,
    rng: np.random.Generator | None = None,
) -> None:
    entries: list[tuple[str, np.ndarray]] = [
        ("__config__", _text_words(serialize_config(config))),
        ("__epoch__", _u32_word(epoch)),
        ("__step__", _u32_word(step)),
    ]
    if rng is not None:
        entries.append(("__rng__", _text_words(json.dumps(rng.bit_generator.state))))
    for name, arr in model.state_dict().items():
        entries.append((name, np.asarray(arr)))
    if optimizer is not None:
        for name, buf in optimizer.named_buffers():
            entries.append((OPTIM_PREFIX + name, buf))

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            if arr.dtype == np.dtype("<f4"):
                payload = np.ascontiguousarray(arr)
            else:
                payload = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(payload.tobytes())


def read_entries(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}Q", data, off) if rank else ()
            off += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
            off += 4 * n
            out[name] = arr
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return out


def load_checkpoint(path) -> Checkpoint:
    entries = read_entries(path)
    try:
        config = parse_config(_words_text(entries.pop("__config__")))
        epoch = int(entries.pop("__epoch__").view("<u4")[0])
        step = int(entries.pop("__step__").view("<u4")[0])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing metadata entry {exc}") from None
    rng_state = None
    if "__rng__" in entries:
        rng_state = json.loads(_words_text(entries.pop("__rng__")))
    momentum = {k[len(OPTIM_PREFIX) :]: v for k, v in entries.items() if k.startswith(OPTIM_PREFIX)}
    state = {k: v for k, v in entries.items() if not k.startswith(OPTIM_PREFIX)}
    return Checkpoint(config, state, momentum, epoch, step, rng_state)


def restore_model(ckpt: Checkpoint, dtype=None):
    from .model import GraftNet

    model = GraftNet(ckpt.config.model, dtype=dtype or np.float32)
    model.load_state_dict(ckpt.state)
    return model
