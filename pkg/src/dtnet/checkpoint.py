"""Single-file checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"DTNETCK\\0"
    version      u32
    spec digest  32 bytes  sha256 of the canonical network spec
    header       u32 length + UTF-8 JSON (spec echo, epoch, seed, optimizer step, train config)
    n_arrays     u32
    n_arrays x:  u16 name length, name, u8 dtype code, u8 ndim, ndim x u64 shape,
                 u64 byte count, raw little-endian data

Array names are prefixed ``param/``, ``buffer/``, ``adam.m/`` or ``adam.v/``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DTNet, NetworkSpec
from .optim import AdamState

__all__ = [
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "SpecMismatchError",
    "TruncatedCheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]

MAGIC = b"DTNETCK\0"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file, or a corrupted one."""


class CheckpointVersionError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    """The checkpoint was written for a different network."""


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    seed: int = 0
    train_config: dict | None = None
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: DTNet, state: AdamState | None = None, epoch: int = 0, seed: int = 0, train_config=None):
        if train_config is not None and dataclasses.is_dataclass(train_config):
            train_config = dataclasses.asdict(train_config)
        state = state if state is not None else AdamState()
        return cls(
            spec=model.spec,
            params={k: p.data.copy() for k, p in model.named_parameters().items()},
            buffers={k: b.copy() for k, b in model.named_buffers().items()},
            adam=AdamState({k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()}, state.step),
            epoch=epoch,
            seed=seed,
            train_config=train_config,
        )

    def build_model(self) -> DTNet:
        model = DTNet(self.spec, self.seed)
        self.restore(model)
        return model

    def restore(self, model: DTNet) -> None:
        """Copy weights into ``model`` after checking it has the same spec."""
        if model.spec.digest() != self.spec.digest():
            raise SpecMismatchError(
                f"checkpoint spec {self.spec.to_dict()} does not match model spec {model.spec.to_dict()}"
            )
        params = model.named_parameters()
        buffers = model.named_buffers()
        if set(params) != set(self.params) or set(buffers) != set(self.buffers):
            raise SpecMismatchError("parameter names differ from the checkpoint")
        for name, p in params.items():
            src = self.params[name]
            if src.shape != p.data.shape:
                raise SpecMismatchError(f"{name}: shape {src.shape} vs {p.data.shape}")
            p.data = src.astype(p.data.dtype, copy=True)
        for name, b in buffers.items():
            b[...] = self.buffers[name]

    def adam_state(self) -> AdamState:
        return AdamState({k: v.copy() for k, v in self.adam.m.items()}, {k: v.copy() for k, v in self.adam.v.items()}, self.adam.step)


def _arrays(ckpt: Checkpoint):
    for prefix, d in (("param/", ckpt.params), ("buffer/", ckpt.buffers), ("adam.m/", ckpt.adam.m), ("adam.v/", ckpt.adam.v)):
        for name in d:
            yield prefix + name, d[name]


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    buf.write(ckpt.spec.digest())
    header = {
        "spec": ckpt.spec.to_dict(),
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "adam_step": ckpt.adam.step,
        "train_config": ckpt.train_config,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    arrays = list(_arrays(ckpt))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, model: DTNet | None = None) -> Checkpoint:
    """Read a checkpoint; when ``model`` is given, verify its spec and restore it."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, this build reads {FORMAT_VERSION}")
    digest = r.take(32)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None
    spec = NetworkSpec.from_dict(header["spec"])
    if spec.digest() != digest:
        raise CheckpointFormatError("header spec does not match its digest")
    if model is not None and model.spec.digest() != digest:
        raise SpecMismatchError(
            f"checkpoint spec {spec.to_dict()} does not match model spec {model.spec.to_dict()}"
        )
    (count,) = r.unpack("<I")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam.m": {}, "adam.v": {}}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code]).reshape(shape).copy()
        prefix, _, key = name.partition("/")
        if prefix not in groups:
            raise CheckpointFormatError(f"unknown array group in {name!r}")
        groups[prefix][key] = arr
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.pos} trailing bytes")
    ckpt = Checkpoint(
        spec=spec,
        params=groups["param"],
        buffers=groups["buffer"],
        adam=AdamState(groups["adam.m"], groups["adam.v"], header["adam_step"]),
        epoch=header["epoch"],
        seed=header["seed"],
        train_config=header.get("train_config"),
        version=version,
    )
    if model is not None:
        ckpt.restore(model)
    return ckpt
