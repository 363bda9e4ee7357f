"""Binary checkpoint format.

Layout::

    b"PMT1" | u32 version | u32 header length | UTF-8 JSON header | tensor data

The header lists tensors in storage order; data is row-major little-endian
float32. Optimizer moments, when present, follow the parameters under the
names ``adam.m/<param>`` and ``adam.v/<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..temporal import EncodingSpec
from .config import ModelConfig
from .model import PMTModel
from .optim import AdamState

MAGIC = b"PMT1"
VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    encoding: EncodingSpec
    params: dict
    optimizer: AdamState | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: PMTModel, optimizer: AdamState | None = None,
                   **metadata) -> "Checkpoint":
        return cls(model.config, model.encoding,
                   {k: np.array(v, dtype=np.float32) for k, v in model.params.items()},
                   optimizer, dict(metadata))

    def to_model(self, dtype=np.float32) -> PMTModel:
        return PMTModel(self.model_config, self.encoding, self.params, dtype=dtype)

    # -- serialization ---------------------------------------------------------
    def _tensors(self) -> list[tuple[str, np.ndarray]]:
        items = list(self.params.items())
        if self.optimizer is not None:
            items += [(f"adam.m/{k}", v) for k, v in self.optimizer.m.items()]
            items += [(f"adam.v/{k}", v) for k, v in self.optimizer.v.items()]
        names = [n for n, _ in items]
        if len(set(names)) != len(names):
            raise CheckpointError("tensor names must be unique")
        return items

    def to_bytes(self) -> bytes:
        tensors = self._tensors()
        header = {
            "model_config": self.model_config.to_dict(),
            "encoding": self.encoding.to_dict(),
            "metadata": self.metadata,
            "optimizer_step": None if self.optimizer is None else self.optimizer.step,
            "tensors": [{"name": n, "shape": list(np.shape(a))} for n, a in tensors],
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
        parts += [np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for _, a in tensors]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a PMT checkpoint (bad magic)")
        if len(data) < 12:
            raise CheckpointError("truncated checkpoint header")
        version, head_len = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 12 + head_len
        if offset > len(data):
            raise CheckpointError("truncated checkpoint header")
        try:
            header = json.loads(data[12:offset].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
        params, m, v = {}, {}, {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            nbytes = count * _DTYPE.itemsize
            if offset + nbytes > len(data):
                raise CheckpointError(f"truncated tensor {entry['name']}")
            arr = np.frombuffer(data, dtype=_DTYPE, count=count, offset=offset).reshape(shape)
            arr = arr.astype(np.float32)
            offset += nbytes
            name = entry["name"]
            if name.startswith("adam.m/"):
                m[name[7:]] = arr
            elif name.startswith("adam.v/"):
                v[name[7:]] = arr
            else:
                params[name] = arr
        if offset != len(data):
            raise CheckpointError("trailing bytes after tensor data")
        optimizer = None
        if header["optimizer_step"] is not None:
            optimizer = AdamState(header["optimizer_step"], m, v)
        return cls(ModelConfig.from_dict(header["model_config"]),
                   EncodingSpec(**header["encoding"]), params, optimizer, header["metadata"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def describe(self) -> str:
        lines = [f"model_config: {json.dumps(self.model_config.to_dict(), sort_keys=True)}",
                 f"encoding: {json.dumps(self.encoding.to_dict(), sort_keys=True)}",
                 f"metadata: {json.dumps(self.metadata, sort_keys=True)}",
                 f"optimizer_step: {None if self.optimizer is None else self.optimizer.step}",
                 "tensors:"]
        total = 0
        for name, arr in self._tensors():
            lines.append(f"  {name} {list(arr.shape)}")
            if not name.startswith("adam."):
                total += arr.size
        lines.append(f"parameters: {total}")
        return "\n".join(lines)
