"""Named parameter collections and the binary checkpoint container."""

from __future__ import annotations

import hashlib
import json
import struct
from collections.abc import Iterator, Mapping
from pathlib import Path

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"TIDCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def derive_seed(seed: int, component: str) -> int:
    """Stable per-component seed from a master seed (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(f"{seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


class ParameterSet:
    """Ordered mapping of parameter name to :class:`Tensor`.

    Frozen entries are stored like any other but are excluded from
    :meth:`trainable` and never require gradients.
    """

    def __init__(self, seed: int = 0, version: str = "init"):
        self.seed = seed
        self.version = version
        self._entries: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value))
        t.requires_grad = trainable
        t.name = name
        self._entries[name] = t
        if not trainable:
            self._frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._entries if n.startswith(prefix)]

    def trainable(self) -> list[str]:
        return [n for n in self._entries if n not in self._frozen]

    def freeze(self, prefix: str):
        for n in self.names(prefix):
            self._frozen.add(n)
            self._entries[n].requires_grad = False

    def unfreeze(self, prefix: str):
        for n in self.names(prefix):
            self._frozen.discard(n)
            self._entries[n].requires_grad = True

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def grads(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Gradients currently held by trainable entries (entries without one are omitted)."""
        return {
            n: t.grad
            for n, t in self._entries.items()
            if n.startswith(prefix) and n not in self._frozen and t.grad is not None
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._entries.items()}

    def num_values(self) -> int:
        return int(sum(t.data.size for t in self._entries.values()))

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "", strict: bool = True):
        """Overwrite values in place from ``arrays`` (names restricted to ``prefix``)."""
        for name in self.names(prefix):
            if name not in arrays:
                if strict:
                    raise CheckpointError(f"checkpoint lacks parameter {name!r}")
                continue
            src = np.asarray(arrays[name])
            if src.shape != self._entries[name].shape:
                raise CheckpointError(
                    f"parameter {name!r}: checkpoint shape {src.shape} != model shape {self._entries[name].shape}"
                )
            self._entries[name].data = src.astype(self._entries[name].dtype, copy=True)

    def copy_from(self, other: "ParameterSet", prefix: str = ""):
        self.load_arrays(other.arrays(), prefix=prefix)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()[:16]


def save_checkpoint(params: ParameterSet, path, config_hash: str = "", extra: dict | None = None):
    """Write entries as (name, shape, dtype, little-endian bytes) with a JSON header."""
    entries = []
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str.lstrip("<>=|"),
                "offset": offset,
                "nbytes": len(raw),
                "frozen": params.is_frozen(name),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "version": params.version,
        "seed": params.seed,
        "config_hash": config_hash,
        "entries": entries,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, name -> array)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (head_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    header = json.loads(blob[pos : pos + head_len])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    data_start = pos + head_len
    arrays = {}
    for e in header["entries"]:
        start = data_start + e["offset"]
        dtype = np.dtype("<" + e["dtype"])
        arr = np.frombuffer(blob[start : start + e["nbytes"]], dtype=dtype).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dtype.newbyteorder("="))
    return header, arrays


def load_checkpoint(params: ParameterSet, path, prefix: str = "", strict: bool = True) -> dict:
    header, arrays = read_checkpoint(path)
    params.load_arrays(arrays, prefix=prefix, strict=strict)
    params.version = header.get("version", params.version)
    return header
