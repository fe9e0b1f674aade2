"""Named parameter storage and its flat binary serialization.

Binary layout (all integers little-endian)::

    b"RPND" | u32 version | u32 meta_len | meta (utf-8 JSON) | records...
    record := u32 name_len | name (utf-8) | u32 rank | u32 dims[rank] | f64 payload[prod(dims)]
"""

from __future__ import annotations

import json
import struct
from typing import Iterator

import numpy as np

from .autodiff import Tensor, xavier_uniform

MAGIC = b"RPND"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class ParameterStore:
    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._params: dict[str, Tensor] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def tensors(self, prefix: str = "") -> list[Tensor]:
        return [t for n, t in self.items() if n.startswith(prefix)]

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter '{name}' already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def linear(self, name: str, fan_in: int, fan_out: int, bias: bool = True,
               stack: int | None = None) -> None:
        """Register ``name.weight`` (and ``name.bias``), Xavier-uniform / zeros.

        With ``stack=M`` the weight is ``(M, fan_in, fan_out)`` and the bias
        ``(M, 1, fan_out)``: one independent layer per mode.
        """
        wshape = (fan_in, fan_out) if stack is None else (stack, fan_in, fan_out)
        self.add(f"{name}.weight", xavier_uniform(self._rng, fan_in, fan_out, wshape))
        if bias:
            self.add(f"{name}.bias", np.zeros((fan_out,) if stack is None else (stack, 1, fan_out)))

    def layers(self, name: str, n: int) -> list[tuple[Tensor, Tensor]]:
        return [(self[f"{name}.{i}.weight"], self[f"{name}.{i}.bias"]) for i in range(n)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise CheckpointFormatError(
                f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for n, arr in state.items():
            if self._params[n].shape != arr.shape:
                raise CheckpointFormatError(
                    f"parameter '{n}' has shape {arr.shape}, expected {self._params[n].shape}")
            self._params[n].data = np.array(arr, dtype=np.float64)

    def to_bytes(self, meta: dict | None = None) -> bytes:
        return pack(self.state(), meta)

    @classmethod
    def from_bytes(cls, blob: bytes, rng_seed: int = 0) -> "ParameterStore":
        _, state = unpack(blob)
        store = cls(rng_seed)
        for name, arr in state.items():
            store.add(name, arr)
        return store


def read_header(blob: bytes) -> tuple[int, int]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointFormatError("bad magic: file is not an RPND parameter file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"RPND format version {version} is not supported (this build reads version {FORMAT_VERSION})")
    return version, 8


def pack(state: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize named arrays plus a JSON metadata block (keys sorted, so deterministic)."""
    raw = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(raw)) + raw + encode_records(state)


def unpack(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    _, offset = read_header(blob)
    try:
        (meta_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + meta_len > len(blob):
            raise CheckpointFormatError("truncated metadata block")
        meta = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt RPND metadata: {exc}") from None
    state: dict[str, np.ndarray] = {}
    for name, arr in decode_records(blob, offset + meta_len):
        if name in state:
            raise CheckpointFormatError(f"duplicate record '{name}'")
        state[name] = arr
    return meta, state


def encode_records(state: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    for name in sorted(state):
        arr = np.array(state[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def decode_records(blob: bytes, offset: int) -> Iterator[tuple[str, np.ndarray]]:
    n = len(blob)
    try:
        while offset < n:
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if offset + 8 * count > n:
                raise CheckpointFormatError(f"truncated payload for parameter '{name}'")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims)
            offset += 8 * count
            yield name, arr.astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt RPND record stream: {exc}") from None
