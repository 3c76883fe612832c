"""Minimal reader/writer for the safetensors checkpoint format.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON
header mapping tensor names to {dtype, shape, data_offsets} (offsets
relative to the first byte after the header, end exclusive) plus an
optional "__metadata__" string map, then the raw tensor data. Only the
subset needed for streaming tensor-by-tensor arithmetic is implemented;
tensors are never materialized whole unless asked for.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping

# dtype -> (array typecode or None when unsupported for arithmetic, itemsize)
DTYPES: dict[str, tuple[str | None, int]] = {
    "F64": ("d", 8),
    "F32": ("f", 4),
    "F16": (None, 2),
    "BF16": (None, 2),
    "I64": ("q", 8),
    "I32": ("i", 4),
    "I16": ("h", 2),
    "I8": ("b", 1),
    "U8": ("B", 1),
    "BOOL": ("B", 1),
}

_HEADER_LEN = struct.Struct("<Q")
_MAX_HEADER_BYTES = 100 * 1024 * 1024


class FormatError(ValueError):
    """The file does not follow the checkpoint layout."""


@dataclass(frozen=True)
class TensorInfo:
    """One tensor's entry in the header."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    def __post_init__(self) -> None:
        if self.dtype not in DTYPES:
            raise FormatError(f"tensor {self.name!r}: unknown dtype {self.dtype!r}")
        if any(d < 0 for d in self.shape):
            raise FormatError(f"tensor {self.name!r}: negative dimension")
        start, end = self.data_offsets
        if not 0 <= start <= end:
            raise FormatError(f"tensor {self.name!r}: invalid data offsets")
        if end - start != self.n_bytes:
            raise FormatError(
                f"tensor {self.name!r}: offsets span {end - start} bytes but "
                f"dtype/shape imply {self.n_bytes}"
            )
        object.__setattr__(self, "shape", tuple(self.shape))
        object.__setattr__(self, "data_offsets", tuple(self.data_offsets))

    @property
    def n_elements(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def itemsize(self) -> int:
        return DTYPES[self.dtype][1]

    @property
    def n_bytes(self) -> int:
        return self.n_elements * self.itemsize


def _parse_header(raw: bytes) -> tuple[dict[str, TensorInfo], dict[str, str]]:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    metadata: dict[str, str] = {}
    tensors: dict[str, TensorInfo] = {}
    for name, entry in header.items():
        if name == "__metadata__":
            if not isinstance(entry, dict):
                raise FormatError("__metadata__ must be a string map")
            metadata = {str(k): str(v) for k, v in entry.items()}
            continue
        if not isinstance(entry, Mapping):
            raise FormatError(f"tensor {name!r}: entry must be an object")
        try:
            tensors[name] = TensorInfo(
                name=name,
                dtype=entry["dtype"],
                shape=tuple(entry["shape"]),
                data_offsets=tuple(entry["data_offsets"]),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"tensor {name!r}: malformed header entry") from exc
    return tensors, metadata


class SafetensorsReader:
    """Random-access reader; keeps the file handle open until closed."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh: IO[bytes] = open(self.path, "rb")
        try:
            prefix = self._fh.read(_HEADER_LEN.size)
            if len(prefix) != _HEADER_LEN.size:
                raise FormatError("file too short for a header length")
            (header_len,) = _HEADER_LEN.unpack(prefix)
            if header_len > _MAX_HEADER_BYTES:
                raise FormatError(f"unreasonable header length {header_len}")
            raw = self._fh.read(header_len)
            if len(raw) != header_len:
                raise FormatError("file truncated inside the header")
            self.tensors, self.metadata = _parse_header(raw)
            self._data_start = _HEADER_LEN.size + header_len
            data_size = self.path.stat().st_size - self._data_start
            for info in self.tensors.values():
                if info.data_offsets[1] > data_size:
                    raise FormatError(
                        f"tensor {info.name!r} extends past the end of the file"
                    )
        except Exception:
            self._fh.close()
            raise

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "SafetensorsReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def read(self, name: str) -> bytes:
        info = self.tensors[name]
        self._fh.seek(self._data_start + info.data_offsets[0])
        return self._fh.read(info.n_bytes)

    def iter_chunks(self, name: str, chunk_bytes: int) -> Iterator[bytes]:
        """Yield the tensor's bytes in chunks of at most ``chunk_bytes``."""
        if chunk_bytes < 1:
            raise ValueError("chunk_bytes must be positive")
        info = self.tensors[name]
        remaining = info.n_bytes
        offset = self._data_start + info.data_offsets[0]
        while remaining > 0:
            self._fh.seek(offset)
            take = min(chunk_bytes, remaining)
            chunk = self._fh.read(take)
            if len(chunk) != take:
                raise FormatError(f"tensor {name!r}: file truncated in data")
            yield chunk
            offset += take
            remaining -= take


def write_safetensors(
    path: str | Path,
    tensors: Iterable[tuple[str, str, tuple[int, ...], Iterable[bytes] | bytes]],
    metadata: Mapping[str, str] | None = None,
) -> dict:
    """Stream tensors to a checkpoint file.

    ``tensors`` yields (name, dtype, shape, data) with data either bytes
    or an iterable of byte chunks totalling exactly the implied size.
    Entries are written sorted by name so output bytes are deterministic
    for the same content. Returns {"tensors": n, "data_bytes": total}.
    """
    entries = sorted(tensors, key=lambda e: e[0])
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    infos: list[TensorInfo] = []
    for name, dtype, shape, _ in entries:
        if name in header:
            raise ValueError(f"duplicate tensor name {name!r}")
        if dtype not in DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype {dtype!r}")
        n_bytes = DTYPES[dtype][1]
        for dim in shape:
            n_bytes *= dim
        info = TensorInfo(name=name, dtype=dtype, shape=tuple(shape),
                          data_offsets=(offset, offset + n_bytes))
        infos.append(info)
        header[name] = {
            "dtype": info.dtype,
            "shape": list(info.shape),
            "data_offsets": list(info.data_offsets),
        }
        offset = info.data_offsets[1]

    raw_header = json.dumps(header, sort_keys=True,
                            separators=(",", ":")).encode("utf-8")
    # pad with spaces so the data section starts 8-byte aligned
    padding = (-(_HEADER_LEN.size + len(raw_header))) % 8
    raw_header += b" " * padding

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "wb") as fh:
        fh.write(_HEADER_LEN.pack(len(raw_header)))
        fh.write(raw_header)
        for info, (_, _, _, data) in zip(infos, entries):
            written = 0
            chunks = [data] if isinstance(data, (bytes, bytearray)) else data
            for chunk in chunks:
                fh.write(chunk)
                written += len(chunk)
            if written != info.n_bytes:
                raise ValueError(
                    f"tensor {info.name!r}: got {written} data bytes, "
                    f"expected {info.n_bytes}"
                )
    return {"tensors": len(infos), "data_bytes": offset}
