"""Linear checkpoint merging over safetensors files.

Every shared tensor becomes (w_a * A + w_b * B) / (w_a + w_b),
computed streaming in fixed-size chunks so full checkpoints never sit
in memory. Tensors listed in an insertable-layer manifest may be
missing from either input and are treated as zero-initialized there;
any other asymmetry between the two checkpoints is an error.
"""

from __future__ import annotations

import json
from array import array
from pathlib import Path
from typing import Iterator, Mapping

from .safetensors_io import DTYPES, SafetensorsReader, write_safetensors

_DEFAULT_CHUNK_BYTES = 1 << 20


class ShapeMismatch(ValueError):
    """The two checkpoints disagree about a tensor; names the tensor."""

    def __init__(self, tensor: str, reason: str):
        self.tensor = tensor
        super().__init__(f"tensor {tensor!r}: {reason}")


def load_insert_manifest(path: str | Path) -> dict[str, tuple[int, ...]]:
    """Read an insertable-layer manifest: {tensor name: shape list}."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError("insert manifest must be a JSON object")
    manifest: dict[str, tuple[int, ...]] = {}
    for name, shape in raw.items():
        if (not isinstance(shape, list)
                or any(not isinstance(d, int) or d < 0 for d in shape)):
            raise ValueError(
                f"insert manifest entry {name!r} must map to a shape list")
        manifest[name] = tuple(shape)
    return manifest


def _plan_tensor(
    name: str,
    a: SafetensorsReader,
    b: SafetensorsReader,
    insertable: Mapping[str, tuple[int, ...]],
) -> tuple[str, tuple[int, ...]]:
    """Agree on (dtype, shape) for one tensor, or raise ShapeMismatch."""
    in_a, in_b = name in a.tensors, name in b.tensors
    if not (in_a and in_b) and name not in insertable:
        missing_from = "second" if in_a else "first"
        raise ShapeMismatch(
            name, f"missing from the {missing_from} checkpoint and not listed "
                  "in the insertable-layer manifest")
    infos = [r.tensors[name] for r, present in ((a, in_a), (b, in_b)) if present]
    if len(infos) == 2 and infos[0].shape != infos[1].shape:
        raise ShapeMismatch(
            name, f"shape {infos[0].shape} != {infos[1].shape}")
    if len(infos) == 2 and infos[0].dtype != infos[1].dtype:
        raise ShapeMismatch(
            name, f"dtype {infos[0].dtype} != {infos[1].dtype}")
    if infos:
        dtype, shape = infos[0].dtype, infos[0].shape
    else:  # listed as insertable and absent from both: all-zero output
        dtype, shape = "F32", insertable[name]
    if name in insertable and infos and insertable[name] != shape:
        raise ShapeMismatch(
            name, f"checkpoint shape {shape} != manifest shape "
                  f"{insertable[name]}")
    if dtype not in ("F32", "F64"):
        raise ValueError(
            f"tensor {name!r}: dtype {dtype} does not support linear merging")
    return dtype, shape


def _chunk_source(reader: SafetensorsReader, name: str, n_bytes: int,
                  chunk_bytes: int) -> Iterator[bytes]:
    if name in reader.tensors:
        yield from reader.iter_chunks(name, chunk_bytes)
        return
    remaining = n_bytes
    while remaining > 0:
        take = min(chunk_bytes, remaining)
        yield bytes(take)
        remaining -= take


def _merged_chunks(
    source_a: Iterator[bytes],
    source_b: Iterator[bytes],
    typecode: str,
    w_a: float,
    w_b: float,
) -> Iterator[bytes]:
    denominator = w_a + w_b
    for chunk_a, chunk_b in zip(source_a, source_b, strict=True):
        values_a = array(typecode, chunk_a)
        values_b = array(typecode, chunk_b)
        merged = array(typecode,
                       ((w_a * x + w_b * y) / denominator
                        for x, y in zip(values_a, values_b, strict=True)))
        yield merged.tobytes()


def linear_merge(
    checkpoint_a: str | Path,
    checkpoint_b: str | Path,
    output: str | Path,
    weights: tuple[float, float] = (1.0, 1.0),
    insert_manifest: str | Path | Mapping[str, tuple[int, ...]] | None = None,
    chunk_bytes: int = _DEFAULT_CHUNK_BYTES,
) -> dict:
    """Merge two checkpoints into ``output``; returns a summary dict."""
    w_a, w_b = float(weights[0]), float(weights[1])
    if w_a + w_b == 0.0:
        raise ValueError("weight sum must be nonzero")
    if insert_manifest is None:
        insertable: Mapping[str, tuple[int, ...]] = {}
    elif isinstance(insert_manifest, (str, Path)):
        insertable = load_insert_manifest(insert_manifest)
    else:
        insertable = {name: tuple(shape)
                      for name, shape in insert_manifest.items()}

    with SafetensorsReader(checkpoint_a) as a, \
            SafetensorsReader(checkpoint_b) as b:
        names = sorted(set(a.tensors) | set(b.tensors) | set(insertable))
        planned = {name: _plan_tensor(name, a, b, insertable)
                   for name in names}

        def entries():
            for name in names:
                dtype, shape = planned[name]
                typecode, itemsize = DTYPES[dtype]
                n_bytes = itemsize
                for d in shape:
                    n_bytes *= d
                yield (
                    name, dtype, shape,
                    _merged_chunks(
                        _chunk_source(a, name, n_bytes, chunk_bytes),
                        _chunk_source(b, name, n_bytes, chunk_bytes),
                        typecode, w_a, w_b,
                    ),
                )

        written = write_safetensors(
            output, entries(),
            metadata={"merge_weights": f"{w_a},{w_b}"},
        )

    inserted_a = sorted(n for n in insertable if n not in a.tensors)
    inserted_b = sorted(n for n in insertable if n not in b.tensors)
    return {
        **written,
        "weights": [w_a, w_b],
        "zero_initialized_in_first": inserted_a,
        "zero_initialized_in_second": inserted_b,
        "output": str(output),
    }
