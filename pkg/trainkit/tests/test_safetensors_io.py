"""Checkpoint file format: round-trips, validation, streaming reads."""

import json
import struct
from array import array

import pytest

from trainkit.safetensors_io import (
    DTYPES,
    FormatError,
    SafetensorsReader,
    TensorInfo,
    write_safetensors,
)


def f32(values) -> bytes:
    return array("f", values).tobytes()


def write_checkpoint(path, tensors, metadata=None):
    """tensors: {name: (dtype, shape, values list)}"""
    entries = []
    for name, (dtype, shape, values) in tensors.items():
        typecode = DTYPES[dtype][0]
        entries.append((name, dtype, tuple(shape), array(typecode, values).tobytes()))
    return write_safetensors(path, entries, metadata=metadata)


class TestTensorInfo:
    def test_size_coherence_enforced(self):
        with pytest.raises(FormatError, match="offsets span"):
            TensorInfo(name="w", dtype="F32", shape=(2, 2), data_offsets=(0, 15))

    def test_scalar_has_one_element(self):
        info = TensorInfo(name="s", dtype="F64", shape=(), data_offsets=(0, 8))
        assert info.n_elements == 1
        assert info.n_bytes == 8

    def test_unknown_dtype_rejected(self):
        with pytest.raises(FormatError, match="unknown dtype"):
            TensorInfo(name="w", dtype="F8", shape=(1,), data_offsets=(0, 1))

    def test_negative_dimension_rejected(self):
        with pytest.raises(FormatError, match="negative"):
            TensorInfo(name="w", dtype="F32", shape=(-1,), data_offsets=(0, 4))


class TestRoundTrip:
    def test_values_and_shapes_survive(self, tmp_path):
        path = tmp_path / "ckpt.safetensors"
        summary = write_checkpoint(path, {
            "layer.weight": ("F32", (2, 3), [1, 2, 3, 4, 5, 6]),
            "layer.bias": ("F64", (3,), [0.5, -0.5, 0.0]),
            "step": ("I64", (), [42]),
        })
        assert summary == {"tensors": 3, "data_bytes": 24 + 24 + 8}
        with SafetensorsReader(path) as reader:
            assert reader.names() == ["layer.bias", "layer.weight", "step"]
            weight = reader.tensors["layer.weight"]
            assert weight.dtype == "F32"
            assert weight.shape == (2, 3)
            assert list(array("f", reader.read("layer.weight"))) == [1, 2, 3, 4, 5, 6]
            assert list(array("d", reader.read("layer.bias"))) == [0.5, -0.5, 0.0]
            assert list(array("q", reader.read("step"))) == [42]

    def test_metadata_round_trip(self, tmp_path):
        path = tmp_path / "m.safetensors"
        write_checkpoint(path, {"w": ("F32", (1,), [1.0])},
                         metadata={"origin": "unit-test"})
        with SafetensorsReader(path) as reader:
            assert reader.metadata == {"origin": "unit-test"}

    def test_zero_element_tensor(self, tmp_path):
        path = tmp_path / "z.safetensors"
        write_checkpoint(path, {"empty": ("F32", (0, 4), [])})
        with SafetensorsReader(path) as reader:
            assert reader.read("empty") == b""

    def test_chunked_data_accepted(self, tmp_path):
        path = tmp_path / "c.safetensors"
        chunks = iter([f32([1.0]), f32([2.0, 3.0])])
        write_safetensors(path, [("w", "F32", (3,), chunks)])
        with SafetensorsReader(path) as reader:
            assert list(array("f", reader.read("w"))) == [1.0, 2.0, 3.0]

    def test_deterministic_bytes_regardless_of_entry_order(self, tmp_path):
        a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
        first = [("w1", "F32", (2,), f32([1, 2])), ("w0", "F32", (1,), f32([3]))]
        write_safetensors(a, first)
        write_safetensors(b, list(reversed(first)))
        assert a.read_bytes() == b.read_bytes()

    def test_data_section_is_8_byte_aligned(self, tmp_path):
        path = tmp_path / "a.safetensors"
        write_checkpoint(path, {"w": ("F32", (1,), [1.0])})
        raw = path.read_bytes()
        (header_len,) = struct.unpack("<Q", raw[:8])
        assert (8 + header_len) % 8 == 0
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
        assert header["w"]["data_offsets"] == [0, 4]


class TestWriterValidation:
    def test_duplicate_name_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="duplicate"):
            write_safetensors(tmp_path / "d.safetensors", [
                ("w", "F32", (1,), f32([1.0])),
                ("w", "F32", (1,), f32([2.0])),
            ])

    def test_wrong_data_size_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="expected"):
            write_safetensors(tmp_path / "s.safetensors",
                              [("w", "F32", (4,), f32([1.0]))])

    def test_unknown_dtype_rejected(self, tmp_path):
        with pytest.raises(FormatError, match="unknown dtype"):
            write_safetensors(tmp_path / "u.safetensors",
                              [("w", "F99", (1,), b"\x00")])


class TestReaderValidation:
    def test_file_too_short_for_header_length(self, tmp_path):
        path = tmp_path / "short.safetensors"
        path.write_bytes(b"\x01\x02")
        with pytest.raises(FormatError, match="too short"):
            SafetensorsReader(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "trunc.safetensors"
        path.write_bytes(struct.pack("<Q", 100) + b"{}")
        with pytest.raises(FormatError, match="truncated inside the header"):
            SafetensorsReader(path)

    def test_header_not_json(self, tmp_path):
        path = tmp_path / "bad.safetensors"
        blob = b"not json"
        path.write_bytes(struct.pack("<Q", len(blob)) + blob)
        with pytest.raises(FormatError, match="not valid JSON"):
            SafetensorsReader(path)

    def test_unreasonable_header_length(self, tmp_path):
        path = tmp_path / "huge.safetensors"
        path.write_bytes(struct.pack("<Q", 1 << 40))
        with pytest.raises(FormatError, match="unreasonable"):
            SafetensorsReader(path)

    def test_tensor_extending_past_eof(self, tmp_path):
        path = tmp_path / "eof.safetensors"
        header = json.dumps(
            {"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}
        ).encode("utf-8")
        path.write_bytes(struct.pack("<Q", len(header)) + header + b"\x00" * 4)
        with pytest.raises(FormatError, match="extends past the end"):
            SafetensorsReader(path)

    def test_truncated_data_rejected_at_open(self, tmp_path):
        path = tmp_path / "ok.safetensors"
        write_checkpoint(path, {"w": ("F32", (4,), [1, 2, 3, 4])})
        raw = path.read_bytes()
        path.write_bytes(raw[:-6])
        with pytest.raises(FormatError, match="extends past"):
            SafetensorsReader(path)


class TestIterChunks:
    def test_chunks_reassemble_exactly(self, tmp_path):
        path = tmp_path / "c.safetensors"
        values = list(range(100))
        write_checkpoint(path, {"w": ("F32", (100,), values)})
        with SafetensorsReader(path) as reader:
            chunks = list(reader.iter_chunks("w", 48))
            assert [len(c) for c in chunks] == [48, 48, 48, 48, 48, 48, 48, 48, 16]
            assert b"".join(chunks) == reader.read("w")

    def test_chunk_size_must_be_positive(self, tmp_path):
        path = tmp_path / "c.safetensors"
        write_checkpoint(path, {"w": ("F32", (1,), [1.0])})
        with SafetensorsReader(path) as reader:
            with pytest.raises(ValueError, match="positive"):
                list(reader.iter_chunks("w", 0))
