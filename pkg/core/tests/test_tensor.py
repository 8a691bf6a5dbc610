"""
Tests for the Tensor value type and the ASLT/ASLW codecs.
"""

import struct

import numpy as np
import pytest

from core.exceptions import InvalidArgumentError, ShapeMismatchError, TensorFormatError, WeightFileError
from core.tensor import Tensor, default_dtype, precision
from core.tensor_io import (
    decode_named_tensors,
    decode_tensor,
    encode_named_tensors,
    encode_tensor,
    load_tensor,
    save_tensor,
)


# =============================================================================
# Tensor
# =============================================================================

class TestTensor:

    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_buffer_is_read_only(self):
        tensor = Tensor(np.arange(6.0))
        with pytest.raises(ValueError):
            tensor.numpy()[0] = 10.0

    def test_construction_copies_source(self):
        source = np.zeros(3)
        tensor = Tensor(source)
        source[0] = 5.0
        assert tensor.numpy()[0] == 0.0

    def test_reshape_keeps_element_count(self):
        tensor = Tensor(np.arange(12.0)).reshape(3, 4)
        assert tensor.shape == (3, 4)
        assert tensor.size == 12
        np.testing.assert_array_equal(tensor.reshape((2, 6)).numpy().ravel(), np.arange(12.0))

    def test_reshape_to_wrong_count_raises(self):
        with pytest.raises(ShapeMismatchError):
            Tensor(np.arange(6.0)).reshape(4, 2)

    def test_item_requires_single_element(self):
        assert Tensor([[3.5]]).item() == 3.5
        with pytest.raises(ShapeMismatchError):
            Tensor([1.0, 2.0]).item()

    def test_equal_is_bit_exact_and_dtype_aware(self):
        a = Tensor([0.1, 0.2])
        assert a.equal(Tensor([0.1, 0.2]))
        assert not a.equal(Tensor([0.1, 0.2], dtype=np.float64))
        assert not a.equal(Tensor([0.1, 0.2000001]))

    def test_unsupported_dtype_rejected(self):
        with pytest.raises(InvalidArgumentError):
            Tensor([1, 2], dtype=np.int32)

    def test_precision_context_restores_previous_dtype(self):
        with precision("float64"):
            assert default_dtype() == np.float64
            assert Tensor.zeros((2,)).dtype == np.float64
        assert default_dtype() == np.float32

    def test_unknown_precision_rejected(self):
        with pytest.raises(InvalidArgumentError):
            with precision("float16"):
                pass


# =============================================================================
# ASLT
# =============================================================================

class TestAslt:

    def test_header_layout(self):
        blob = encode_tensor(Tensor(np.ones((2, 3)), dtype=np.float64))
        assert blob[:4] == b"ASLT"
        assert struct.unpack_from("<BBB", blob, 4) == (1, 1, 2)
        assert struct.unpack_from("<II", blob, 7) == (2, 3)
        assert len(blob) == 7 + 8 + 6 * 8

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip_is_bit_exact(self, dtype):
        rng = np.random.default_rng(3)
        tensor = Tensor(rng.standard_normal((2, 1, 5, 7)), dtype=dtype)
        decoded, end = decode_tensor(encode_tensor(tensor))
        assert decoded.equal(tensor)
        assert end == len(encode_tensor(tensor))

    def test_scalar_tensor(self):
        tensor = Tensor(2.5)
        decoded, _ = decode_tensor(encode_tensor(tensor))
        assert decoded.shape == ()
        assert decoded.item() == 2.5

    def test_bad_magic(self):
        blob = bytearray(encode_tensor(Tensor([1.0])))
        blob[:4] = b"NOPE"
        with pytest.raises(TensorFormatError):
            decode_tensor(bytes(blob))

    def test_unknown_version_and_dtype(self):
        blob = bytearray(encode_tensor(Tensor([1.0])))
        blob[4] = 2
        with pytest.raises(TensorFormatError):
            decode_tensor(bytes(blob))
        blob[4], blob[5] = 1, 9
        with pytest.raises(TensorFormatError):
            decode_tensor(bytes(blob))

    def test_truncated_payload(self):
        blob = encode_tensor(Tensor(np.ones(10)))
        with pytest.raises(TensorFormatError):
            decode_tensor(blob[:-1])

    def test_file_with_trailing_bytes_rejected(self, tmp_path):
        path = save_tensor(Tensor(np.ones(4)), tmp_path / "x.aslt")
        assert load_tensor(path).equal(Tensor(np.ones(4)))
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(TensorFormatError):
            load_tensor(path)


# =============================================================================
# ASLW
# =============================================================================

class TestAslw:

    def items(self):
        return [("a.weight", Tensor(np.arange(6.0).reshape(2, 3))), ("a.bias", Tensor([0.5, -0.5]))]

    def test_round_trip(self):
        decoded = decode_named_tensors(encode_named_tensors(self.items()))
        assert [name for name, _ in decoded] == ["a.weight", "a.bias"]
        for (_, got), (_, want) in zip(decoded, self.items()):
            assert got.equal(want)

    def test_duplicate_names_rejected_on_write_and_read(self):
        with pytest.raises(WeightFileError):
            encode_named_tensors(self.items() + [("a.bias", Tensor([1.0]))])
        # one record written twice under a header claiming two records
        duplicated = encode_named_tensors([self.items()[0]])[9:]
        header = b"ASLW" + struct.pack("<BI", 1, 2)
        with pytest.raises(WeightFileError):
            decode_named_tensors(header + duplicated + duplicated)

    def test_bad_magic_and_truncation(self):
        blob = encode_named_tensors(self.items())
        with pytest.raises(WeightFileError):
            decode_named_tensors(b"XXXX" + blob[4:])
        with pytest.raises(WeightFileError):
            decode_named_tensors(blob[:-3])
        with pytest.raises(WeightFileError):
            decode_named_tensors(blob + b"\0")
