"""
Unit tests for the NFCS tensor checkpoint format.

Tests:
-----
- Round trip of float32/float64 tensors
- Deterministic encoding
- Rejection of foreign, truncated and unsupported payloads
"""

import numpy as np
import pytest

from decoder_search.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    decode_tensors,
    encode_tensors,
    load_tensors,
    save_tensors,
)
from decoder_search.errors import CheckpointError


@pytest.mark.unit
class TestCheckpoint:
    """Test checkpoint encoding."""

    def test_round_trip(self, temp_output_dir, rng):
        """Test tensors survive save and load bit for bit."""
        tensors = {
            "fpn.bb1.op1.dw.weight": rng.standard_normal((4, 1, 3, 3)).astype(np.float32),
            "head.cls.bias": rng.standard_normal(3),
            "scalar": np.array(1.5),
        }
        path = save_tensors(temp_output_dir / "params.nfcs", tensors)
        loaded = load_tensors(path)
        assert set(loaded) == set(tensors)
        for name, value in tensors.items():
            assert loaded[name].dtype == value.dtype
            np.testing.assert_array_equal(loaded[name], value)

    def test_encoding_is_order_independent(self):
        """Test insertion order does not change the bytes."""
        a = {"x": np.zeros(2), "y": np.ones(3)}
        b = {"y": np.ones(3), "x": np.zeros(2)}
        assert encode_tensors(a) == encode_tensors(b)

    def test_header(self):
        """Test payload starts with magic bytes."""
        assert encode_tensors({}).startswith(MAGIC)

    def test_bad_magic(self):
        """Test foreign files are rejected."""
        with pytest.raises(CheckpointError, match="magic"):
            decode_tensors(b"PK\x03\x04" + b"\x00" * 20)

    def test_unsupported_version(self):
        """Test other format versions are rejected."""
        payload = encode_tensors({"x": np.zeros(1)}, version=FORMAT_VERSION + 1)
        with pytest.raises(CheckpointError, match="version"):
            decode_tensors(payload)

    def test_truncated_payload(self):
        """Test a cut-off file is an error, not a short tensor."""
        payload = encode_tensors({"x": np.arange(10.0)})
        with pytest.raises(CheckpointError):
            decode_tensors(payload[:-8])

    def test_unsupported_dtype(self):
        """Test integer tensors cannot be stored."""
        with pytest.raises(CheckpointError):
            encode_tensors({"x": np.arange(3)})

    def test_missing_file(self, temp_output_dir):
        """Test loading a missing checkpoint."""
        with pytest.raises(CheckpointError):
            load_tensors(temp_output_dir / "missing.nfcs")
