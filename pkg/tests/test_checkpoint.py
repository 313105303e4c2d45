"""Tests for checkpoint save and load."""

import json
import os
import struct
import tempfile

import numpy as np
import pytest
from numpy.testing import assert_allclose

from elattn.checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint, save_checkpoint
from elattn.config import BOS_ID, DECODER_ONLY, ModelConfig
from elattn.errors import (
    BadMagicError,
    CheckpointError,
    CheckpointShapeError,
    ShapeError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from elattn.model import encode, forward, init_model


@pytest.fixture
def temp_dir():
    """Create a temporary directory for checkpoint files."""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield temp_dir


@pytest.fixture(scope="module")
def model():
    """Create a small encoder-decoder model."""
    return init_model(
        ModelConfig(L_enc=1, L=1, d_m=8, h=2, d_ff=16, vocab=9, max_positions=6)
    )


@pytest.fixture
def saved(model, temp_dir):
    """Save the model and return the checkpoint path."""
    path = os.path.join(temp_dir, "model.elat")
    save_checkpoint(model, path)
    return path


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def write_bytes(path, data):
    with open(path, "wb") as f:
        f.write(data)


def split_checkpoint(data):
    """Return (header dict, tensor bytes) of a checkpoint."""
    _, _, header_len = struct.unpack_from("<4sII", data)
    header = json.loads(data[12 : 12 + header_len])
    return header, data[12 + header_len :]


def join_checkpoint(header, body, version=FORMAT_VERSION):
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<4sII", MAGIC, version, len(raw)) + raw + body


class TestCheckpointRoundTrip:
    """Tests for saving and loading checkpoints."""

    def test_tensors_are_bit_identical(self, model, saved):
        """Test that every tensor survives a save and load unchanged."""
        loaded = load_checkpoint(saved)
        assert loaded.config.to_dict() == model.config.to_dict()
        original = dict(model.named_tensors())
        for name, tensor in loaded.named_tensors():
            assert np.array_equal(tensor, original[name]), name

    def test_save_load_save_is_byte_identical(self, saved, temp_dir):
        """Test that re-saving a loaded checkpoint reproduces the file."""
        again = os.path.join(temp_dir, "again.elat")
        save_checkpoint(load_checkpoint(saved), again)
        assert read_bytes(saved) == read_bytes(again)

    def test_loaded_model_gives_same_logits(self, model, saved):
        """Test the logits of the loaded model on a fixed input."""
        loaded = load_checkpoint(saved)
        expected = forward(model, [BOS_ID, 4], memory=encode(model, [3, 5])).logits
        actual = forward(loaded, [BOS_ID, 4], memory=encode(loaded, [3, 5])).logits
        assert_allclose(actual, expected, rtol=0, atol=0)

    def test_decoder_only_round_trip(self, temp_dir):
        """Test a decoder-only model, which has no encoder tensors."""
        model = init_model(
            ModelConfig(architecture=DECODER_ONLY, L=1, d_m=8, h=2, d_ff=8, vocab=5)
        )
        path = os.path.join(temp_dir, "nested", "dec.elat")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.encoder_layers == ()
        assert np.array_equal(loaded.token_embedding, model.token_embedding)

    def test_preamble(self, saved):
        """Test the magic bytes and the version field."""
        data = read_bytes(saved)
        assert data[:4] == b"ELAT"
        assert struct.unpack_from("<I", data, 4)[0] == 1

    def test_header_lists_every_tensor(self, model, saved):
        """Test the tensor manifest in the header."""
        header, body = split_checkpoint(read_bytes(saved))
        names = [entry["name"] for entry in header["tensors"]]
        assert names == [name for name, _ in model.named_tensors()]
        assert len(body) == 8 * sum(t.size for _, t in model.named_tensors())


class TestCheckpointErrors:
    """Tests for malformed checkpoint files."""

    def test_bad_magic(self, saved):
        """Test that a file with other magic bytes is rejected."""
        data = read_bytes(saved)
        write_bytes(saved, b"NOPE" + data[4:])
        with pytest.raises(BadMagicError):
            load_checkpoint(saved)

    def test_version_mismatch(self, saved):
        """Test that an unknown format version is rejected."""
        header, body = split_checkpoint(read_bytes(saved))
        write_bytes(saved, join_checkpoint(header, body, version=2))
        with pytest.raises(VersionMismatchError, match="version 2"):
            load_checkpoint(saved)

    def test_truncated_data(self, saved):
        """Test that a file cut inside the tensor data is rejected."""
        data = read_bytes(saved)
        write_bytes(saved, data[:-3])
        with pytest.raises(TruncatedCheckpointError, match="decoder.norm.shift"):
            load_checkpoint(saved)

    def test_truncated_header(self, saved):
        """Test that a file cut inside the header is rejected."""
        write_bytes(saved, read_bytes(saved)[:20])
        with pytest.raises(TruncatedCheckpointError, match="header"):
            load_checkpoint(saved)

    def test_truncated_preamble(self, saved):
        """Test that a file shorter than the preamble is rejected."""
        write_bytes(saved, b"ELAT\x01")
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(saved)

    def test_trailing_bytes(self, saved):
        """Test that bytes after the last tensor are rejected."""
        write_bytes(saved, read_bytes(saved) + b"\x00" * 8)
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(saved)

    def test_shape_mismatch_names_the_tensor(self, saved):
        """Test that a manifest shape disagreeing with the config is reported."""
        header, body = split_checkpoint(read_bytes(saved))
        for entry in header["tensors"]:
            if entry["name"] == "decoder.0.self_attn.wq":
                entry["shape"] = [2, 8, 3]
        write_bytes(saved, join_checkpoint(header, body))
        with pytest.raises(CheckpointShapeError, match="decoder.0.self_attn.wq"):
            load_checkpoint(saved)

    def test_shape_error_is_also_a_shape_error(self):
        """Test the error hierarchy of checkpoint shape errors."""
        assert issubclass(CheckpointShapeError, ShapeError)
        assert issubclass(CheckpointShapeError, CheckpointError)

    def test_invalid_json_header(self, saved):
        """Test that a corrupted header is rejected."""
        _, body = split_checkpoint(read_bytes(saved))
        raw = b"{not json"
        write_bytes(saved, struct.pack("<4sII", MAGIC, 1, len(raw)) + raw + body)
        with pytest.raises(CheckpointError, match="JSON"):
            load_checkpoint(saved)

    def test_invalid_config(self, saved):
        """Test that an invalid config in the header is rejected."""
        header, body = split_checkpoint(read_bytes(saved))
        header["vocab"] = 2
        write_bytes(saved, join_checkpoint(header, body))
        with pytest.raises(CheckpointError, match="invalid config"):
            load_checkpoint(saved)

    def test_missing_file(self, temp_dir):
        """Test that a missing file raises an OS error."""
        with pytest.raises(OSError):
            load_checkpoint(os.path.join(temp_dir, "absent.elat"))
