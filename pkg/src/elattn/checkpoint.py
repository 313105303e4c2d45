"""Portable checkpoint files.

Layout (all integers little-endian)::

    bytes 0-3    magic b"ELAT"
    bytes 4-7    format version, uint32 (= 1)
    bytes 8-11   header length HL, uint32
    HL bytes     UTF-8 JSON: the ModelConfig fields plus a "tensors" manifest
    rest         every tensor in layout order, float64 row-major, no padding

The header is written with sorted keys and no whitespace so that
save -> load -> save yields identical bytes.
"""

import json
import logging
import os
import struct
from typing import Dict

import numpy as np

from elattn.config import ModelConfig
from elattn.errors import (
    BadMagicError,
    CheckpointError,
    CheckpointShapeError,
    ParameterError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from elattn.model import Model, model_from_tensors, tensor_layout
from elattn.tensor_core import default_dtype

logger = logging.getLogger(__name__)

MAGIC = b"ELAT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")
_VALUE = np.dtype("<f8")


def _header(model: Model) -> bytes:
    header = model.config.to_dict()
    header["tensors"] = [
        {"name": name, "shape": list(t.shape)} for name, t in model.named_tensors()
    ]
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: Model, path: str) -> None:
    """Write ``model`` to ``path``.

    Args:
        model: The model to save
        path: Destination file; parent directories are created
    """
    header = _header(model)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for _, tensor in model.named_tensors():
            f.write(np.ascontiguousarray(tensor, dtype=_VALUE).tobytes())
    logger.info(f"Checkpoint written to {path}")


def _parse_header(raw: bytes) -> Dict:
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint header is not valid JSON: {e}") from e


def load_checkpoint(path: str) -> Model:
    """Read a model written by :func:`save_checkpoint`.

    Raises:
        BadMagicError: If the file does not start with the magic bytes.
        VersionMismatchError: For an unsupported format version.
        TruncatedCheckpointError: If the header or data is incomplete.
        CheckpointShapeError: If a tensor's stored shape disagrees with the
            shape the config implies.
        CheckpointError: For a malformed header or trailing bytes.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _PREAMBLE.size:
        if not MAGIC.startswith(data[: len(MAGIC)]):
            raise BadMagicError(f"{path} is not an elattn checkpoint")
        raise TruncatedCheckpointError(f"{path} ends inside the preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{path} is not an elattn checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path} has format version {version}, expected {FORMAT_VERSION}"
        )
    start = _PREAMBLE.size
    if len(data) < start + header_len:
        raise TruncatedCheckpointError(f"{path} ends inside the header")
    header = _parse_header(data[start : start + header_len])
    manifest = header.pop("tensors", None)
    try:
        config = ModelConfig.from_dict(header).validate()
    except (TypeError, ParameterError) as e:
        raise CheckpointError(f"{path} has an invalid config: {e}") from e

    layout = tensor_layout(config)
    if manifest is not None:
        for expected, stored in zip(layout, manifest):
            name, shape = expected
            if stored.get("name") != name or tuple(stored.get("shape", ())) != shape:
                raise CheckpointShapeError(
                    f"tensor {name}: stored {stored.get('name')} "
                    f"{tuple(stored.get('shape', ()))}, config implies {shape}"
                )
        if len(manifest) != len(layout):
            raise CheckpointShapeError(
                f"{path} lists {len(manifest)} tensors, config implies {len(layout)}"
            )

    offset = start + header_len
    tensors = {}
    for name, shape in layout:
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * _VALUE.itemsize
        if len(data) < offset + nbytes:
            raise TruncatedCheckpointError(f"{path} ends inside tensor {name}")
        values = np.frombuffer(data, dtype=_VALUE, count=count, offset=offset)
        tensors[name] = values.reshape(shape).astype(default_dtype())
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(
            f"{path} has {len(data) - offset} trailing bytes after the last tensor"
        )
    logger.info(f"Loaded {config.architecture} checkpoint from {path}")
    return model_from_tensors(config, tensors)
