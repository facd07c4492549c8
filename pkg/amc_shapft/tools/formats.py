# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""Binary artifact files.

All files are little-endian and end with the CRC32 of every preceding byte.

dataset (``AMC1``)
    magic, version u32, frame_count u32, frame_len u32, channel_count u32,
    then per frame: label u8, snr_db i8, frame_len x 2 float32 (I, Q per step).
model checkpoint (``AMCM``)
    magic, version u32, config JSON (u32 length + bytes), tensor count u32,
    then per tensor: name (u32 length + utf-8), rank u32, extents u32..., float32 data.
attributions (``AMCS``)
    magic, version u32, dims 4 x u32, float32 data, model checksum u32,
    config JSON (u32 length + bytes).

Datasets and checkpoints also get a JSON sidecar (same stem, ``.json``) with
provenance; the binary file alone is enough to reload the numbers.
"""

import json
import logging
import struct
import zlib
from pathlib import Path

import numpy as np

from .exceptions import (
    BadMagicError,
    ChecksumError,
    ContractError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from .signals import Dataset

_logger = logging.getLogger(__name__)

DATASET_MAGIC = b"AMC1"
MODEL_MAGIC = b"AMCM"
SHAP_MAGIC = b"AMCS"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_DATASET_HEADER = struct.Struct("<4sIIII")


def crc32(data):
    return zlib.crc32(data) & 0xFFFFFFFF


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fd:
        json.dump(data, fd, indent=2, sort_keys=True)
        fd.write("\n")


def read_json(path):
    with Path(path).open() as fd:
        return json.load(fd)


class _Reader:
    """Cursor over a file's bytes that reports truncation precisely.

    ``verify`` checks the trailing CRC32 before any variable-length field is
    trusted; after it the cursor never reads into the CRC.
    """

    def __init__(self, buf, path):
        self.buf = buf
        self.path = path
        self.pos = 0
        self.end = len(buf)

    def take(self, count):
        end = self.pos + count
        if end > self.end:
            raise TruncatedFileError(self.path, end, self.end)
        chunk = self.buf[self.pos : end]
        self.pos = end
        return chunk

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def blob(self):
        return self.take(self.u32())

    def json(self):
        try:
            return json.loads(self.blob().decode())
        except (UnicodeDecodeError, ValueError) as exc:
            raise FormatError(f"{self.path}: unreadable config JSON ({exc})") from exc

    def text(self):
        try:
            return self.blob().decode()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: unreadable name ({exc})") from exc

    def header(self, magic):
        found = self.take(len(magic))
        if found != magic:
            raise BadMagicError(self.path, magic, found)
        version = self.u32()
        if version != FORMAT_VERSION:
            raise VersionMismatchError(self.path, FORMAT_VERSION, version)

    def verify(self):
        """Check the trailing CRC32 over every byte before it."""
        if len(self.buf) < self.pos + _U32.size:
            raise TruncatedFileError(self.path, self.pos + _U32.size, len(self.buf))
        body_end = len(self.buf) - _U32.size
        stored = _U32.unpack(self.buf[body_end:])[0]
        computed = crc32(self.buf[:body_end])
        if stored != computed:
            raise ChecksumError(self.path, stored, computed)
        self.end = body_end

    def seal(self):
        if self.pos != self.end:
            raise FormatError(
                f"{self.path}: {self.end - self.pos} unexpected trailing bytes"
            )


def _sealed(parts):
    body = b"".join(parts)
    return body + _U32.pack(crc32(body))


def _read_bytes(path):
    with Path(path).open("rb") as fd:
        return fd.read()


def _write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fd:
        fd.write(data)
    _logger.info("Wrote %s (%s bytes)", path, len(data))


def _frame_dtype(frame_len):
    return np.dtype([("label", "u1"), ("snr", "i1"), ("iq", "<f4", (frame_len, 2))])


def encode_dataset(dataset):
    frame_len = dataset.frame_length
    if np.any(dataset.labels < 0) or np.any(dataset.labels > 255):
        raise ContractError("labels must fit an unsigned byte")
    if np.any(dataset.snrs < -128) or np.any(dataset.snrs > 127):
        raise ContractError("SNR tags must fit a signed byte")
    records = np.zeros(len(dataset), dtype=_frame_dtype(frame_len))
    records["label"] = dataset.labels
    records["snr"] = dataset.snrs
    records["iq"] = dataset.samples
    header = _DATASET_HEADER.pack(
        DATASET_MAGIC, FORMAT_VERSION, len(dataset), frame_len, 2
    )
    return _sealed([header, records.tobytes()])


def decode_dataset(buf, path="<memory>"):
    """``(samples, labels, snrs)`` from the bytes of a dataset file."""
    reader = _Reader(buf, path)
    reader.header(DATASET_MAGIC)
    count, frame_len, channels = reader.u32(), reader.u32(), reader.u32()
    record_size = 2 + 4 * channels * frame_len
    expected = reader.pos + count * record_size + _U32.size
    try:
        reader.verify()
    except ChecksumError:
        # a file cut inside a frame, as opposed to a flipped byte
        if len(buf) < expected and (len(buf) - reader.pos - _U32.size) % record_size:
            raise TruncatedFileError(path, expected, len(buf)) from None
        raise
    if channels != 2:
        raise FormatError(f"{path}: channel_count {channels}, expected 2")
    dtype = _frame_dtype(frame_len)
    records = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype)
    reader.seal()
    return (
        records["iq"].astype(np.float32),
        records["label"].astype(np.int64),
        records["snr"].astype(np.int64),
    )


def save_dataset(dataset, path):
    """Write the binary file and its JSON sidecar; returns the file CRC32."""
    data = encode_dataset(dataset)
    _write_bytes(path, data)
    checksum = crc32(data)
    write_json(
        sidecar_path(path),
        {
            "split_tag": dataset.split_tag.value if dataset.split_tag else None,
            "classes": [c.name for c in dataset.classes],
            "frame_count": len(dataset),
            "frame_length": dataset.frame_length,
            "crc32": checksum,
            "metadata": dataset.metadata,
        },
    )
    return checksum


def load_dataset(path):
    samples, labels, snrs = decode_dataset(_read_bytes(path), path)
    side = sidecar_path(path)
    meta = read_json(side) if side.exists() else {}
    kwargs = {}
    if meta.get("classes"):
        kwargs["classes"] = tuple(meta["classes"])
    return Dataset(
        samples,
        labels,
        snrs,
        meta.get("split_tag"),
        meta.get("metadata", {}),
        **kwargs,
    )


def dataset_checksum(dataset):
    return crc32(encode_dataset(dataset))


def encode_model(config, tensors):
    """``config`` is a JSON-able dict, ``tensors`` an ordered name -> array map."""
    config_blob = json.dumps(config, sort_keys=True).encode()
    parts = [
        MODEL_MAGIC,
        _U32.pack(FORMAT_VERSION),
        _U32.pack(len(config_blob)),
        config_blob,
        _U32.pack(len(tensors)),
    ]
    for name, array in tensors.items():
        encoded = name.encode()
        array = np.ascontiguousarray(array, dtype="<f4")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U32.pack(extent) for extent in array.shape)
        parts.append(array.tobytes())
    return _sealed(parts)


def decode_model(buf, path="<memory>"):
    reader = _Reader(buf, path)
    reader.header(MODEL_MAGIC)
    reader.verify()
    config = reader.json()
    tensors = {}
    for _ in range(reader.u32()):
        name = reader.text()
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(reader.take(4 * count), dtype="<f4")
        tensors[name] = data.reshape(shape).astype(np.float32)
    reader.seal()
    return config, tensors


def save_model(config, tensors, path, provenance=None):
    data = encode_model(config, tensors)
    _write_bytes(path, data)
    checksum = crc32(data)
    write_json(sidecar_path(path), {"crc32": checksum, "provenance": provenance or {}})
    return checksum


def load_model(path):
    """``(config, tensors, provenance)``."""
    config, tensors = decode_model(_read_bytes(path), path)
    side = sidecar_path(path)
    provenance = read_json(side).get("provenance", {}) if side.exists() else {}
    return config, tensors, provenance


def encode_shap(values, model_checksum, config):
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 4:
        raise ContractError(f"attributions must be 4-D, got shape {values.shape}")
    config_blob = json.dumps(config, sort_keys=True).encode()
    return _sealed(
        [
            SHAP_MAGIC,
            _U32.pack(FORMAT_VERSION),
            struct.pack("<4I", *values.shape),
            values.tobytes(),
            _U32.pack(model_checksum),
            _U32.pack(len(config_blob)),
            config_blob,
        ]
    )


def decode_shap(buf, path="<memory>"):
    """``(values, model_checksum, config)``."""
    reader = _Reader(buf, path)
    reader.header(SHAP_MAGIC)
    reader.verify()
    dims = struct.unpack("<4I", reader.take(16))
    count = int(np.prod(dims, dtype=np.int64))
    values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
    model_checksum = reader.u32()
    config = reader.json()
    reader.seal()
    return values.astype(np.float32), model_checksum, config


def save_shap(values, model_checksum, config, path):
    data = encode_shap(values, model_checksum, config)
    _write_bytes(path, data)
    return crc32(data)


def load_shap(path):
    return decode_shap(_read_bytes(path), path)
