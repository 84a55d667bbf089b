import logging
import os
import struct
import zlib

import numpy as np

MAGIC = b"PIGANCKP"
FORMAT_VERSION = 1


class ChecksumError(ValueError):
    """Raised for truncated, corrupt or foreign checkpoint files."""


def encode_checkpoint(tensors):
    """Serializes named float64 tensors into checkpoint bytes.

    Layout (little endian): magic b"PIGANCKP", uint16 format version, uint32
    tensor count, then per tensor uint16 name length, utf-8 name, uint8
    ndim, ndim uint32 dims and the raw float64 data; a trailing uint32
    CRC32 covers every preceding byte.
    """
    body = bytearray(MAGIC)
    body += struct.pack("<HI", FORMAT_VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded)) + encoded
        body += struct.pack("<B", arr.ndim)
        body += struct.pack("<%dI" % arr.ndim, *arr.shape)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def decode_checkpoint(data):
    header = len(MAGIC) + struct.calcsize("<HI")
    if len(data) < header + 4 or data[:len(MAGIC)] != MAGIC:
        raise ChecksumError("not a checkpoint file")
    stored_crc, = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("checkpoint checksum mismatch")
    version, count = struct.unpack("<HI", data[len(MAGIC):header])
    if version != FORMAT_VERSION:
        raise ChecksumError("unsupported checkpoint version %d" % version)

    tensors = {}
    offset = header
    try:
        for _ in range(count):
            name_len, = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            ndim, = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from("<%dI" % ndim, data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(data, dtype="<f8", count=size,
                                   offset=offset)
            offset += 8 * size
            tensors[name] = values.astype(np.float64).reshape(shape)
    except (struct.error, ValueError, UnicodeDecodeError):
        raise ChecksumError("checkpoint tensor table is truncated")
    if offset != len(data) - 4:
        raise ChecksumError("checkpoint has trailing bytes")
    return tensors


def save_checkpoint(path, tensors):
    """Writes the tensor table atomically (temporary file, then rename).

    Parameters
    ----------
    path:       str
    tensors:    dict
                name -> numpy array

    Returns
    -------
    None
    """
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as outfile:
        outfile.write(encode_checkpoint(tensors))
    os.replace(tmp_path, path)
    logging.info("Checkpoint %s written (%d tensors)" % (path, len(tensors)))


def load_checkpoint(path):
    """Reads a tensor table, raising FileNotFoundError or ChecksumError."""
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as infile:
        data = infile.read()
    return decode_checkpoint(data)


def select(tensors, prefix):
    """Subset of a tensor table whose names start with prefix."""
    return {name: value for name, value in tensors.items()
            if name.startswith(prefix)}
