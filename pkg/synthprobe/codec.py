"""
File formats: the SYNT binary tensor format, image files and weight
directories.

A SYNT file is the magic bytes "SYNT", a u16 version, a u8 dtype code, a u8
rank, rank little-endian u32 extents and the raw little-endian payload.
"""

import json
import logging
import os
import struct

import numpy as np
from PIL import Image

from synthprobe.tensor import DataError

logger = logging.getLogger("synthprobe.codec")

MAGIC = b"SYNT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<u2")}
CODES = {"float32": 0, "uint8": 1, "uint16": 2}

def encode_tensor(array):
    array = np.asarray(array)
    try:
        code = CODES[array.dtype.name]
    except KeyError:
        raise DataError("SYNT cannot store dtype {0}".format(array.dtype))
    header = struct.pack("<4sHBB", MAGIC, VERSION, code, array.ndim)
    header += struct.pack("<{0}I".format(array.ndim), *array.shape)
    payload = np.ascontiguousarray(array, dtype = DTYPES[code]).tobytes()
    return header + payload

def decode_tensor(blob, source = "<bytes>"):
    if len(blob) < 8:
        raise DataError("{0}: truncated SYNT header".format(source))
    magic, version, code, rank = struct.unpack_from("<4sHBB", blob, 0)
    if magic != MAGIC:
        raise DataError("{0}: not a SYNT file".format(source))
    if version != VERSION:
        raise DataError("{0}: unsupported SYNT version {1}".format(
            source, version))
    if code not in DTYPES:
        raise DataError("{0}: unknown dtype code {1}".format(source, code))
    offset = 8 + 4 * rank
    if len(blob) < offset:
        raise DataError("{0}: truncated SYNT extents".format(source))
    shape = struct.unpack_from("<{0}I".format(rank), blob, 8)
    dtype = DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise DataError("{0}: payload is {1} bytes, expected {2}".format(
            source, len(blob) - offset, expected))
    array = np.frombuffer(blob, dtype = dtype, offset = offset)
    return array.reshape(shape).astype(dtype.newbyteorder("="))

def write_tensor(path, array):
    with open(path, "wb") as f:
        f.write(encode_tensor(array))

def read_tensor(path):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except IOError as e:
        raise DataError("Cannot read {0}: {1}".format(path, e))
    return decode_tensor(blob, path)

def write_image(path, array):
    """
    Writes an 8-bit gray/RGB or 16-bit gray image; the format follows the
    extension (.png, .ppm/.pgm, .synt).
    """
    array = np.asarray(array)
    if path.endswith(".synt"):
        return write_tensor(path, array)
    if array.dtype == np.uint16:
        if array.ndim != 2:
            raise DataError("16-bit images must be single-channel")
        image = Image.fromarray(array)
    else:
        image = Image.fromarray(array.astype(np.uint8))
    image.save(path)

def read_image(path):
    if path.endswith(".synt"):
        return read_tensor(path)
    try:
        image = Image.open(path)
    except IOError as e:
        raise DataError("Cannot read {0}: {1}".format(path, e))
    with image:
        if image.mode in ("I;16", "I;16B", "I;16L", "I"):
            return np.array(image).astype(np.uint16)
        return np.array(image)

def save_params(directory, params, header):
    """
    Writes one SYNT file per parameter plus header.json naming them.
    """
    if not os.path.isdir(directory):
        os.makedirs(directory)
    entries = []
    for name in sorted(params):
        filename = "{0}.synt".format(name)
        array = np.asarray(params[name], dtype = np.float32)
        write_tensor(os.path.join(directory, filename), array)
        entries.append({"name": name, "file": filename,
                        "shape": list(array.shape)})
    document = dict(header)
    document["params"] = entries
    with open(os.path.join(directory, "header.json"), "w") as f:
        json.dump(document, f, indent = 2, sort_keys = True)
    logger.debug("Saved {0} parameters to {1}".format(len(entries), directory))

def load_params(directory):
    path = os.path.join(directory, "header.json")
    try:
        with open(path) as f:
            header = json.load(f)
    except IOError:
        raise DataError("Missing weights header {0}".format(path))
    params = {}
    for entry in header.get("params", []):
        array = read_tensor(os.path.join(directory, entry["file"]))
        if list(array.shape) != list(entry["shape"]):
            raise DataError("{0}: shape {1} does not match header {2}".format(
                entry["file"], list(array.shape), entry["shape"]))
        params[entry["name"]] = array
    return params, header
