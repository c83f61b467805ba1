"""Persistence: PPM/PGM images, checkpoints, JSON documents, atomic writes."""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .segnet import Arch, ModelState

CHECKPOINT_MAGIC = b"HRHF1"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    pass


def atomic_write(path, data: bytes):
    """Write to a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode())


# --- images --------------------------------------------------------------------

def to_bytes(image):
    """[0, 1] floats to 0..255, rounding halves up."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(image, comment=None) -> bytes:
    """Binary P6 with maxval 255 from an H x W x 3 image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs H x W x 3, got {image.shape}")
    h, w = image.shape[:2]
    head = b"P6\n"
    if comment:
        head += b"# " + comment.encode("ascii") + b"\n"
    head += f"{w} {h}\n255\n".encode()
    return head + to_bytes(image).tobytes()


def encode_pgm(label, comment=None) -> bytes:
    """Binary P5 with maxval 255 from an H x W integer label map."""
    label = np.asarray(label)
    if label.ndim != 2:
        raise ValueError(f"PGM needs H x W, got {label.shape}")
    if label.min(initial=0) < 0 or label.max(initial=0) > 255:
        raise ValueError("label values must lie in 0..255")
    h, w = label.shape
    head = b"P5\n"
    if comment:
        head += b"# " + comment.encode("ascii") + b"\n"
    head += f"{w} {h}\n255\n".encode()
    return head + label.astype(np.uint8).tobytes()


def _parse_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise FormatError(f"expected {magic!r} header")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError("only maxval 255 is supported")
    return w, h, pos + 1


def decode_ppm(data: bytes):
    """Returns uint8 H x W x 3."""
    w, h, pos = _parse_header(data, b"P6")
    return np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def decode_pgm(data: bytes):
    w, h, pos = _parse_header(data, b"P5")
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def write_ppm(path, image, comment=None):
    atomic_write(path, encode_ppm(image, comment))


def write_pgm(path, label, comment=None):
    atomic_write(path, encode_pgm(label, comment))


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


# --- checkpoints ---------------------------------------------------------------
# layout: magic, u32 version, u32 header length, JSON header, raw '<f8' arrays
# in header order.

def encode_checkpoint(model: ModelState, classes=(), meta=None) -> bytes:
    arrays = [("param", k, v) for k, v in model.params.items()]
    arrays += [("running", k, v) for k, v in model.running.items()]
    header = {
        "arch": model.arch.to_dict(),
        "num_classes": model.num_classes,
        "step": model.step,
        "classes": [int(c) for c in classes],
        "arrays": [{"group": g, "name": k, "shape": list(np.shape(v))} for g, k, v in arrays],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, _, v in arrays)
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head + body


def decode_checkpoint(data: bytes):
    """Returns (model, header)."""
    n = len(CHECKPOINT_MAGIC)
    if data[:n] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[n:n + 8])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(data[n + 8:n + 8 + hlen])
    pos = n + 8 + hlen
    params, running = {}, {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = data[pos:pos + 8 * count]
        if len(chunk) != 8 * count:
            raise FormatError("truncated checkpoint")
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        (params if entry["group"] == "param" else running)[entry["name"]] = arr
        pos += 8 * count
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint arrays")
    model = ModelState(Arch(**header["arch"]), header["num_classes"], params, running, header["step"])
    return model, header


def save_checkpoint(path, model, classes=(), meta=None):
    atomic_write(path, encode_checkpoint(model, classes, meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
