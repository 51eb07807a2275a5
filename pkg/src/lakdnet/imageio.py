"""8-bit binary PGM (P5) / PPM (P6) images and the LAKD checkpoint container."""
from __future__ import annotations

import os
import struct
from typing import Dict, Tuple

import numpy as np


class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# PNM
# ---------------------------------------------------------------------------


def _header_tokens(buf: bytes, count: int) -> Tuple[list, int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError("truncated header", pos)
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((buf[start:pos], start))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("expected a single whitespace byte after the header", pos)
    return tokens, pos + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode P5/P6 bytes into float32 ``[C, H, W]`` in [0, 1]."""
    tokens, data_start = _header_tokens(buf, 4)
    magic, magic_at = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}", magic_at)
    fields = []
    for tok, at in tokens[1:]:
        if not tok.isdigit():
            raise FormatError(f"expected an integer, got {tok!r}", at)
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad image size {width}x{height}", tokens[1][1])
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", tokens[3][1])
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = buf[data_start:data_start + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, found {len(payload)}", data_start + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes: ``floor(v * 255 + 0.5)``, clipped."""
    v = np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [1|3, H, W] image, got shape {img.shape}")
    c, h, w = img.shape
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + quantize(img).transpose(1, 2, 0).tobytes()


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_pnm(path, img) -> None:
    data = img.data if hasattr(img, "data") and not isinstance(img, np.ndarray) else img
    data = np.asarray(data)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ValueError("write_pnm takes a single image")
        data = data[0]
    with open(path, "wb") as fh:
        fh.write(encode_pnm(data))


IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm")


def load_image_dir(path) -> list:
    """Every PGM/PPM under ``path`` (sorted by name) as float32 ``[C, H, W]``."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"not a directory: {path}")
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(IMAGE_SUFFIXES))
    return [read_pnm(os.path.join(path, n)) for n in names]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"LAKD"
VERSION = 1


def encode_checkpoint(entries: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"entry {name!r} cannot be stored")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Dict[str, np.ndarray]:
    def take(n, pos, what):
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        return buf[pos:pos + n], pos + n

    head, pos = take(4, 0, "magic")
    if head != MAGIC:
        raise FormatError(f"bad magic {head!r}", 0)
    raw, pos = take(6, pos, "header")
    version, count = struct.unpack("<HI", raw)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    entries = {}
    for _ in range(count):
        raw, pos = take(2, pos, "name length")
        (nlen,) = struct.unpack("<H", raw)
        raw, pos = take(nlen, pos, "name")
        name = raw.decode("utf-8")
        raw, pos = take(1, pos, "ndim")
        ndim = raw[0]
        raw, pos = take(4 * ndim, pos, "dims")
        dims = struct.unpack(f"<{ndim}I", raw)
        n = int(np.prod(dims)) if ndim else 1
        raw, pos = take(4 * n, pos, f"payload of {name!r}")
        entries[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise FormatError("trailing bytes after last entry", pos)
    return entries


def save_checkpoint(path, entries: Dict[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(entries))
    os.replace(tmp, path)


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
