"""Frame coding for transport: JPEG color plus lossless QOI-16 depth.

QOI-16 container, all fields big-endian::

    "qo16" | width u32 | height u32 | reserved u16 = 0 | chunks | 00*7 01

Chunk tags (first byte):

    00iiiiii          INDEX   value = index[i]
    01dddddd          DIFF6   value = prev + d - 32
    10rrrrrr          RUN     repeat prev r + 1 times
    11dddddd dddddddd DIFF14  value = prev + d - 8192   (d != 0x3FFF)
    11111111 11111111 vv vv   LITERAL 16-bit value

Arithmetic wraps mod 2**16. After every pixel ``prev = value`` and
``index[((value * 2654435761) mod 2**16) >> 10] = value``. The encoder
prefers RUN, then INDEX, DIFF6, DIFF14 and finally LITERAL.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import kernels
from .capture import RgbdFrame
from .errors import (BadMagicError, CodecError, CorruptStreamError, DimensionError,
                     MissingEndMarkerError, TruncatedStreamError)

QOI16_MAGIC = b"qo16"
QOI16_HEADER = struct.Struct(">4sIIH")
QOI16_END = b"\x00" * 7 + b"\x01"
QOI16_MAX_PIXELS = 1 << 28

FRAME_MAGIC = b"DPCS"
FRAME_VERSION = 1
FRAME_HEADER = struct.Struct("<4sHHIQII")
DEFAULT_JPEG_QUALITY = 85


def qoi16_encode(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth)
    if depth.ndim != 2 or depth.shape[0] < 1 or depth.shape[1] < 1:
        raise DimensionError(f"raster must be 2-D and non-empty, got shape {depth.shape}")
    if depth.size > QOI16_MAX_PIXELS:
        raise DimensionError("raster too large")
    if depth.dtype != np.uint16:
        if depth.min() < 0 or depth.max() > 0xFFFF:
            raise CodecError("depth values must fit in 16 bits")
        depth = depth.astype(np.uint16)
    h, w = depth.shape
    chunks = kernels.qoi16_encode_chunks(np.ascontiguousarray(depth).ravel())
    return QOI16_HEADER.pack(QOI16_MAGIC, w, h, 0) + chunks + QOI16_END


def qoi16_decode(data: bytes) -> np.ndarray:
    data = bytes(data)
    if len(data) < QOI16_HEADER.size:
        if not QOI16_MAGIC.startswith(data[:4]):
            raise BadMagicError("not a QOI-16 stream")
        raise TruncatedStreamError("stream shorter than header")
    magic, w, h, reserved = QOI16_HEADER.unpack_from(data)
    if magic != QOI16_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if w == 0 or h == 0:
        raise DimensionError(f"zero dimension {w}x{h}")
    n = w * h
    if n > QOI16_MAX_PIXELS:
        raise DimensionError(f"{w}x{h} exceeds {QOI16_MAX_PIXELS} pixels")
    if reserved != 0:
        raise CorruptStreamError("reserved header field is nonzero")
    body = len(data) - QOI16_HEADER.size - len(QOI16_END)
    # every chunk byte yields at most 64 pixels
    if body < 1 or body * 64 < n:
        raise TruncatedStreamError(f"{max(body, 0)} chunk bytes cannot hold {n} pixels")
    pixels, pos = kernels.qoi16_decode_chunks(data, QOI16_HEADER.size, n)
    tail = data[pos:]
    if len(tail) < len(QOI16_END) or tail[:len(QOI16_END)] != QOI16_END:
        raise MissingEndMarkerError("end marker missing after last pixel")
    if len(tail) > len(QOI16_END):
        raise CorruptStreamError(f"{len(tail) - len(QOI16_END)} trailing bytes after end marker")
    return pixels.reshape(h, w)


@dataclass(frozen=True)
class EncodedFrame:
    unit_id: int
    seq: int
    capture_ts: int
    rgb_payload: bytes
    depth_payload: bytes

    def to_bytes(self) -> bytes:
        header = FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, self.unit_id, self.seq,
                                   self.capture_ts, len(self.rgb_payload), len(self.depth_payload))
        return header + self.rgb_payload + self.depth_payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedFrame":
        data = memoryview(data)
        if len(data) < FRAME_HEADER.size:
            raise TruncatedStreamError("frame shorter than header")
        magic, version, unit_id, seq, ts, rgb_len, depth_len = FRAME_HEADER.unpack_from(data)
        if magic != FRAME_MAGIC:
            raise BadMagicError(f"bad frame magic {bytes(magic)!r}")
        if version != FRAME_VERSION:
            raise CodecError(f"unsupported frame version {version}")
        end = FRAME_HEADER.size + rgb_len + depth_len
        if len(data) < end:
            raise TruncatedStreamError("frame payload truncated")
        if len(data) > end:
            raise CorruptStreamError("trailing bytes after frame payload")
        rgb = bytes(data[FRAME_HEADER.size:FRAME_HEADER.size + rgb_len])
        depth = bytes(data[FRAME_HEADER.size + rgb_len:end])
        return cls(unit_id, seq, ts, rgb, depth)

    @property
    def nbytes(self) -> int:
        return FRAME_HEADER.size + len(self.rgb_payload) + len(self.depth_payload)


def jpeg_encode(rgb: np.ndarray, quality: int = DEFAULT_JPEG_QUALITY) -> bytes:
    if not 1 <= quality <= 100:
        raise CodecError("JPEG quality must lie in 1..100")
    buf = io.BytesIO()
    Image.fromarray(rgb, "RGB").save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


def jpeg_decode(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("RGB"))
    except (OSError, SyntaxError, ValueError) as exc:
        raise CodecError(f"JPEG decode failed: {exc}") from None


def encode_frame(frame: RgbdFrame, jpeg_quality: int = DEFAULT_JPEG_QUALITY) -> EncodedFrame:
    return EncodedFrame(frame.unit_id, frame.seq, frame.capture_ts,
                        jpeg_encode(frame.rgb, jpeg_quality), qoi16_encode(frame.depth))


def decode_frame(enc: EncodedFrame) -> RgbdFrame:
    depth = qoi16_decode(enc.depth_payload)
    rgb = jpeg_decode(enc.rgb_payload)
    if rgb.shape[:2] != depth.shape:
        raise CorruptStreamError(f"color {rgb.shape[:2]} and depth {depth.shape} sizes disagree")
    return RgbdFrame(enc.unit_id, enc.seq, enc.capture_ts, rgb, depth)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return float("inf") if mse == 0 else 10.0 * np.log10(255.0 ** 2 / mse)
