"""Readers and writers for the on-disk image formats.

Stimulus images and fixation bitmaps travel as 8-bit binary netpbm
files (PGM ``P5`` for one channel, PPM ``P6`` for three); continuous
density maps travel as 32-bit grayscale PFM (``Pf``, negative scale =
little-endian, rows stored bottom-to-top as the format prescribes).

All functions exchange float64 arrays shaped (C, H, W) with values in
[0, 1] for the 8-bit formats; PFM round-trips arbitrary float values at
32-bit precision.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited token, skipping '#' comment lines."""
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"unexpected end of header at byte {pos}")
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def _read_int(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    token, new_pos = _read_token(buf, pos)
    try:
        return int(token), new_pos
    except ValueError:
        raise FormatError(f"bad {what} {token!r} at byte {pos}") from None


def read_image_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file into (C, H, W) in [0, 1]."""
    buf = Path(path).read_bytes()
    if len(buf) < 2:
        raise FormatError("file too short for a netpbm header at byte 0")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r} at byte 0")
    channels = 1 if magic == b"P5" else 3
    pos = 2
    width, pos = _read_int(buf, pos, "width")
    height, pos = _read_int(buf, pos, "height")
    maxval, pos = _read_int(buf, pos, "maxval")
    if width < 1 or height < 1:
        raise FormatError(f"invalid extents {width}x{height} at byte {pos}")
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval} at byte {pos}")
    pos += 1  # exactly one whitespace byte separates header and raster
    expected = width * height * channels
    raster = buf[pos : pos + expected]
    if len(raster) != expected:
        raise FormatError(
            f"truncated raster: expected {expected} bytes at byte {pos}, "
            f"found {len(raster)}"
        )
    pixels = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(height, width, channels).transpose(2, 0, 1)


def write_image_pgm(path, tensor: np.ndarray) -> None:
    """Write (1, H, W) as PGM or (3, H, W) as PPM, quantizing to 8 bits."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise FormatError(f"expected (1|3, H, W) array, got shape {arr.shape}")
    channels, height, width = arr.shape
    magic = b"P5" if channels == 1 else b"P6"
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    body = quantized.transpose(1, 2, 0).tobytes()
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + body)


def read_density_pfm(path) -> np.ndarray:
    """Read a grayscale PFM file into a (1, H, W) float64 array."""
    buf = Path(path).read_bytes()
    if len(buf) < 2:
        raise FormatError("file too short for a PFM header at byte 0")
    magic = buf[:2]
    if magic == b"PF":
        raise FormatError("color PFM has 3 channels, expected grayscale 'Pf'")
    if magic != b"Pf":
        raise FormatError(f"unsupported magic {magic!r} at byte 0")
    pos = 2
    width, pos = _read_int(buf, pos, "width")
    height, pos = _read_int(buf, pos, "height")
    token, pos = _read_token(buf, pos)
    try:
        scale = float(token)
    except ValueError:
        raise FormatError(f"bad scale {token!r} at byte {pos}") from None
    if scale == 0.0:
        raise FormatError(f"scale must be nonzero at byte {pos}")
    pos += 1
    expected = width * height * 4
    raster = buf[pos : pos + expected]
    if len(raster) != expected:
        raise FormatError(
            f"truncated raster: expected {expected} bytes at byte {pos}, "
            f"found {len(raster)}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    rows = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    values = rows[::-1].astype(np.float64) * abs(scale)
    return values[None, :, :]


def write_density_pfm(path, tensor: np.ndarray) -> None:
    """Write a (1, H, W) or (H, W) array as little-endian grayscale PFM."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise FormatError(f"expected a single channel, got shape {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise FormatError(f"expected (1, H, W) or (H, W), got shape {arr.shape}")
    height, width = arr.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    body = arr[::-1].astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def write_preview_pgm(path, values: np.ndarray) -> None:
    """Min-max normalize a 2-D map and write it as an 8-bit PGM preview."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    lo, hi = float(arr.min()), float(arr.max())
    norm = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    write_image_pgm(path, norm[None, :, :])
