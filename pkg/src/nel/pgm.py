"""Binary PGM (P5) reading and writing, maxval 255.

The on-disk convention for the whole project: a unit-range image maps to
bytes via round-half-up(255 * v); reading divides by 255, so a write/read
round trip is the 8-bit quantization of the image.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ContractError, DataFormatError


def write_pgm(path, img) -> None:
    """Write a 2-D array of unit-range floats (or a bool mask) as P5."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ContractError(f"write_pgm needs a 2-D image, got rank {arr.ndim}")
    if arr.dtype == bool:
        arr = arr.astype(np.float64)
    arr = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ContractError("write_pgm: image contains non-finite values")
    pixels = np.floor(255.0 * np.clip(arr, 0.0, 1.0) + 0.5).astype(np.uint8)
    h, w = arr.shape
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _read_tokens(raw: bytes, count: int) -> tuple:
    """Pull `count` whitespace/comment-separated header tokens; return (tokens, offset)."""
    tokens = []
    i = 0
    n = len(raw)
    while len(tokens) < count:
        while i < n and raw[i : i + 1].isspace():
            i += 1
        if i < n and raw[i : i + 1] == b"#":
            while i < n and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not raw[i : i + 1].isspace() and raw[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise DataFormatError("PGM header ended before all fields were read")
        tokens.append(raw[start:i])
    if i >= n or not raw[i : i + 1].isspace():
        raise DataFormatError("PGM header not terminated by whitespace")
    return tokens, i + 1  # single whitespace byte separates header from pixels


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a float64 array in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        tokens, offset = _read_tokens(raw, 4)
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    if tokens[0] != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataFormatError(f"{path}: non-numeric header fields") from None
    if w < 1 or h < 1:
        raise DataFormatError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval}, expected 255")
    data = raw[offset : offset + w * h]
    if len(data) != w * h:
        raise DataFormatError(f"{path}: pixel data truncated ({len(data)} of {w * h} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
