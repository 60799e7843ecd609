"""Binary PGM (P5) and PPM (P6) images with 8- or 16-bit samples."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ._atomic import atomic_write_bytes


class ImageFormatError(ValueError):
    pass


_KNOWN_ASCII = {b"P1": "P1 (ASCII PBM)", b"P2": "P2 (ASCII PGM)", b"P3": "P3 (ASCII PPM)", b"P4": "P4 (binary PBM)"}


def _header_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens: list[bytes] = []
    i, n = 0, len(raw)
    while len(tokens) < count:
        while i < n and raw[i : i + 1].isspace():
            i += 1
        if i < n and raw[i : i + 1] == b"#":
            while i < n and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not raw[j : j + 1].isspace() and raw[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise ImageFormatError("truncated header")
        tokens.append(raw[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    if i >= n or not raw[i : i + 1].isspace():
        raise ImageFormatError("malformed header: missing whitespace before pixel data")
    return tokens, i + 1


def decode_image(raw: bytes) -> tuple[np.ndarray, int]:
    """Decode PGM/PPM bytes to ``(array, maxval)``; the array keeps integer samples."""
    magic = raw[:2]
    if magic in _KNOWN_ASCII:
        raise ImageFormatError(f"unsupported format {_KNOWN_ASCII[magic]}; only binary P5 and P6 are read")
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"not a PGM/PPM file (magic {magic!r})")
    tokens, offset = _header_tokens(raw, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"malformed header fields {tokens[1:]}") from None
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"image dimensions must be positive, got {w}x{h}")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"maxval {maxval} outside 1..65535")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    payload = raw[offset:]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload[:need], dtype=dtype).reshape((h, w, channels) if channels == 3 else (h, w))
    if arr.max(initial=0) > maxval:
        raise ImageFormatError("sample exceeds maxval")
    return arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def load_image(path, gray: bool = False) -> np.ndarray:
    """Load as float64 in [0, 1]; ``gray=True`` converts RGB with (0.299, 0.587, 0.114)."""
    arr, maxval = decode_image(Path(path).read_bytes())
    img = arr.astype(np.float64) / maxval
    if gray and img.ndim == 3:
        img = img @ np.array([0.299, 0.587, 0.114])
    return img


def encode_image(image, maxval: int = 255) -> bytes:
    """Encode ``(H, W)`` or ``(H, W, 3)``. Float input in [0, 1] is scaled by ``maxval``."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[-1] != 3) or img.size == 0:
        raise ImageFormatError(f"cannot encode image of shape {img.shape}")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"maxval {maxval} outside 1..65535")
    if np.issubdtype(img.dtype, np.floating):
        img = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    if img.min() < 0 or img.max() > maxval:
        raise ImageFormatError("sample outside 0..maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape[:2]
    magic = b"P6" if img.ndim == 3 else b"P5"
    return magic + f"\n{w} {h}\n{maxval}\n".encode() + img.astype(dtype).tobytes()


def save_image(path, image, maxval: int = 255) -> None:
    atomic_write_bytes(path, encode_image(image, maxval))
