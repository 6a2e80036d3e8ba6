"""Binary file formats: PGM/PPM images and DMAP density/mask files.

DMAP layout: magic "DMAP", u32 little-endian height, width, stride, then
H*W float32 little-endian values row-major.  The same container serves
density maps and binary masks (stored as 0.0/1.0).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError

DMAP_MAGIC = b"DMAP"


def write_pgm(path, image):
    """Write a grayscale image with values in [0,1] as binary PGM (P5)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ParseError(f"PGM wants a 2-d image, got shape {arr.shape}", path=path)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_ppm(path, image):
    """Write an RGB image with values in [0,1] as binary PPM (P6)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParseError(f"PPM wants an HxWx3 image, got shape {arr.shape}", path=path)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm_header(fh, path):
    # Header tokens may be separated by arbitrary whitespace and comments.
    magic = fh.read(2)
    tokens = []
    while len(tokens) < 3:
        ch = fh.read(1)
        if not ch:
            raise ParseError("truncated netpbm header", path=path)
        if ch in b" \t\r\n":
            continue
        if ch == b"#":
            while fh.read(1) not in (b"\n", b""):
                pass
            continue
        tok = ch
        while True:
            ch = fh.read(1)
            if ch in b" \t\r\n" or not ch:
                break
            tok += ch
        tokens.append(int(tok))
    return magic, tokens


def read_image(path):
    """Read a PGM (-> HxW) or PPM (-> HxWx3) image scaled to [0,1]."""
    with open(path, "rb") as fh:
        magic, (w, h, maxval) = _read_netpbm_header(fh, path)
        if magic not in (b"P5", b"P6"):
            raise ParseError(f"unsupported netpbm magic {magic!r}", path=path)
        if maxval != 255:
            raise ParseError(f"only maxval 255 supported, got {maxval}", path=path)
        channels = 1 if magic == b"P5" else 3
        raw = fh.read(w * h * channels)
        if len(raw) != w * h * channels:
            raise ParseError("truncated netpbm payload", path=path)
    data = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return data.reshape(h, w)
    return data.reshape(h, w, 3)


def write_dmap(path, values, stride: int):
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ParseError(f"DMAP wants a 2-d map, got shape {arr.shape}", path=path)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(DMAP_MAGIC)
        fh.write(struct.pack("<III", h, w, stride))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_dmap(path):
    """Returns (values as float64 HxW, stride)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DMAP_MAGIC:
            raise ParseError(f"bad DMAP magic {magic!r}", path=path)
        h, w, stride = struct.unpack("<III", fh.read(12))
        raw = fh.read(4 * h * w)
        if len(raw) != 4 * h * w:
            raise ParseError("truncated DMAP payload", path=path)
    values = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)
    return values, int(stride)
