"""Binary PGM/PPM (P5/P6) reading and writing."""

import numpy as np


def _tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        out.append(buf[start:pos])
    return out, pos


def read_pnm(path):
    """Return a (H, W) or (H, W, 3) unsigned integer array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * channels
    raster = np.frombuffer(buf, dtype=dtype, count=n, offset=pos) if len(buf) - pos >= n * dtype.itemsize else None
    if raster is None:
        raise ValueError(f"{path}: raster shorter than {w}x{h}x{channels}")
    arr = raster.astype(np.uint16 if maxval > 255 else np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_pnm(path, array, maxval=None):
    arr = np.asarray(array)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError("expected a (H, W) or (H, W, 3) array")
    if maxval is None:
        maxval = 65535 if arr.max(initial=0) > 255 else 255
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise ValueError(f"values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n{maxval}\n".encode())
        fh.write(arr.astype(dtype).tobytes())
