"""8/16-bit grayscale and RGB image files (PNG via Pillow, PGM by hand)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def quantize(values: np.ndarray, bits: int = 16) -> np.ndarray:
    """Map [0, 1] floats to unsigned integers at ``bits`` depth (round half to even)."""
    if bits not in (8, 16):
        raise ValueError(f"bit depth must be 8 or 16, got {bits}")
    maxval = (1 << bits) - 1
    q = np.rint(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * maxval)
    return q.astype(np.uint16 if bits == 16 else np.uint8)


def dequantize(values: np.ndarray) -> np.ndarray:
    maxval = 65535.0 if values.dtype == np.uint16 else 255.0
    return values.astype(np.float64) / maxval


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary PGM (P5); uint16 data is written big-endian with maxval 65535."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {image.shape}")
    if image.dtype == np.uint16:
        maxval, payload = 65535, image.astype(">u2").tobytes()
    elif image.dtype == np.uint8:
        maxval, payload = 255, image.tobytes()
    else:
        raise TypeError(f"PGM needs uint8 or uint16 samples, got {image.dtype}")
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + payload)


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace before raster
    w, h, maxval = fields
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(h, w)
    return data.astype(np.uint16 if maxval > 255 else np.uint8)


def write_png(path: str | Path, image: np.ndarray) -> None:
    """uint8 gray/RGB or uint16 gray PNG."""
    image = np.asarray(image)
    if image.dtype == np.uint16:
        if image.ndim != 2:
            raise ValueError("16-bit PNG output is grayscale only")
        img = Image.frombytes("I;16", (image.shape[1], image.shape[0]), image.astype("<u2").tobytes())
    elif image.dtype == np.uint8:
        img = Image.fromarray(image)
    else:
        raise TypeError(f"PNG needs uint8 or uint16 samples, got {image.dtype}")
    img.save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I"):
            return np.asarray(img, dtype=np.uint32).astype(np.uint16)
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return np.asarray(img).copy()


def write_prediction(path: str | Path, probs: np.ndarray, bits: int = 16) -> None:
    """Store a [0, 1] probability map; format follows the file suffix."""
    q = quantize(probs, bits)
    if str(path).lower().endswith(".pgm"):
        write_pgm(path, q)
    else:
        write_png(path, q)


def read_prediction(path: str | Path) -> np.ndarray:
    raw = read_pgm(path) if str(path).lower().endswith(".pgm") else read_png(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    return dequantize(raw)


def read_label(path: str | Path) -> np.ndarray:
    """Binary label from an 8-bit PNG (any nonzero value is positive)."""
    raw = read_png(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    return (raw > 0).astype(np.uint8)


def write_label(path: str | Path, label: np.ndarray) -> None:
    write_png(path, (np.asarray(label) > 0).astype(np.uint8) * 255)
