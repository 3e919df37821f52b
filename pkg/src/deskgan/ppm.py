"""Binary portable pixmap I/O: P6 for color, P5 for grayscale heatmaps.

Zero-dependency and bit-exact: the writer always emits the minimal header
``P6\\n{w} {h}\\n255\\n`` (so a 1×1 white pixel file is exactly
``b"P6\\n1 1\\n255\\n\\xff\\xff\\xff"``), and write→read round-trips 8-bit
data losslessly.  The reader additionally tolerates comments and arbitrary
whitespace, per the format spec.
"""

from __future__ import annotations

import numpy as np


class PpmError(ValueError):
    """Malformed pixmap; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_image(path, pixels: np.ndarray) -> None:
    """Write uint8 pixels: [H×W×3] as P6, [H×W] as P5 (maxval 255)."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ValueError(f"write_image wants uint8 pixels, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"write_image wants [H,W,3] or [H,W], got shape {arr.shape}")
    h, w = arr.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise PpmError("unexpected end of file while reading header", pos)
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_image(path) -> np.ndarray:
    """Read a binary pixmap back as uint8: [H×W×3] for P6, [H×W] for P5."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 2:
        raise PpmError("file too short for a pixmap magic", 0)
    magic = buf[:2]
    if magic == b"P3":
        raise PpmError("ASCII pixmaps (P3) are not supported; use binary P6", 0)
    if magic == b"P2":
        raise PpmError("ASCII graymaps (P2) are not supported; use binary P5", 0)
    if magic not in (b"P5", b"P6"):
        raise PpmError(f"bad magic {magic!r}; expected P5 or P6", 0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PpmError(f"expected integer header field, got {tok!r}", pos - len(tok))
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise PpmError(f"only maxval 255 supported, got {maxval}", pos - len(str(maxval)))
    if w <= 0 or h <= 0:
        raise PpmError(f"non-positive image dimensions {w}x{h}", 2)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PpmError("missing single whitespace after maxval", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise PpmError(f"truncated payload: need {need} bytes, have {len(payload)}", pos)
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(h, w, 3).copy()
    return arr.reshape(h, w).copy()


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 [H,W,3] -> float32 [3,H,W] in [-1, 1]."""
    x = pixels.astype(np.float32) / 255.0
    return np.ascontiguousarray(x.transpose(2, 0, 1)) * 2.0 - 1.0


def from_unit(chw: np.ndarray) -> np.ndarray:
    """float [3,H,W] in [-1, 1] -> uint8 [H,W,3], clipping out-of-range."""
    x = (np.clip(chw, -1.0, 1.0) + 1.0) * 0.5
    return np.ascontiguousarray(
        np.round(x.transpose(1, 2, 0) * 255.0).astype(np.uint8))
