"""Binary PPM (P6, maxval 255) reader/writer.

Chosen as the raster interchange format because it is codec-free and
byte-exact: write(read(x)) == x for any 8-bit raster.
"""

from __future__ import annotations

import numpy as np


class PpmError(Exception):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise PpmError("unexpected end of header", pos)
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise PpmError(f"not a P6 file (magic {buf[:2]!r})", 0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos)
        if not tok.isdigit():
            raise PpmError(f"expected integer, got {tok!r}", pos - len(tok))
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise PpmError(f"unsupported maxval {maxval}", pos - len(str(maxval)))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PpmError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * 3
    data = buf[pos:pos + need]
    if len(data) < need:
        raise PpmError(f"truncated raster: need {need} bytes, have {len(data)}", pos + len(data))
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(raster: np.ndarray, path) -> None:
    arr = np.asarray(raster)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"write_ppm wants (H, W, 3) uint8, got {arr.shape} {arr.dtype}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
