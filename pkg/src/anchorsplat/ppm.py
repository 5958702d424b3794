"""Binary PPM (P6, 8-bit) image I/O.

Images are float arrays of shape (H, W, 3) with values in [0, 1]; writing
quantizes by round(clamp(v) * 255).
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must have shape (H, W, 3)")
    h, w, _ = img.shape
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()

    # header: magic, width, height, maxval; '#' comments allowed
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise ParseError("truncated PPM header", path=path)
        c = raw[i : i + 1]
        if c == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    if tokens[0] != b"P6":
        raise ParseError(f"expected P6 magic, got {tokens[0]!r}", path=path)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise ParseError(f"bad PPM header: {e}", path=path)
    if maxval != 255:
        raise ParseError(f"only maxval 255 supported, got {maxval}", path=path)
    i += 1  # single whitespace byte after maxval
    body = raw[i : i + w * h * 3]
    if len(body) != w * h * 3:
        raise ParseError("truncated PPM pixel data", path=path)
    data = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return data.astype(float) / 255.0
