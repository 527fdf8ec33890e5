"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255 only.

Images are float arrays of shape (3, H, W) in [0, 1].  Saving quantizes with
``round(v * 255)``; loading divides by 255.  Grayscale P5 files are
replicated to three channels on load.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Malformed or truncated image file; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte {offset})")
        self.offset = offset
        self.path = path


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got shape {img.shape}")
    if np.any(~np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    _, h, w = img.shape
    q = np.rint(img * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def save_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def _header_tokens(data: bytes, count: int, path) -> tuple[list[tuple[bytes, int]], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i >= n:
            raise ImageFormatError("truncated header", i, path)
        if data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        tokens.append((data[start:i], start))
    if i >= n or not data[i:i + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval", i, path)
    return tokens, i + 1


def decode_pnm(data: bytes, path=None) -> np.ndarray:
    if len(data) < 2 or data[:2] not in (b"P6", b"P5"):
        raise ImageFormatError(f"unsupported magic {data[:2]!r}; expected P6 or P5", 0, path)
    channels = 3 if data[:2] == b"P6" else 1
    tokens, body = _header_tokens(data[2:], 3, path)
    body += 2
    vals = []
    for tok, off in tokens:
        if not tok.isdigit():
            raise ImageFormatError(f"expected a decimal number, got {tok!r}", off + 2, path)
        vals.append(int(tok))
    w, h, maxval = vals
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"invalid size {w}x{h}", tokens[0][1] + 2, path)
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}", tokens[2][1] + 2, path)
    need = w * h * channels
    if len(data) - body < need:
        raise ImageFormatError(
            f"truncated payload: need {need} bytes, have {len(data) - body}", len(data), path)
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=body).reshape(h, w, channels)
    img = px.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return np.ascontiguousarray(img)


def load_image(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes(), str(path))


def montage(panels: list[np.ndarray], columns: int | None = None) -> np.ndarray:
    """Tile equally sized 3 x H x W panels row-major; ``None`` and missing cells stay black."""
    first = next((p for p in panels if p is not None), None)
    if first is None:
        raise ValueError("montage needs at least one panel")
    c, h, w = first.shape
    cols = columns or len(panels)
    rows = -(-len(panels) // cols)
    grid = np.zeros((c, rows * h, cols * w), dtype=first.dtype)
    for k, p in enumerate(panels):
        if p is None:
            continue
        if p.shape != (c, h, w):
            raise ValueError(f"panel {k} has shape {p.shape}, expected {(c, h, w)}")
        r, q = divmod(k, cols)
        grid[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = p
    return grid
