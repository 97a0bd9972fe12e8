"""Binary pixmap (P6) and graymap (P5) image I/O, 8 bits per channel."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


class ImageFormatError(ValueError):
    pass


def _to_array(image) -> np.ndarray:
    return np.asarray(getattr(image, "data", image), dtype=float)


def encode_image(image) -> bytes:
    arr = _to_array(image)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"image must be (1|3, H, W), got {arr.shape}")
    c, h, w = arr.shape
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + q.transpose(1, 2, 0).tobytes()


def save_image(image, path: str | Path) -> None:
    Path(path).write_bytes(encode_image(image))


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError(f"unexpected end of header at byte offset {start}")
    return data[start:pos], pos


def decode_image(data: bytes) -> np.ndarray:
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"bad magic {data[:2]!r} at byte offset 0; expected P5 or P6")
    channels = 3 if data[:2] == b"P6" else 1
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad {what} {tok!r} near byte offset {start}")
        fields.append(int(tok))
    w, h, maxval = fields
    if not 0 < maxval < 256:
        raise ImageFormatError(f"maxval {maxval} unsupported (8-bit only) near byte offset {pos}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError(f"missing whitespace after header at byte offset {pos}")
    pos += 1
    need = w * h * channels
    if len(data) - pos < need:
        raise ImageFormatError(f"pixel data truncated: need {need} bytes from byte offset {pos}, have {len(data) - pos}")
    pix = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return pix.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float64) / maxval


def load_image(path: str | Path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def make_grid(images: Sequence[np.ndarray], ncols: int = 8, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Tile (C, H, W) images (C of 1 or 3, mixed allowed) into one color image."""
    tiles = []
    for im in images:
        a = _to_array(im)
        if a.ndim == 2:
            a = a[None]
        if a.shape[0] == 1:
            a = np.repeat(a, 3, axis=0)
        tiles.append(a)
    if not tiles:
        raise ValueError("no images to tile")
    h, w = tiles[0].shape[1:]
    ncols = max(1, min(ncols, len(tiles)))
    nrows = -(-len(tiles) // ncols)
    grid = np.full((3, nrows * (h + pad) + pad, ncols * (w + pad) + pad), fill)
    for k, t in enumerate(tiles):
        r, c = divmod(k, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[:, y : y + h, x : x + w] = t
    return grid
