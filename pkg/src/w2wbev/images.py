"""Binary portable pixmap I/O: P6 color images and P5 grayscale heatmaps."""

from __future__ import annotations

import numpy as np


def write_ppm(path: str, img: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary 8-bit P6."""
    h, w, c = img.shape
    if c != 3:
        raise ValueError(f"P6 needs 3 channels, got {c}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P6 file back to float32 in [0, 1]."""
    with open(path, "rb") as fh:
        magic = _token(fh)
        if magic != b"P6":
            raise ValueError(f"{path}: not a P6 file (magic {magic!r})")
        w = int(_token(fh))
        h = int(_token(fh))
        maxval = int(_token(fh))
        raw = fh.read(w * h * 3)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / maxval


def write_pgm(path: str, arr: np.ndarray) -> None:
    """Write a 2-D array as an 8-bit P5 heatmap, min-max normalized per map.

    The original value range is recorded in a header comment so the map
    stays interpretable after normalization.
    """
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo if hi > lo else 1.0
    data = np.clip(np.rint((arr - lo) / span * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# min={lo:.6g} max={hi:.6g}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _token(fh) -> bytes:
    """Next whitespace-delimited PNM header token, skipping # comments."""
    tok = b""
    while True:
        ch = fh.read(1)
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch in b" \t\r\n":
            if tok:
                return tok
            continue
        if ch == b"":
            return tok
        tok += ch
