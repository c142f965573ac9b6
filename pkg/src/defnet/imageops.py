"""Raster image I/O and box-crop warping.

Images travel through the package as float arrays shaped ``[C, H, W]``
with values in ``[0, 1]``.  On disk they are binary PPM (P6, maxval
255), which keeps the generator dependency-free and byte-deterministic;
PNG is supported when Pillow happens to be installed.
"""

from __future__ import annotations

import os
from typing import Tuple

import numpy as np

__all__ = ["write_ppm", "read_ppm", "write_image", "read_image", "crop_resize"]


def write_ppm(path, image: np.ndarray) -> None:
    """Write ``[3, H, W]`` floats in ``[0, 1]`` as a binary P6 PPM."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("write_ppm expects a [3, H, W] array, got %r" % (arr.shape,))
    pix = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1], arr.shape[2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(pix.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into ``[3, H, W]`` floats in ``[0, 1]``."""
    with open(path, "rb") as fh:
        data = fh.read()
    # Header: magic, width, height, maxval, separated by whitespace
    # (comment lines starting with '#' are legal and skipped).
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header in %s" % path)
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM (P6) file: %s" % path)
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("unsupported PPM maxval %d in %s" % (maxval, path))
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    if raw.size != w * h * 3:
        raise ValueError("truncated PPM pixel data in %s" % path)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """Dispatch on extension: ``.ppm`` natively, ``.png`` via Pillow."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm":
        write_ppm(path, image)
        return
    if ext == ".png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise RuntimeError("PNG output requires Pillow; use .ppm instead") from exc
        pix = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pix.transpose(1, 2, 0)).save(path)
        return
    raise ValueError("unsupported image extension: %s" % path)


def read_image(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm":
        return read_ppm(path)
    if ext == ".png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise RuntimeError("PNG input requires Pillow; use .ppm instead") from exc
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
        return arr.transpose(2, 0, 1) / 255.0
    raise ValueError("unsupported image extension: %s" % path)


def crop_resize(image: np.ndarray, box, out_hw: Tuple[int, int]) -> np.ndarray:
    """Bilinearly resample the ``box`` region of ``[C, H, W]`` to ``out_hw``.

    ``box`` is ``(x1, y1, x2, y2)`` in continuous image coordinates.
    Output pixel centers are mapped linearly into the box, so cropping
    the full image to its own size reproduces it exactly (samples land
    on integer pixel centers).  Samples outside the image clamp to the
    border row/column.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 > x1 and y2 > y1):
        raise ValueError("degenerate crop box: (%g, %g, %g, %g)" % (x1, y1, x2, y2))
    c, h, w = image.shape
    out_h, out_w = int(out_hw[0]), int(out_hw[1])
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive, got %r" % (out_hw,))

    sy = y1 + (np.arange(out_h) + 0.5) * (y2 - y1) / out_h - 0.5
    sx = x1 + (np.arange(out_w) + 0.5) * (x2 - x1) / out_w - 0.5
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    wy = sy - y0
    wx = sx - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)

    top = (image[:, y0c[:, None], x0c[None, :]] * (1.0 - wx)[None, None, :]
           + image[:, y0c[:, None], x1c[None, :]] * wx[None, None, :])
    bot = (image[:, y1c[:, None], x0c[None, :]] * (1.0 - wx)[None, None, :]
           + image[:, y1c[:, None], x1c[None, :]] * wx[None, None, :])
    return top * (1.0 - wy)[None, :, None] + bot * wy[None, :, None]
