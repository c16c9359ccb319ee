"""PFM and PNG readers/writers for images, disparities, depths and masks."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

PNG_DISPARITY_SCALE = 256.0
PNG_DEPTH_SCALE = 256.0


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom-up."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError(f"PFM writer expects a 2-D map, got shape {arr.shape}")
    h, w = arr.shape
    with Path(path).open("wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        header = fh.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise FormatError(f"{path}: not a PFM file")
        dims = re.match(rb"^(\d+)\s+(\d+)\s*$", fh.readline())
        if not dims:
            raise FormatError(f"{path}: malformed PFM dimensions")
        w, h = map(int, dims.groups())
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    shape = (h, w, channels) if channels == 3 else (h, w)
    if data.size != np.prod(shape):
        raise FormatError(f"{path}: expected {np.prod(shape)} values, found {data.size}")
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_png16(path, values: np.ndarray, scale: float) -> None:
    """Store ``values * scale`` as 16-bit grayscale, rounded and clipped to [0, 65535]."""
    q = np.clip(np.round(np.asarray(values, dtype=np.float64) * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_png16(path, scale: float) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.array(im)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel 16-bit PNG")
    return raw.astype(np.float64) / scale


def write_rgb(path, image: np.ndarray) -> None:
    """Float ``H×W×3`` image in [0, 1] → 8-bit RGB PNG."""
    q = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127
