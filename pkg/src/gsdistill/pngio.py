"""PNG serialization for rendered images.

Color goes out as 8-bit RGB (values clipped to [0, 1] then rounded).
Depth goes out as 16-bit grayscale with a linear mapping: ``near`` -> 0,
``far`` -> 65535, values clipped to that range.  Both directions round-trip
up to the stated quantization.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import ContractError


def rgb_to_u8(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ContractError(f"rgb image must be (H, W, 3), got {rgb.shape}")
    return np.clip(np.rint(np.clip(rgb, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def write_rgb_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb_to_u8(rgb), mode="RGB").save(path, format="PNG")


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def depth_to_u16(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    if not far > near:
        raise ContractError(f"far ({far}) must exceed near ({near})")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ContractError(f"depth image must be (H, W), got {depth.shape}")
    unit = np.clip((depth - near) / (far - near), 0.0, 1.0)
    return np.rint(unit * 65535.0).astype(np.uint16)


def u16_to_depth(u16: np.ndarray, near: float, far: float) -> np.ndarray:
    return near + (np.asarray(u16, dtype=np.float64) / 65535.0) * (far - near)


def write_depth_png(path, depth: np.ndarray, near: float, far: float) -> None:
    Image.fromarray(depth_to_u16(depth, near, far)).save(path, format="PNG")


def read_depth_png(path, near: float, far: float) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.uint16)
    return u16_to_depth(arr, near, far)
