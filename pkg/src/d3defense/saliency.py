"""Per-pixel importance maps that steer patch sampling during dictionary learning.

A saliency map is a non-negative float array of shape ``(H, W)``. Providers are
callables ``provider(img, image_id) -> map``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import D3IOError, DimensionError, FormatError
from .patches import as_image

MAGIC = b"D3SAL001"
SUFFIX = ".d3sal"


def check_saliency(weights, shape=None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"saliency map must be 2-D, got shape {w.shape}")
    if shape is not None and w.shape != tuple(shape[:2]):
        raise DimensionError(f"saliency shape {w.shape} does not match image shape {tuple(shape[:2])}")
    if not np.all(np.isfinite(w)):
        raise FormatError("saliency map contains non-finite values")
    if np.any(w < 0):
        r, c = np.argwhere(w < 0)[0]
        raise FormatError(f"saliency map has negative weight {w[r, c]:.6g} at ({r}, {c})")
    return w


def uniform_saliency(img, image_id=None) -> np.ndarray:
    img = as_image(img)
    return np.ones(img.shape[:2])


def gradient_magnitude_saliency(img, image_id=None) -> np.ndarray:
    """l2 norm over channels and both axes of the finite-difference image gradient.

    Interior pixels use central differences, borders one-sided ones.
    """
    img = as_image(img)
    if min(img.shape[:2]) < 2:
        return np.zeros(img.shape[:2])
    gy, gx = np.gradient(img, axis=(0, 1))
    return np.sqrt((gy ** 2 + gx ** 2).sum(axis=2))


def save_saliency(weights, path) -> None:
    w = check_saliency(weights)
    payload = MAGIC + struct.pack("<2I", *w.shape) + w.astype("<f4").tobytes()
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise D3IOError(f"cannot write saliency map {path}: {exc}") from exc


def read_saliency(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise D3IOError(f"cannot read saliency map {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a saliency file (bad magic)")
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated header")
    h, w = struct.unpack("<2I", buf[8:16])
    if len(buf) != 16 + 4 * h * w:
        raise FormatError(f"{path}: payload is {len(buf) - 16} bytes, expected {4 * h * w}")
    data = np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)
    return check_saliency(data)


def load_saliency(directory, image_id: str, shape=None) -> np.ndarray:
    """Read ``directory/<image_id>.d3sal``, checking it against ``shape`` if given."""
    path = Path(directory) / f"{image_id}{SUFFIX}"
    if not path.exists():
        raise D3IOError(f"missing saliency file {path}")
    return check_saliency(read_saliency(path), shape)


class DirectorySaliency:
    def __init__(self, directory):
        self.directory = Path(directory)

    def __call__(self, img, image_id):
        return load_saliency(self.directory, image_id, as_image(img).shape)


def make_provider(name: str):
    """``uniform``, ``gradmag`` or ``dir:PATH``."""
    if name == "uniform":
        return uniform_saliency
    if name == "gradmag":
        return gradient_magnitude_saliency
    if name.startswith("dir:"):
        return DirectorySaliency(name[4:])
    raise ValueError(f"unknown saliency provider {name!r}")
