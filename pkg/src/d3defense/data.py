"""Image I/O and the small datasets used by the desk-scale experiments."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import D3IOError, FormatError
from .patches import as_image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")

# Natural photographs bundled with scikit-image (no download needed).
DESK_SOURCES = (
    "astronaut", "camera", "coffee", "chelsea", "rocket", "moon", "coins",
    "brick", "grass", "gravel", "immunohistochemistry", "hubble_deep_field",
)


def read_image(path) -> np.ndarray:
    """8-bit PNG/PPM/PGM to a float ``(H, W, C)`` array in ``[0, 1]``."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise D3IOError(f"no such image: {path}") from exc
    except UnidentifiedImageError as exc:
        raise FormatError(f"unreadable image: {path}") from exc
    except OSError as exc:
        raise D3IOError(f"cannot read {path}: {exc}") from exc
    return as_image(arr)


def to_uint8(img) -> np.ndarray:
    img = as_image(img)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_image(img, path) -> None:
    arr = to_uint8(img)
    arr = arr[:, :, 0] if arr.shape[2] == 1 else arr
    try:
        Image.fromarray(arr).save(Path(path))
    except OSError as exc:
        raise D3IOError(f"cannot write {path}: {exc}") from exc


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise D3IOError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_directory(directory) -> tuple[list[str], list[np.ndarray]]:
    """All images in ``directory`` sorted by name, with their stems as ids."""
    paths = list_images(directory)
    if not paths:
        raise D3IOError(f"no PNG/PPM images in {directory}")
    return [p.stem for p in paths], [read_image(p) for p in paths]


def _source(name: str, gray: bool) -> np.ndarray:
    import skimage.data
    from skimage.color import gray2rgb, rgb2gray

    img = np.asarray(getattr(skimage.data, name)(), dtype=np.float64)
    if img.max() > 1.0:
        img = img / 255.0
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[:, :, :3]
    if gray:
        return rgb2gray(img) if img.ndim == 3 else img
    return img if img.ndim == 3 else gray2rgb(img)


def desk_corpus(n: int = 500, size: int = 32, seed: int = 0, gray: bool = True,
                min_mean: float = 0.1) -> list[np.ndarray]:
    """``n`` random ``size x size`` crops of scikit-image's sample photographs.

    Crops darker than ``min_mean`` on average are redrawn: their tiny norm makes
    relative reconstruction errors meaningless.
    """
    rng = np.random.default_rng(seed)
    sources = [_source(name, gray) for name in DESK_SOURCES]
    crops = []
    while len(crops) < n:
        src = sources[int(rng.integers(len(sources)))]
        r = int(rng.integers(src.shape[0] - size + 1))
        c = int(rng.integers(src.shape[1] - size + 1))
        crop = as_image(src[r:r + size, c:c + size]).copy()
        if crop.mean() >= min_mean:
            crops.append(crop)
    return crops


def gaussian_blobs(n_per_class: int, n_classes: int = 10, size: int = 16, channels: int = 1,
                   noise: float = 0.02, amplitude: float = 0.15, jitter: float = 0.3, seed: int = 0):
    """Synthetic labelled images built from smooth class templates.

    Each class is mid-grey plus three Gaussian bumps of random position, width
    and signed ``amplitude``. A sample rescales its template's contrast by
    ``1 + jitter * u`` and shifts its brightness by ``jitter * u / 3``
    (``u`` uniform in ``[-1, 1]``), then adds pixel noise of std ``noise``.

    Returns ``(images, labels)`` with images as an ``(n, size, size, channels)`` array in ``[0, 1]``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    templates = []
    for _ in range(n_classes):
        t = np.zeros((size, size, channels))
        for _ in range(3):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            width = rng.uniform(0.12, 0.3)
            amp = rng.uniform(-amplitude, amplitude, size=channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            t += bump[:, :, None] * amp
        templates.append(t)
    images, labels = [], []
    for k in range(n_classes):
        for _ in range(n_per_class):
            contrast = 1 + jitter * rng.uniform(-1, 1)
            brightness = jitter * rng.uniform(-1, 1) / 3
            img = 0.5 + brightness + contrast * templates[k] + noise * rng.standard_normal((size, size, channels))
            images.append(np.clip(img, 0, 1))
            labels.append(k)
    order = rng.permutation(len(labels))
    return np.asarray(images)[order], np.asarray(labels)[order]


def digits_dataset(size: int = 16):
    """scikit-learn's 8x8 handwritten digits (10 classes), upsampled to ``size x size`` in ``[0, 1]``."""
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    digits = load_digits()
    imgs = digits.images / 16.0
    if size != 8:
        imgs = np.stack([np.clip(zoom(im, size / 8, order=1), 0, 1) for im in imgs])
    return imgs[:, :, :, None], digits.target.astype(np.int64)


def read_cifar_binary(path, limit: int | None = None):
    """CIFAR-10 binary batch: records of 1 label byte + 3072 channel-planar pixel bytes."""
    try:
        raw = np.fromfile(Path(path), dtype=np.uint8)
    except OSError as exc:
        raise D3IOError(f"cannot read {path}: {exc}") from exc
    if raw.size % 3073:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of 3073")
    rec = raw.reshape(-1, 3073)
    if limit is not None:
        rec = rec[:limit]
    labels = rec[:, 0].astype(np.int64)
    imgs = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    return imgs, labels


def _instance_bases(n_classes: int, span: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    if n_classes > len(DESK_SOURCES):
        raise ValueError(f"at most {len(DESK_SOURCES)} classes available, got {n_classes}")
    bases = []
    for name in DESK_SOURCES[:n_classes]:
        src = _source(name, True)
        while True:
            r = int(rng.integers(src.shape[0] - span + 1))
            c = int(rng.integers(src.shape[1] - span + 1))
            crop = src[r:r + span, c:c + span]
            if crop.mean() > 0.15 and crop.std() > 0.05:
                bases.append(crop)
                break
    return bases


def desk_instances(n: int, n_classes: int = 10, size: int = 32, shift: int = 8, jitter: float = 0.4,
                   noise: float = 0.1, seed: int = 0, base_seed: int = 0):
    """Instance recognition on photo crops: class ``k`` is one fixed region of the
    ``k``-th sample photograph.

    The class regions depend only on ``base_seed``, so train and test splits
    drawn with different ``seed`` values share them. Each sample is the region
    shifted by up to ``shift`` pixels, with contrast scaled by ``1 + jitter * u``,
    brightness moved by ``jitter * u / 3`` (``u`` uniform in ``[-1, 1]``) and
    Gaussian pixel noise of std ``noise``, clipped to ``[0, 1]``.
    """
    bases = _instance_bases(n_classes, size + shift, base_seed)
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for _ in range(n):
        k = int(rng.integers(n_classes))
        dr, dc = rng.integers(shift + 1, size=2)
        img = bases[k][dr:dr + size, dc:dc + size]
        m = img.mean()
        img = (m + (img - m) * (1 + jitter * rng.uniform(-1, 1)) + jitter / 3 * rng.uniform(-1, 1)
               + noise * rng.standard_normal(img.shape))
        images.append(np.clip(img, 0, 1)[:, :, None])
        labels.append(k)
    return np.asarray(images), np.asarray(labels, dtype=np.int64)
