"""Proxy metrics: matching rate (robustness) and reconstruction error (fidelity)."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .dictionary import DictionarySet
from .dl import LearnConfig, build_dictionaries
from .errors import D3Error, DimensionError
from .mp import DenoiseConfig, denoise_image, transform_patches
from .patches import as_image, extract_patches
from .saliency import uniform_saliency

log = logging.getLogger(__name__)

DEFAULT_SAMPLE = 500


@dataclass(frozen=True)
class MetricsReport:
    mr: float
    re: float
    n_images: int
    n_patches_per_image: int
    delta: float
    fingerprint: str

    @property
    def quality(self) -> float:
        """``1 - RE``."""
        return 1.0 - self.re

    def as_dict(self) -> dict:
        d = asdict(self)
        d["quality"] = self.quality
        return d


def config_fingerprint(dset: DictionarySet, cfg: DenoiseConfig) -> str:
    h = hashlib.sha256()
    h.update(dset.fingerprint().encode())
    h.update(repr(cfg).encode())
    return h.hexdigest()[:16]


def patch_match_fraction(dset: DictionarySet, cfg: DenoiseConfig, clean, noisy, delta: float,
                         deterministic: bool = True) -> tuple[float, int]:
    """Fraction of patch positions whose transforms agree within ``delta`` in l-inf."""
    clean, noisy = as_image(clean), as_image(noisy)
    if clean.shape != noisy.shape:
        raise DimensionError(f"clean shape {clean.shape} != perturbed shape {noisy.shape}")
    if deterministic:
        cfg = cfg.deterministic()
    P = dset.patch_size
    stride = cfg.resolve_stride(P)
    tc = transform_patches(dset, extract_patches(clean, P, stride).patches, cfg)
    tn = transform_patches(dset, extract_patches(noisy, P, stride).patches, cfg)
    same = np.max(np.abs(tc - tn), axis=1) <= delta
    return float(same.mean()), int(same.size)


def matching_rate(dset: DictionarySet, cfg: DenoiseConfig, pairs, delta: float | None = None,
                  deterministic: bool = True) -> float:
    """Mean over image pairs of the per-image patch matching fraction."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("matching rate needs at least one (clean, perturbed) pair")
    delta = cfg.mr_delta if delta is None else delta
    return float(np.mean([patch_match_fraction(dset, cfg, c, n, delta, deterministic)[0] for c, n in pairs]))


def reconstruction_error(dset: DictionarySet, cfg: DenoiseConfig, images) -> float:
    """Mean of ``||x - T(x)|| / ||x||`` with the deterministic transform."""
    cfg = cfg.deterministic()
    errs = []
    for i, img in enumerate(images):
        img = as_image(img)
        norm = np.linalg.norm(img)
        if norm == 0:
            log.warning("image %d has zero norm; skipped in reconstruction error", i)
            continue
        errs.append(np.linalg.norm(img - denoise_image(dset, img, cfg)) / norm)
    if not errs:
        raise ValueError("reconstruction error needs at least one non-zero image")
    return float(np.mean(errs))


def evaluate_metrics(dset: DictionarySet, cfg: DenoiseConfig, images, pairs,
                     delta: float | None = None) -> MetricsReport:
    images = list(images)
    pairs = list(pairs)
    delta = cfg.mr_delta if delta is None else delta
    mr = matching_rate(dset, cfg, pairs, delta)
    re = reconstruction_error(dset, cfg, images)
    probe = as_image(pairs[0][0])
    n_patches = extract_patches(probe, dset.patch_size, cfg.resolve_stride(dset.patch_size)).n_patches
    return MetricsReport(mr, re, len(images), n_patches, delta, config_fingerprint(dset, cfg))


def noise_pairs(images, budget: float = 0.06, seed: int = 0):
    """Pair each image with a random-sign perturbation of relative l2 norm ``budget``."""
    rng = np.random.default_rng(seed)
    pairs = []
    for img in images:
        img = as_image(img)
        v = rng.choice([-1.0, 1.0], size=img.shape)
        v *= budget * np.linalg.norm(img) / np.linalg.norm(v)
        pairs.append((img, img + v))
    return pairs


SWEEP_AXES = ("kappa", "patch_size", "epsilon")


def metric_sweep(images, pairs, axis: str, values, cfg: DenoiseConfig = DenoiseConfig(), *,
                 dset: DictionarySet | None = None, corpus=None, learn_cfg: LearnConfig | None = None,
                 saliency=uniform_saliency, delta: float | None = None, pair_factory=None):
    """One row per swept value with ``mr``, ``re``, ``quality`` or an ``error`` entry.

    A ``kappa`` sweep reuses ``dset``; ``patch_size`` and ``epsilon`` sweeps
    rebuild dictionaries from ``corpus`` with ``learn_cfg`` per point. A failing
    point is recorded and the sweep continues.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    images = list(images)
    pairs = list(pairs) if pairs is not None else None
    rows = []
    for value in values:
        row = {"axis": axis, "value": value}
        try:
            if axis == "kappa":
                if dset is None:
                    raise ValueError("kappa sweep needs a dictionary set")
                point_set, point_cfg = dset, replace(cfg, kappa=int(value))
            else:
                if corpus is None or learn_cfg is None:
                    raise ValueError(f"{axis} sweep needs a corpus and a learn config")
                if axis == "patch_size":
                    lc = replace(learn_cfg, patch_size=int(value))
                    point_cfg = replace(cfg, stride=None)
                else:
                    lc = replace(learn_cfg, epsilon=float(value))
                    point_cfg = cfg
                point_set = build_dictionaries(corpus, saliency, lc).dictionaries
            point_pairs = pairs if pair_factory is None else pair_factory(point_set)
            report = evaluate_metrics(point_set, point_cfg, images, point_pairs, delta)
            row.update(report.as_dict())
        except (D3Error, ValueError) as exc:
            log.warning("sweep point %s=%s failed: %s", axis, value, exc)
            row.update(mr=math.nan, re=math.nan, quality=math.nan, error=str(exc))
        rows.append(row)
    return rows
