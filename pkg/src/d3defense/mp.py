"""Level-indexed matching pursuit (one dictionary per sparsity level) and the
full divide / denoise / merge image transform built on it."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .dictionary import Dictionary, DictionarySet, correlate
from .errors import DimensionError
from .patches import as_image, default_stride, extract_patches, merge_patches

# Pixels are centred before patch coding so that patch vectors are signed.
PIXEL_OFFSET = 0.5


@dataclass(frozen=True)
class Deterministic:
    pass


@dataclass(frozen=True)
class Randomized:
    """Sample ``ceil(eta * subsample_fraction)`` atoms, then pick uniformly among the
    ``top_k`` most correlated of them. Redrawn at every level."""

    subsample_fraction: float = 0.2
    top_k: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError(f"subsample_fraction must be in (0, 1], got {self.subsample_fraction}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")


SelectionMode = Union[Deterministic, Randomized]


@dataclass(frozen=True)
class DenoiseConfig:
    kappa: int | None = None  # None: every level of the dictionary set
    mode: SelectionMode = field(default_factory=Deterministic)
    stride: int | None = None  # None: patch_size // 4
    mr_delta: float = 1e-4

    def resolve_kappa(self, dset: DictionarySet) -> int:
        kappa = dset.kappa if self.kappa is None else self.kappa
        if not 1 <= kappa <= dset.kappa:
            raise DimensionError(f"kappa {kappa} outside 1..{dset.kappa} available levels")
        return kappa

    def resolve_stride(self, patch_size: int) -> int:
        return default_stride(patch_size) if self.stride is None else self.stride

    def deterministic(self) -> "DenoiseConfig":
        return replace(self, mode=Deterministic())


def patch_rng(seed: int, patch_index: int) -> np.random.Generator:
    return np.random.default_rng(seed ^ patch_index)


def _randomized_choice(a: np.ndarray, mode: Randomized, draws: np.ndarray) -> int:
    """Atom index picked from correlations ``a`` with ``draws`` = ``eta + 1`` uniforms.

    The first ``eta`` uniforms order the atoms for subsampling, the last one
    picks among the top-k survivors.
    """
    eta = a.shape[0]
    m = max(1, math.ceil(eta * mode.subsample_fraction - 1e-9))
    subset = np.argsort(draws[:eta], kind="stable")[:m]
    order = np.lexsort((subset, -np.abs(a[subset])))
    k = min(mode.top_k, m)
    return int(subset[order[int(draws[eta] * k)]])


def select_atom(dictionary: Dictionary, residual, mode: SelectionMode = Deterministic(), rng=None):
    """Pick one atom for ``residual``; returns ``(index, coefficient)``.

    Deterministic mode takes ``argmax |<residual, s_k>|`` with the lowest index
    winning exact ties. Randomized mode consumes exactly ``eta + 1`` uniforms
    from ``rng``. A zero residual always yields ``(0, 0.0)``.
    """
    if dictionary.eta == 0:
        raise DimensionError("empty dictionary")
    a = correlate(dictionary, residual)
    if isinstance(mode, Randomized):
        if rng is None:
            rng = np.random.default_rng(mode.seed)
        draws = rng.random(dictionary.eta + 1)
        if not a.any():
            return 0, 0.0
        idx = _randomized_choice(a, mode, draws)
    else:
        idx = int(np.argmax(np.abs(a)))
    return idx, float(a[idx])


def mp_denoise_patch(dset: DictionarySet, p, cfg: DenoiseConfig = DenoiseConfig(), rng=None):
    """Reconstruct one patch with one atom from each of the first ``kappa`` levels.

    Returns ``(q, trace)`` where ``trace`` lists ``(level, atom_index, coefficient)``.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (dset.atom_dim,):
        raise DimensionError(f"patch shape {p.shape} != ({dset.atom_dim},)")
    kappa = cfg.resolve_kappa(dset)
    if isinstance(cfg.mode, Randomized) and rng is None:
        rng = np.random.default_rng(cfg.mode.seed)
    q = np.zeros_like(p)
    residual = p.copy()
    trace = []
    for level in range(1, kappa + 1):
        d = dset[level]
        idx, coef = select_atom(d, residual, cfg.mode, rng)
        q += coef * d.atom(idx)
        residual -= coef * d.atom(idx)
        trace.append((level, idx, coef))
    return q, trace


@dataclass(frozen=True)
class BatchResult:
    q: np.ndarray  # (n, atom_dim)
    indices: np.ndarray  # (n, kappa)
    coefficients: np.ndarray  # (n, kappa)


def mp_denoise_batch(dset: DictionarySet, patches, cfg: DenoiseConfig = DenoiseConfig(),
                     index_offset: int = 0) -> BatchResult:
    """``mp_denoise_patch`` over the rows of ``patches``.

    In randomized mode patch ``j`` draws from ``patch_rng(seed, index_offset + j)``,
    so the result equals calling ``mp_denoise_patch`` row by row with those
    generators.
    """
    R = np.array(patches, dtype=np.float64, ndmin=2)
    if R.shape[1] != dset.atom_dim:
        raise DimensionError(f"patch dimension {R.shape[1]} != atom dimension {dset.atom_dim}")
    kappa = cfg.resolve_kappa(dset)
    n = R.shape[0]
    Q = np.zeros_like(R)
    indices = np.zeros((n, kappa), dtype=np.int64)
    coefs = np.zeros((n, kappa))
    rows = np.arange(n)
    rngs = None
    if isinstance(cfg.mode, Randomized):
        rngs = [patch_rng(cfg.mode.seed, index_offset + j) for j in range(n)]
    for li in range(kappa):
        d = dset[li + 1]
        a = R @ d.matrix
        if rngs is None:
            idx = np.argmax(np.abs(a), axis=1)
        else:
            idx = np.zeros(n, dtype=np.int64)
            for j in range(n):
                draws = rngs[j].random(d.eta + 1)
                if a[j].any():
                    idx[j] = _randomized_choice(a[j], cfg.mode, draws)
        c = a[rows, idx]
        c[~a.any(axis=1)] = 0.0
        step = c[:, None] * d.matrix[:, idx].T
        Q += step
        R -= step
        indices[:, li] = idx
        coefs[:, li] = c
    return BatchResult(Q, indices, coefs)


def transform_patches(dset: DictionarySet, patches, cfg: DenoiseConfig = DenoiseConfig(),
                      index_offset: int = 0) -> np.ndarray:
    """Per-patch transform on raw ``[0, 1]`` patch vectors (centred internally)."""
    res = mp_denoise_batch(dset, np.asarray(patches, dtype=np.float64) - PIXEL_OFFSET, cfg, index_offset)
    return res.q + PIXEL_OFFSET


def denoise_image(dset: DictionarySet, img, cfg: DenoiseConfig = DenoiseConfig()) -> np.ndarray:
    """Divide into overlapping patches, denoise each, and average them back."""
    img = as_image(img)
    if img.shape[2] != dset.channels:
        raise DimensionError(f"image has {img.shape[2]} channels, dictionary expects {dset.channels}")
    P = dset.patch_size
    grid = extract_patches(img, P, cfg.resolve_stride(P))
    out = grid.with_patches(transform_patches(dset, grid.patches, cfg))
    return merge_patches(out, img.shape[0], img.shape[1], fill=img)


def relative_residual(x, y) -> float:
    """``||x - y|| / ||x||``."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.linalg.norm(x - np.asarray(y, dtype=np.float64)) / np.linalg.norm(x))

