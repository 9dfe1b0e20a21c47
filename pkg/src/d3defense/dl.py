"""Greedy dictionary construction from salient, mutually diverse patches.

Level 1 admits normalized image patches. Level ``i > 1`` admits normalized
residuals ``s - MP(levels < i, s)``. A candidate is admitted when its best
one-atom approximation from the atoms admitted so far at that level leaves a
relative residual above ``epsilon``, i.e. it sits more than ``arcsin(epsilon)``
away from every existing atom.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .dictionary import Dictionary, DictionarySet
from .errors import DimensionError, LearningError
from .mp import PIXEL_OFFSET, DenoiseConfig, mp_denoise_batch
from .patches import as_image
from .saliency import check_saliency, uniform_saliency

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LearnConfig:
    patch_size: int
    eta: int | tuple = 256  # one value for every level, or one per level
    kappa: int = 1
    epsilon: float = 0.85
    max_attempts: int | None = None  # per level; default 200 * eta
    seed: int = 0
    channels: int | None = None  # None: taken from the corpus

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")
        etas = self.etas()
        if any(e < 1 for e in etas):
            raise ValueError(f"eta must be >= 1, got {self.eta}")
        if self.max_attempts is not None and self.max_attempts < max(etas):
            raise ValueError(f"max_attempts {self.max_attempts} < eta {max(etas)}")

    def etas(self) -> tuple:
        if isinstance(self.eta, int):
            return (self.eta,) * self.kappa
        etas = tuple(int(e) for e in self.eta)
        if len(etas) != self.kappa:
            raise ValueError(f"{len(etas)} eta values given for kappa={self.kappa}")
        return etas

    def attempts_for(self, eta: int) -> int:
        return 200 * eta if self.max_attempts is None else self.max_attempts


@dataclass(frozen=True)
class Admission:
    """Where an admitted atom came from."""

    level: int
    image_index: int
    row: int
    col: int


@dataclass
class LevelStats:
    level: int
    admitted: int = 0
    rejected: int = 0
    skipped: int = 0  # zero candidates
    attempts: int = 0

    def as_dict(self):
        return dict(level=self.level, admitted=self.admitted, rejected=self.rejected,
                    skipped=self.skipped, attempts=self.attempts)


@dataclass
class LearnResult:
    dictionaries: DictionarySet
    admissions: list = field(default_factory=list)
    stats: list = field(default_factory=list)

    def report(self) -> dict:
        return {
            "patch_size": self.dictionaries.patch_size,
            "channels": self.dictionaries.channels,
            "kappa": self.dictionaries.kappa,
            "epsilon": self.dictionaries.epsilon,
            "seed": self.dictionaries.seed,
            "corpus_hash": self.dictionaries.corpus_hash.hex(),
            "levels": [s.as_dict() for s in self.stats],
        }


def admission_ratio(atoms, candidate) -> float:
    """Relative residual of ``candidate`` after one deterministic MP step on ``atoms``.

    ``atoms`` is an ``(atom_dim, k)`` matrix, a :class:`Dictionary`, or ``None``;
    an empty dictionary gives 1.
    """
    if isinstance(atoms, Dictionary):
        atoms = atoms.matrix
    c = np.asarray(candidate, dtype=np.float64)
    norm = np.linalg.norm(c)
    if atoms is None or atoms.shape[1] == 0:
        return 1.0
    a = c @ atoms
    l = int(np.argmax(np.abs(a)))
    return float(np.linalg.norm(c - a[l] * atoms[:, l]) / norm)


def admission_test(atoms, candidate, epsilon: float) -> bool:
    """True iff ``candidate`` is more than ``arcsin(epsilon)`` from its best single atom."""
    return admission_ratio(atoms, candidate) > epsilon


def window_weights(img, weights, patch_size: int, offset: float = 0.0) -> np.ndarray:
    """Saliency mass of every stride-1 window, ``(H-P+1, W-P+1)``.

    Windows whose patch equals ``offset`` everywhere (zero vectors after
    centring) get weight 0. If no window has positive mass the weights fall back
    to uniform over the non-zero windows.
    """
    img = as_image(img)
    w = check_saliency(weights, img.shape)
    P = patch_size
    if not 1 <= P <= min(img.shape[:2]):
        raise DimensionError(f"patch size {P} does not fit image of shape {img.shape}")
    mass = _box_sum(w, P)
    energy = _box_sum(((img - offset) ** 2).sum(axis=2), P)
    nonzero = energy > 0
    mass = np.where(nonzero, mass, 0.0)
    if not np.any(mass > 0) and nonzero.any():
        log.warning("saliency map has no mass on any non-zero window; sampling uniformly")
        mass = nonzero.astype(np.float64)
    return mass


def _box_sum(a: np.ndarray, P: int) -> np.ndarray:
    c = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    c[1:, 1:] = a.cumsum(0).cumsum(1)
    return c[P:, P:] - c[:-P, P:] - c[P:, :-P] + c[:-P, :-P]


class PatchSampler:
    """Importance sampler over the windows of one image."""

    def __init__(self, img, weights, patch_size: int, offset: float = 0.0):
        self.img = as_image(img)
        self.patch_size = patch_size
        self.offset = offset
        mass = window_weights(self.img, weights, patch_size, offset)
        self.cols = mass.shape[1]
        self.cdf = np.cumsum(mass.ravel())

    @property
    def empty(self) -> bool:
        return self.cdf[-1] <= 0

    def draw_index(self, rng) -> tuple[int, int]:
        u = rng.random() * self.cdf[-1]
        k = int(np.searchsorted(self.cdf, u, side="right"))
        k = min(k, self.cdf.size - 1)
        return divmod(k, self.cols)

    def patch_at(self, r: int, c: int) -> np.ndarray:
        P = self.patch_size
        return self.img[r:r + P, c:c + P].reshape(-1) - self.offset

    def draw(self, rng):
        """``(vector, (row, col))``, or ``None`` if the image has no usable window."""
        if self.empty:
            return None
        r, c = self.draw_index(rng)
        return self.patch_at(r, c), (r, c)


def sample_patch(img, weights, patch_size: int, rng, offset: float = 0.0):
    """Draw one patch vector with probability proportional to its window's saliency mass."""
    out = PatchSampler(img, weights, patch_size, offset).draw(rng)
    if out is None:
        raise DimensionError("image has no non-zero patch to sample")
    return out[0]


def corpus_hash(corpus) -> bytes:
    h = hashlib.sha256()
    for img in corpus:
        img = as_image(img)
        h.update(np.asarray(img.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(img, dtype="<f8").tobytes())
    return h.digest()[:8]


def build_dictionaries(corpus, saliency=uniform_saliency, cfg: LearnConfig = None,
                       image_ids=None) -> LearnResult:
    """Run the greedy builder and keep the admission log and per-level counts."""
    if cfg is None:
        raise ValueError("a LearnConfig is required")
    corpus = [as_image(img) for img in corpus]
    if not corpus:
        raise DimensionError("empty corpus")
    P = cfg.patch_size
    channels = cfg.channels or corpus[0].shape[2]
    for i, img in enumerate(corpus):
        if min(img.shape[:2]) < P:
            raise DimensionError(f"corpus image {i} of shape {img.shape} is smaller than patch size {P}")
        if img.shape[2] != channels:
            raise DimensionError(f"corpus image {i} has {img.shape[2]} channels, expected {channels}")
    if image_ids is None:
        image_ids = [str(i) for i in range(len(corpus))]

    rng = np.random.default_rng(cfg.seed)
    samplers = {}

    def sampler(k):
        if k not in samplers:
            samplers[k] = PatchSampler(corpus[k], saliency(corpus[k], image_ids[k]), P, PIXEL_OFFSET)
        return samplers[k]

    dim = P * P * channels
    levels: list[Dictionary] = []
    admissions: list[Admission] = []
    all_stats: list[LevelStats] = []
    det = DenoiseConfig()
    for level, eta in enumerate(cfg.etas(), start=1):
        stats = LevelStats(level)
        atoms = np.zeros((dim, eta))
        prefix = DictionarySet(P, channels, tuple(levels)) if levels else None
        last_ratio = float("nan")
        max_attempts = cfg.attempts_for(eta)
        while stats.admitted < eta:
            if stats.attempts >= max_attempts:
                raise LearningError(
                    f"level {level}: only {stats.admitted}/{eta} atoms admitted after {stats.attempts} "
                    f"attempts (rejection rate {stats.rejected / max(stats.attempts, 1):.3f}, last rejected "
                    f"residual ratio {last_ratio:.4f}); corpus too homogeneous or epsilon too large"
                )
            stats.attempts += 1
            k = int(rng.integers(len(corpus)))
            drawn = sampler(k).draw(rng)
            if drawn is None:
                stats.skipped += 1
                continue
            s, (r, c) = drawn
            cand = s if prefix is None else s - mp_denoise_batch(prefix, s, det).q[0]
            norm = np.linalg.norm(cand)
            if norm <= 1e-12 * max(np.linalg.norm(s), 1.0):
                stats.skipped += 1
                continue
            # test the stored (float32) form so the saved atoms satisfy the rule exactly
            unit = (cand / norm).astype(np.float32).astype(np.float64)
            ratio = admission_ratio(atoms[:, :stats.admitted], unit)
            if ratio > cfg.epsilon:
                atoms[:, stats.admitted] = unit
                stats.admitted += 1
                admissions.append(Admission(level, k, r, c))
            else:
                stats.rejected += 1
                last_ratio = ratio
        log.info("level %d: admitted %d atoms in %d attempts", level, eta, stats.attempts)
        levels.append(Dictionary(atoms, level))
        all_stats.append(stats)

    dset = DictionarySet(P, channels, tuple(levels), float(cfg.epsilon), corpus_hash(corpus), int(cfg.seed))
    return LearnResult(dset, admissions, all_stats)


def learn_dictionaries(corpus, saliency=uniform_saliency, cfg: LearnConfig = None, image_ids=None) -> DictionarySet:
    return build_dictionaries(corpus, saliency, cfg, image_ids).dictionaries
