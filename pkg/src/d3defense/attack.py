"""Desk-scale attack harness: numpy toy classifiers, FGSM, DeepFool, and defense
evaluation under black-, grey- and white-box (BPDA-style) threat models."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import D3IOError, DimensionError, FormatError, TrainingError
from .mp import DenoiseConfig, Randomized, denoise_image

log = logging.getLogger(__name__)

MODEL_MAGIC = b"D3MODL01"
_ARCH_TAGS = {"linear": 0, "mlp": 1}


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ToyClassifier:
    """Linear (``W1 x + b1``) or one-hidden-layer tanh MLP (``W2 tanh(W1 x + b1) + b2``)."""

    arch: str
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None

    @classmethod
    def init(cls, arch: str, n_inputs: int, n_classes: int, hidden: int = 64, seed: int = 0) -> "ToyClassifier":
        if arch not in _ARCH_TAGS:
            raise ValueError(f"unknown architecture {arch!r}")
        rng = np.random.default_rng(seed)
        if arch == "linear":
            return cls(arch, rng.normal(0, 0.01, (n_classes, n_inputs)), np.zeros(n_classes))
        return cls(arch,
                   rng.normal(0, 1 / np.sqrt(n_inputs), (hidden, n_inputs)), np.zeros(hidden),
                   rng.normal(0, 1 / np.sqrt(hidden), (n_classes, hidden)), np.zeros(n_classes))

    @property
    def n_inputs(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return (self.W1 if self.arch == "linear" else self.W2).shape[0]

    @property
    def hidden(self) -> int:
        return 0 if self.arch == "linear" else self.W1.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1] if self.arch == "linear" else [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "ToyClassifier":
        return ToyClassifier(self.arch, *[p.copy() for p in self.params()])

    def _flat(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1) if x.size == self.n_inputs else x.reshape(x.shape[0], -1)
        if flat.shape[-1] != self.n_inputs:
            raise DimensionError(f"input has {flat.shape[-1]} values, model expects {self.n_inputs}")
        return flat

    def logits(self, x) -> np.ndarray:
        """Logits for one input (any shape with ``n_inputs`` values) or a batch."""
        x = self._flat(x)
        z = x @ self.W1.T + self.b1
        if self.arch == "linear":
            return z
        return np.tanh(z) @ self.W2.T + self.b2

    def predict(self, x) -> np.ndarray | int:
        out = np.argmax(self.logits(x), axis=-1)
        return int(out) if np.ndim(out) == 0 else out

    def logit_jacobian(self, x) -> np.ndarray:
        """``d logits / d x`` for a single input, shape ``(n_classes, n_inputs)``."""
        x = self._flat(x)
        if x.ndim != 1:
            raise DimensionError("logit_jacobian takes a single input")
        if self.arch == "linear":
            return self.W1.copy()
        h = np.tanh(self.W1 @ x + self.b1)
        return (self.W2 * (1 - h ** 2)) @ self.W1

    def loss(self, x, label) -> float:
        """Softmax cross-entropy of a single input."""
        z = self.logits(x)
        z = z - z.max()
        return float(np.log(np.exp(z).sum()) - z[label])

    def input_gradient(self, x, label) -> np.ndarray:
        """``d loss / d x`` in the shape of ``x``."""
        x = np.asarray(x, dtype=np.float64)
        p = _softmax(self.logits(x))
        p[label] -= 1.0
        return (p @ self.logit_jacobian(x)).reshape(x.shape)

    def batch_grads(self, X: np.ndarray, y: np.ndarray):
        """Mean cross-entropy over a batch and its parameter gradients."""
        n = X.shape[0]
        z1 = X @ self.W1.T + self.b1
        if self.arch == "linear":
            logits = z1
        else:
            h = np.tanh(z1)
            logits = h @ self.W2.T + self.b2
        p = _softmax(logits)
        loss = float(-np.log(p[np.arange(n), y] + 1e-300).mean())
        g = p
        g[np.arange(n), y] -= 1.0
        g /= n
        if self.arch == "linear":
            return loss, [g.T @ X, g.sum(0)]
        gW2, gb2 = g.T @ h, g.sum(0)
        gz = (g @ self.W2) * (1 - h ** 2)
        return loss, [gz.T @ X, gz.sum(0), gW2, gb2]


def train_toy(images, labels, arch: str = "mlp", epochs: int = 30, lr: float = 1e-2, seed: int = 0,
              hidden: int = 64, batch_size: int = 64, weight_decay: float = 1e-4,
              init: ToyClassifier | None = None) -> ToyClassifier:
    """Adam on softmax cross-entropy, optionally fine-tuning a copy of ``init``.

    Weights are rounded to float32 at the end so that a model file round trip
    is exact.
    """
    X = np.asarray(images, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    y = np.asarray(labels, dtype=np.int64)
    n_classes = int(y.max()) + 1
    if n_classes < 2 or len(np.unique(y)) < 2:
        raise ValueError("training needs at least two classes")
    if init is not None:
        if init.n_inputs != X.shape[1] or init.n_classes < n_classes:
            raise DimensionError("initial model does not match the training data")
        model = init.copy()
    else:
        model = ToyClassifier.init(arch, X.shape[1], n_classes, hidden, seed)
    rng = np.random.default_rng(seed + 1)
    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, step = 0.9, 0.999, 0
    for epoch in range(epochs):
        order = rng.permutation(X.shape[0])
        total = 0.0
        for start in range(0, X.shape[0], batch_size):
            idx = order[start:start + batch_size]
            loss, grads = model.batch_grads(X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}; try a smaller learning rate (lr={lr})")
            total += loss * len(idx)
            step += 1
            for p, g, mi, vi in zip(params, grads, m, v):
                if p.ndim == 2:
                    g = g + weight_decay * p
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                p -= lr * (mi / (1 - b1 ** step)) / (np.sqrt(vi / (1 - b2 ** step)) + 1e-8)
        log.info("epoch %d: loss %.5f", epoch, total / X.shape[0])
    for p in params:
        p[...] = p.astype(np.float32)
    return model


def accuracy(model: ToyClassifier, images, labels) -> float:
    X = np.asarray(images, dtype=np.float64)
    return float(np.mean(model.predict(X.reshape(X.shape[0], -1)) == np.asarray(labels)))


def save_model(model: ToyClassifier, path) -> None:
    """``D3MODL01``, u32 arch tag, u32 inputs, u32 classes, u32 hidden, then f32 weights."""
    parts = [MODEL_MAGIC, struct.pack("<4I", _ARCH_TAGS[model.arch], model.n_inputs, model.n_classes, model.hidden)]
    parts += [p.astype("<f4").tobytes() for p in model.params()]
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise D3IOError(f"cannot write model {path}: {exc}") from exc


def load_model(path) -> ToyClassifier:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise D3IOError(f"cannot read model {path}: {exc}") from exc
    if buf[:8] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    if len(buf) < 24:
        raise FormatError(f"{path}: truncated header")
    tag, d, k, h = struct.unpack("<4I", buf[8:24])
    arch = {v: a for a, v in _ARCH_TAGS.items()}.get(tag)
    if arch is None:
        raise FormatError(f"{path}: unknown architecture tag {tag}")
    shapes = [(k, d), (k,)] if arch == "linear" else [(h, d), (h,), (k, h), (k,)]
    need = 24 + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(buf) != need:
        raise FormatError(f"{path}: payload is {len(buf)} bytes, expected {need}")
    arrays, pos = [], 24
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(s).astype(np.float64))
        pos += 4 * n
    return ToyClassifier(arch, *arrays)


# attacks ------------------------------------------------------------------

DEFAULT_BUDGET = 0.06
ATTACKER_SEED_OFFSET = 1_000_003


def scale_to_budget(v, x, budget: float) -> np.ndarray:
    """Rescale ``v`` so that ``||v|| / ||x|| = budget``; zero stays zero."""
    v = np.asarray(v, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0:
        return np.zeros_like(v)
    return v * (budget * np.linalg.norm(x) / nv)


def fgsm(model: ToyClassifier, x, label: int, budget: float = DEFAULT_BUDGET, grad_at=None) -> np.ndarray:
    """Sign of the loss gradient, scaled to relative l2 norm ``budget``.

    ``grad_at`` evaluates the gradient at another point (BPDA); the norm is
    always relative to ``x``. The result is not clamped.
    """
    x = np.asarray(x, dtype=np.float64)
    g = model.input_gradient(x if grad_at is None else grad_at, label)
    s = np.sign(g)
    if not s.any():
        log.warning("zero loss gradient; FGSM returns a zero perturbation")
        return np.zeros_like(x)
    return scale_to_budget(s, x, budget)


@dataclass(frozen=True)
class DeepFoolResult:
    v: np.ndarray  # after overshoot
    raw: np.ndarray  # accumulated steps before overshoot
    iterations: int
    flipped: bool
    original_label: int


def deepfool(model: ToyClassifier, x, max_iter: int = 50, overshoot: float = 0.02) -> DeepFoolResult:
    """Iteratively step to the nearest linearized decision boundary until the label flips.

    The flip is checked at ``x + (1 + overshoot) r`` after every step.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    label = model.predict(flat)
    r = np.zeros(x.size)
    it = 0
    flipped = False
    while it < max_iter:
        point = flat + r
        z = model.logits(point)
        J = model.logit_jacobian(point)
        w = J - J[label]
        f = z - z[label]
        wn = np.linalg.norm(w, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(f) / wn
        dist[label] = np.inf
        dist[wn == 0] = np.inf
        k = int(np.argmin(dist))
        if not np.isfinite(dist[k]):
            break
        r = r + (np.abs(f[k]) / wn[k] ** 2) * w[k]
        it += 1
        if model.predict(flat + (1 + overshoot) * r) != label:
            flipped = True
            break
    return DeepFoolResult(((1 + overshoot) * r).reshape(x.shape), r.reshape(x.shape), it, flipped, label)


def fgsm_flip_budget(model: ToyClassifier, x, label: int, hi: float = 4.0, tol: float = 1e-6):
    """Smallest FGSM budget that changes the prediction (bisection); ``None`` if ``hi`` does not."""
    x = np.asarray(x, dtype=np.float64)
    if model.predict(x + fgsm(model, x, label, hi)) == label:
        return None
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if model.predict(x + fgsm(model, x, label, mid)) == label:
            lo = mid
        else:
            hi = mid
    return hi


# defense evaluation -------------------------------------------------------

class ThreatModel(str, Enum):
    BLACK = "black"
    GREY = "grey"
    WHITE = "white"


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "fgsm"  # "fgsm" | "deepfool"
    budget: float = DEFAULT_BUDGET
    max_iter: int = 50
    overshoot: float = 0.02

    def __post_init__(self):
        if self.kind not in ("fgsm", "deepfool"):
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.budget < 0:
            raise ValueError(f"budget must be >= 0, got {self.budget}")


def perturbation(model: ToyClassifier, x, label: int, attack: AttackSpec, grad_at=None) -> np.ndarray:
    """Attack direction scaled to the relative l2 budget (relative to ``x``).

    With ``grad_at`` (single-step BPDA) the attack is computed on the model at
    ``grad_at`` instead of ``x``; the caller adds the result to ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if attack.budget == 0:
        return np.zeros_like(x)
    if attack.kind == "fgsm":
        return fgsm(model, x, label, attack.budget, grad_at)
    point = x if grad_at is None else np.asarray(grad_at, dtype=np.float64).reshape(x.shape)
    res = deepfool(model, point, attack.max_iter, attack.overshoot)
    return scale_to_budget(res.v, x, attack.budget)


@dataclass(frozen=True)
class DefenseReport:
    clean: float  # model(T(x))
    attacked_no_defense: float  # model(x + v_undefended)
    attacked_with_defense: float  # model(T(x + v))
    clean_no_defense: float  # model(x)
    n: int

    def as_dict(self) -> dict:
        return dict(clean=self.clean, attacked_no_defense=self.attacked_no_defense,
                    attacked_with_defense=self.attacked_with_defense,
                    clean_no_defense=self.clean_no_defense, n=self.n)


def _per_image_cfg(cfg: DenoiseConfig, seed: int) -> DenoiseConfig:
    if isinstance(cfg.mode, Randomized):
        return replace(cfg, mode=replace(cfg.mode, seed=seed))
    return cfg


def evaluate_defense(model: ToyClassifier, dset, cfg: DenoiseConfig, images, labels,
                     attack: AttackSpec = AttackSpec(), threat: ThreatModel | str = ThreatModel.GREY,
                     surrogate: ToyClassifier | None = None, seed: int = 0,
                     undefended_model: ToyClassifier | None = None) -> DefenseReport:
    """Accuracy of ``model`` behind the transform T, with and without an attack.

    * grey: ``v`` from ``model`` gradients at ``x``.
    * white: single-step BPDA with the attacker's own copy of T (independent
      randomization seed): the attack runs on ``model`` at ``T(x)`` and ``v`` is
      added to ``x``.
    * black: ``v`` from ``surrogate`` gradients at ``x``.

    The undefended column attacks ``undefended_model`` (default ``model``) at
    ``x`` with its own gradients and classifies ``x + v`` directly. In
    randomized mode image ``i`` is denoised with seed ``seed + i`` (the white-box
    attacker uses an independent stream).
    """
    threat = ThreatModel(threat)
    if threat is ThreatModel.BLACK and surrogate is None:
        raise ValueError("black-box evaluation needs a surrogate model")
    plain = undefended_model or model
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    hits = np.zeros(4)
    for i, (x, y) in enumerate(zip(images, labels)):
        y = int(y)
        cfg_i = _per_image_cfg(cfg, seed + i)
        tx = denoise_image(dset, x, cfg_i).reshape(x.shape)
        if threat is ThreatModel.GREY:
            v = perturbation(model, x, y, attack)
        elif threat is ThreatModel.BLACK:
            v = perturbation(surrogate, x, y, attack)
        else:
            attacker_tx = denoise_image(dset, x, _per_image_cfg(cfg, seed + i + ATTACKER_SEED_OFFSET))
            v = perturbation(model, x, y, attack, grad_at=attacker_tx.reshape(x.shape))
        v_plain = perturbation(plain, x, y, attack) if threat is not ThreatModel.BLACK else v
        hits[0] += model.predict(tx) == y
        hits[1] += plain.predict(x + v_plain) == y
        hits[2] += model.predict(denoise_image(dset, x + v, cfg_i).reshape(x.shape)) == y
        hits[3] += plain.predict(x) == y
    n = len(labels)
    acc = hits / max(n, 1)
    return DefenseReport(*acc.tolist(), n=n)


def transform_dataset(dset, cfg: DenoiseConfig, images, seed: int = 0) -> np.ndarray:
    """``T`` applied to every image (per-image seeds in randomized mode)."""
    images = np.asarray(images, dtype=np.float64)
    return np.stack([denoise_image(dset, x, _per_image_cfg(cfg, seed + i)).reshape(x.shape)
                     for i, x in enumerate(images)])
