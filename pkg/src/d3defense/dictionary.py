"""Per-sparsity-level patch dictionaries and their binary file format.

File layout (little-endian)::

    b"D3DICT01"
    u32 patch_size, u32 channels, u32 kappa
    kappa x { u32 eta, f32[atom_dim * eta] atoms, column-major }
    8 bytes corpus hash, u64 seed, f64 epsilon

Atoms are held as float32 in memory so that a save/load round trip is exact;
correlations are always accumulated in float64.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import D3IOError, DimensionError, FormatError

MAGIC = b"D3DICT01"
NORM_TOL = 1e-5


@dataclass(frozen=True)
class Dictionary:
    """``atom_dim x eta`` matrix of unit-norm columns for one sparsity level."""

    atoms: np.ndarray
    level: int
    _atoms64: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        atoms = np.asarray(self.atoms)
        if atoms.ndim != 2 or atoms.shape[1] == 0:
            raise DimensionError(f"level {self.level}: atoms must be a non-empty 2-D matrix, got {atoms.shape}")
        atoms = np.array(atoms, dtype=np.float32, order="F")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        a64 = atoms.astype(np.float64)
        a64.setflags(write=False)
        object.__setattr__(self, "_atoms64", a64)

    @classmethod
    def from_vectors(cls, vectors, level: int) -> "Dictionary":
        """Build from row vectors, normalizing each to unit length."""
        vecs = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DimensionError("cannot normalize a zero vector into an atom")
        return cls((vecs / norms).T, level)

    @property
    def atom_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def eta(self) -> int:
        return self.atoms.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        """Float64 view of the atoms, ``(atom_dim, eta)``."""
        return self._atoms64

    def atom(self, k: int) -> np.ndarray:
        return self._atoms64[:, k]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self._atoms64, axis=0)

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return self.level == other.level and np.array_equal(self.atoms, other.atoms)


def correlate(dictionary: Dictionary, v) -> np.ndarray:
    """Inner products of ``v`` with every atom.

    ``v`` may be a single vector (returns ``eta`` values) or a stack of row
    vectors ``(n, atom_dim)`` (returns ``(n, eta)``).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != dictionary.atom_dim:
        raise DimensionError(f"vector dimension {v.shape[-1]} != atom dimension {dictionary.atom_dim}")
    return v @ dictionary.matrix


@dataclass(frozen=True)
class DictionarySet:
    patch_size: int
    channels: int
    levels: tuple
    epsilon: float = float("nan")
    corpus_hash: bytes = b"\x00" * 8
    seed: int = 0

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise DimensionError("a dictionary set needs at least one level")
        dim = self.patch_size * self.patch_size * self.channels
        for i, d in enumerate(levels, start=1):
            if d.level != i:
                raise DimensionError(f"level indices must run 1..kappa, found {d.level} at position {i}")
            if d.atom_dim != dim:
                raise DimensionError(f"level {i} atom dimension {d.atom_dim} != P*P*C = {dim}")
        if len(self.corpus_hash) != 8:
            raise FormatError("corpus hash must be 8 bytes")

    @property
    def kappa(self) -> int:
        return len(self.levels)

    @property
    def atom_dim(self) -> int:
        return self.levels[0].atom_dim

    def __getitem__(self, level: int) -> Dictionary:
        """1-based level access."""
        return self.levels[level - 1]

    def truncated(self, kappa: int) -> "DictionarySet":
        if not 1 <= kappa <= self.kappa:
            raise DimensionError(f"kappa {kappa} outside 1..{self.kappa}")
        return DictionarySet(self.patch_size, self.channels, self.levels[:kappa], self.epsilon,
                             self.corpus_hash, self.seed)

    def fingerprint(self) -> str:
        """Hex digest of the serialized set."""
        return hashlib.sha256(to_bytes(self)).hexdigest()[:16]


def to_bytes(dset: DictionarySet) -> bytes:
    parts = [MAGIC, struct.pack("<3I", dset.patch_size, dset.channels, dset.kappa)]
    for d in dset.levels:
        parts.append(struct.pack("<I", d.eta))
        parts.append(d.atoms.astype("<f4").tobytes(order="F"))
    parts.append(bytes(dset.corpus_hash))
    parts.append(struct.pack("<Qd", dset.seed, dset.epsilon))
    return b"".join(parts)


def from_bytes(buf: bytes) -> DictionarySet:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        if buf[:6] == MAGIC[:6]:
            raise FormatError(f"unsupported dictionary version {buf[6:8]!r}")
        raise FormatError("not a dictionary file (bad magic)")
    pos = len(MAGIC)

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated payload while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    P, C, kappa = struct.unpack("<3I", take(12, "header"))
    if P == 0 or C not in (1, 3) or kappa == 0:
        raise FormatError(f"invalid header: P={P}, C={C}, kappa={kappa}")
    dim = P * P * C
    levels = []
    for i in range(1, kappa + 1):
        (eta,) = struct.unpack("<I", take(4, f"level {i} size"))
        if eta == 0:
            raise FormatError(f"level {i} has no atoms")
        raw = np.frombuffer(take(4 * dim * eta, f"level {i} atoms"), dtype="<f4")
        atoms = raw.reshape((dim, eta), order="F")
        norms = np.linalg.norm(atoms.astype(np.float64), axis=0)
        bad = np.flatnonzero(~(np.abs(norms - 1.0) <= NORM_TOL))
        if bad.size:
            raise FormatError(f"atom {bad[0]} of level {i} not unit-norm (norm {norms[bad[0]]:.6g})")
        levels.append(Dictionary(atoms, i))
    corpus_hash = take(8, "corpus hash")
    (seed,) = struct.unpack("<Q", take(8, "seed"))
    (epsilon,) = struct.unpack("<d", take(8, "epsilon"))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} unexpected trailing bytes")
    return DictionarySet(P, C, tuple(levels), epsilon, corpus_hash, seed)


def save(dset: DictionarySet, path) -> None:
    for d in dset.levels:
        norms = d.norms()
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise FormatError(f"atom {bad[0]} of level {d.level} not unit-norm (norm {norms[bad[0]]:.6g})")
    try:
        Path(path).write_bytes(to_bytes(dset))
    except OSError as exc:
        raise D3IOError(f"cannot write dictionary {path}: {exc}") from exc


def load(path) -> DictionarySet:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise D3IOError(f"cannot read dictionary {path}: {exc}") from exc
    return from_bytes(buf)


def summary(dset: DictionarySet) -> dict:
    """Header fields and per-level atom-norm statistics."""
    info = {
        "patch_size": dset.patch_size,
        "channels": dset.channels,
        "kappa": dset.kappa,
        "atom_dim": dset.atom_dim,
        "epsilon": dset.epsilon,
        "seed": dset.seed,
        "corpus_hash": dset.corpus_hash.hex(),
        "fingerprint": dset.fingerprint(),
        "levels": [],
    }
    for d in dset.levels:
        norms = d.norms()
        info["levels"].append({
            "level": d.level,
            "eta": d.eta,
            "norm_min": float(norms.min()),
            "norm_max": float(norms.max()),
            "norm_mean": float(norms.mean()),
        })
    return info
