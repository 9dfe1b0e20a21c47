import numpy as np
import pytest

from d3defense.dictionary import Dictionary, DictionarySet


def random_unit_columns(rng, dim, eta):
    a = rng.standard_normal((dim, eta))
    a /= np.linalg.norm(a, axis=0)
    # round-trip through float32 the way stored atoms are, then renormalize in f64
    return a.astype(np.float32).astype(np.float64)


def random_set(rng, patch_size=4, channels=1, etas=(16, 16)):
    dim = patch_size * patch_size * channels
    levels = tuple(Dictionary(random_unit_columns(rng, dim, eta), i) for i, eta in enumerate(etas, start=1))
    return DictionarySet(patch_size, channels, levels, epsilon=0.85)


def naive_argmax(residual, atoms):
    """Scalar reference scan: largest |<r, s_k>|, first index wins ties."""
    best, best_val, coef = 0, -1.0, 0.0
    for k in range(atoms.shape[1]):
        a = 0.0
        for j in range(atoms.shape[0]):
            a += float(residual[j]) * float(atoms[j, k])
        if abs(a) > best_val:
            best, best_val, coef = k, abs(a), a
    return best, coef


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one ``PASS``/``FAIL`` line per acceptance check and return whether it passed."""

    def record(cid: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE_LINES.append(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
        print(_ACCEPTANCE_LINES[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
